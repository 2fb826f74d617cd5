"""Uncertainty-driven labeling: MC-dropout entropy scoring over an unlabeled
pool, top-entropy query selection, and the query -> label -> adapt loop.

The loop is written as a suspendable session (``ActiveSession``) so that an
interactive label source (the annotation service) can drive it across HTTP
requests; ``active_loop`` is the synchronous convenience wrapper used with an
oracle labeler.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .meta import _make_rngs, evaluate_accuracy, inner_adapt
from .model import Params
from .tasks import Episode, TaskDataset

__all__ = [
    "ActiveConfig",
    "UncertaintyScore",
    "PoolState",
    "mc_predict",
    "predictive_entropy",
    "score_pool",
    "select_queries",
    "ActiveSession",
    "active_loop",
    "oracle_labeler",
    "export_query_log",
]


@dataclass(frozen=True)
class ActiveConfig:
    """Knobs of the uncertainty loop."""

    budget: int = 16
    t_passes: int = 20
    query_batch: int = 2
    adapt_steps: int = 1
    alpha: float = 0.01
    continue_from_phi: bool = False
    selection: str = "entropy"  # or "random" (ablation baseline)

    def __post_init__(self):
        if self.selection not in ("entropy", "random"):
            raise T.ParameterError(
                f"selection must be 'entropy' or 'random', got {self.selection!r}"
            )
        if self.budget < 2:
            raise T.ParameterError(
                f"budget must be >= 2 (one seed sample per class), got {self.budget}"
            )
        if self.t_passes < 2:
            raise T.ParameterError(f"t_passes must be >= 2, got {self.t_passes}")
        if self.query_batch < 1:
            raise T.ParameterError(f"query_batch must be >= 1, got {self.query_batch}")
        if self.adapt_steps < 1:
            raise T.ParameterError(f"adapt_steps must be >= 1, got {self.adapt_steps}")


@dataclass(frozen=True)
class UncertaintyScore:
    sample_id: int
    mc_mean_probs: np.ndarray
    entropy: float
    t_passes: int


@dataclass
class PoolState:
    """Labeled/unlabeled bookkeeping plus the ordered query log."""

    labeled: list = field(default_factory=list)  # (sample_id, label) pairs
    unlabeled: list = field(default_factory=list)  # sample ids
    budget_remaining: int = 0
    history: list = field(default_factory=list)  # dicts, one per answered query

    def labeled_ids(self) -> set:
        return {int(i) for i, _ in self.labeled}

    def check(self) -> None:
        overlap = self.labeled_ids() & {int(i) for i in self.unlabeled}
        if overlap:
            raise T.DataError(f"samples both labeled and unlabeled: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {
            "labeled": [[int(i), int(y)] for i, y in self.labeled],
            "unlabeled": [int(i) for i in self.unlabeled],
            "budget_remaining": int(self.budget_remaining),
            "history": self.history,
        }

    @staticmethod
    def from_json(obj: dict) -> "PoolState":
        return PoolState(
            labeled=[(int(i), int(y)) for i, y in obj["labeled"]],
            unlabeled=[int(i) for i in obj["unlabeled"]],
            budget_remaining=int(obj["budget_remaining"]),
            history=list(obj["history"]),
        )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def mc_predict(
    model,
    params: Params,
    x: np.ndarray,
    t_passes: int,
    rng: np.random.Generator,
    chunk: int = 512,
) -> np.ndarray:
    """Mean softmax probability over ``t_passes`` stochastic forward passes
    (dropout active, batchnorm on running stats). Returns [N, classes]."""
    if t_passes < 1:
        raise T.ParameterError(f"t_passes must be >= 1, got {t_passes}")
    config = getattr(model, "config", None)
    if config is not None and getattr(config, "dropout_rate", None) == 0.0:
        # without dropout every pass is identical; one pass is the exact mean
        t_passes = 1
    tensors = params.to_tensors()
    # all passes of a sample group run as one tiled batch: dropout masks are
    # elementwise-independent, so this is distributionally identical to
    # t_passes separate forwards but amortizes the per-call overhead
    group = max(1, chunk // t_passes)
    parts = []
    with T.no_grad():
        for i in range(0, len(x), group):
            xi = x[i : i + group]
            tiled = np.broadcast_to(
                xi, (t_passes,) + xi.shape
            ).reshape((-1,) + xi.shape[1:])
            logits = model.apply(tensors, tiled, "mc", rng=rng).data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
            parts.append(probs.reshape(t_passes, len(xi), -1).mean(axis=0))
    return np.concatenate(parts)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy of probability rows; 0*log(0) counts as 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise T.DataError(f"negative probability in {p}")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise T.DataError("probabilities must sum to 1 along the last axis")
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1) + 0.0  # avoid -0.0


def score_pool(
    model,
    params: Params,
    task: TaskDataset,
    sample_ids: list,
    t_passes: int,
    rng: np.random.Generator,
) -> list:
    """One UncertaintyScore per pool sample, in the given id order."""
    ids = [int(i) for i in sample_ids]
    if not ids:
        return []
    probs = mc_predict(model, params, task.patches[ids], t_passes, rng)
    ent = predictive_entropy(probs)
    return [
        UncertaintyScore(i, probs[k], float(ent[k]), t_passes)
        for k, i in enumerate(ids)
    ]


def select_queries(pool: PoolState, scores: list, batch: int) -> list:
    """The ``batch`` highest-entropy unlabeled ids (ties: ascending id),
    removed from the unlabeled pool. Empty result signals loop termination."""
    if batch <= 0 or pool.budget_remaining <= 0 or not pool.unlabeled:
        return []
    unlabeled = {int(i) for i in pool.unlabeled}
    eligible = [s for s in scores if s.sample_id in unlabeled]
    eligible.sort(key=lambda s: (-s.entropy, s.sample_id))
    batch = min(batch, pool.budget_remaining, len(eligible))
    picked = [s.sample_id for s in eligible[:batch]]
    pool.unlabeled = [i for i in pool.unlabeled if int(i) not in set(picked)]
    return picked


# ---------------------------------------------------------------------------
# the suspendable loop
# ---------------------------------------------------------------------------

class ActiveSession:
    """Query -> label -> adapt loop, driven one label batch at a time.

    Usage: read ``pending`` (with per-query entropies in ``pending_scores``),
    obtain labels from any source, call :meth:`submit_labels`; repeat until
    :attr:`done`. The internal rng streams advance only on submissions, so
    the query history is deterministic for a fixed seed regardless of who
    answers or how long they take.
    """

    def __init__(
        self,
        model,
        theta: Params,
        task: TaskDataset,
        config: ActiveConfig,
        seed: int = 0,
    ):
        self.model = model
        self.theta = theta
        self.task = task
        self.config = config
        self.seed = seed
        self.rngs = _make_rngs(seed)
        self.round = 0
        self.done = False
        self.phi = theta
        self.adapt_log: list = []
        train = task.train_idx
        lab = task.labels[train]
        # round 0 seeds one random sample per class so the first adaptation
        # is defined; their labels still come from the label source
        seed_ids = [
            int(self.rngs["episode"].choice(train[lab == cls]))
            for cls in (0, 1)
        ]
        self.pool = PoolState(
            labeled=[],
            unlabeled=[int(i) for i in train if int(i) not in set(seed_ids)],
            budget_remaining=config.budget - len(seed_ids),
        )
        self.pending: list = seed_ids
        self.pending_scores: dict = {i: None for i in seed_ids}

    # -- label intake -------------------------------------------------------

    def submit_labels(self, labels: dict) -> None:
        """Record labels for every currently pending query, then either issue
        the next query batch or finish the loop."""
        if self.done:
            raise T.ParameterError("session is finished; no labels expected")
        missing = [i for i in self.pending if i not in labels]
        if missing:
            raise T.DataError(f"missing labels for pending queries {missing}")
        for i in self.pending:
            y = int(labels[i])
            if y not in (0, 1):
                raise T.DataError(f"label for sample {i} must be 0 or 1, got {y}")
            self.pool.labeled.append((i, y))
            self.pool.history.append({
                "round": self.round,
                "sample_id": i,
                "entropy": self.pending_scores.get(i),
                "label": y,
            })
        self.pool.check()
        self.pending = []
        self.pending_scores = {}
        self.round += 1
        self._advance()

    def _advance(self) -> None:
        self._adapt()
        if self.pool.budget_remaining <= 0 or not self.pool.unlabeled:
            self.done = True
            return
        if self.config.selection == "entropy":
            scores = score_pool(
                self.model, self.phi, self.task, self.pool.unlabeled,
                self.config.t_passes, self.rngs["dropout"],
            )
            picked = select_queries(self.pool, scores, self.config.query_batch)
            by_id = {s.sample_id: s.entropy for s in scores}
        else:  # uniform-random ablation baseline
            batch = min(self.config.query_batch, self.pool.budget_remaining,
                        len(self.pool.unlabeled))
            picked = [int(i) for i in self.rngs["episode"].choice(
                self.pool.unlabeled, size=batch, replace=False)]
            self.pool.unlabeled = [i for i in self.pool.unlabeled
                                   if int(i) not in set(picked)]
            by_id = {i: None for i in picked}
        if not picked:
            self.done = True
            return
        self.pool.budget_remaining -= len(picked)
        self.pending = picked
        self.pending_scores = {i: by_id[i] for i in picked}

    def _adapt(self) -> None:
        ids = [i for i, _ in self.pool.labeled]
        ys = np.array([y for _, y in self.pool.labeled])
        xs = self.task.patches[ids]
        start = self.phi if self.config.continue_from_phi else self.theta
        episode = Episode(xs, ys, xs[:0], ys[:0], 0, np.array(ids), np.array([]))
        sink: dict = {}
        phi, losses = inner_adapt(
            self.model, start, episode, self.config.alpha,
            self.config.adapt_steps, stats_sink=sink,
            context=f"active round {self.round}",
        )
        self.phi = phi.replace(sink)
        self.adapt_log.append({
            "round": self.round,
            "labeled": len(ids),
            "support_loss": losses[0],
        })

    # -- results ------------------------------------------------------------

    def metrics(self) -> dict:
        test_x, test_y = self.task.test_data()
        return {
            "accuracy": evaluate_accuracy(self.model, self.phi, test_x, test_y),
            "labeled": len(self.pool.labeled),
            "rounds": self.round,
        }

    # -- suspend / resume ---------------------------------------------------

    def snapshot(self, path: str) -> None:
        """Write a resumable pool-state snapshot (weights excluded: resume
        re-derives phi from theta and the labeled set)."""
        obj = {
            "seed": self.seed,
            "round": self.round,
            "done": self.done,
            "pending": [int(i) for i in self.pending],
            "pending_scores": {
                str(i): self.pending_scores[i] for i in self.pending
            },
            "pool": self.pool.to_json(),
            "rng": {k: _rng_state(g) for k, g in self.rngs.items()},
            "config": {
                "budget": self.config.budget,
                "t_passes": self.config.t_passes,
                "query_batch": self.config.query_batch,
                "adapt_steps": self.config.adapt_steps,
                "alpha": self.config.alpha,
                "continue_from_phi": self.config.continue_from_phi,
                "selection": self.config.selection,
            },
        }
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1)

    @staticmethod
    def resume(path: str, model, theta: Params, task: TaskDataset) -> "ActiveSession":
        if not os.path.exists(path):
            raise T.DataError(f"no session snapshot at {path}")
        with open(path) as fh:
            obj = json.load(fh)
        session = ActiveSession.__new__(ActiveSession)
        session.model = model
        session.theta = theta
        session.task = task
        session.config = ActiveConfig(**obj["config"])
        session.seed = int(obj["seed"])
        session.rngs = _make_rngs(session.seed)
        for k, st in obj["rng"].items():
            _set_rng_state(session.rngs[k], st)
        session.round = int(obj["round"])
        session.done = bool(obj["done"])
        session.pool = PoolState.from_json(obj["pool"])
        session.pending = [int(i) for i in obj["pending"]]
        session.pending_scores = {
            int(i): obj["pending_scores"][i] for i in obj["pending_scores"]
        }
        session.adapt_log = []
        session.phi = theta
        if session.pool.labeled:
            session._adapt()  # re-derive phi; rng streams are untouched
        return session


def _rng_state(gen: np.random.Generator) -> dict:
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _set_rng_state(gen: np.random.Generator, enc: dict) -> None:
    gen.bit_generator.state = {
        "bit_generator": enc["bit_generator"],
        "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
        "has_uint32": enc["has_uint32"],
        "uinteger": enc["uinteger"],
    }


# ---------------------------------------------------------------------------
# oracle-mode wrapper
# ---------------------------------------------------------------------------

def oracle_labeler(task: TaskDataset):
    """Label source that answers with the task's ground-truth labels."""

    def labeler(sample_ids: list) -> dict:
        return {int(i): int(task.labels[int(i)]) for i in sample_ids}

    return labeler


def active_loop(
    model,
    theta: Params,
    task: TaskDataset,
    config: ActiveConfig,
    labeler,
    seed: int = 0,
) -> tuple[dict, PoolState, list]:
    """Run the full loop with a synchronous label source.

    Returns (final metrics, pool state, per-round adaptation log)."""
    session = ActiveSession(model, theta, task, config, seed=seed)
    while not session.done:
        session.submit_labels(labeler(session.pending))
    return session.metrics(), session.pool, session.adapt_log


def export_query_log(pool: PoolState, path: str, source: str = "oracle") -> None:
    """Query history as CSV: round, sample id, entropy, label source, label."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "sample_id", "entropy", "label_source", "label"])
        for rec in pool.history:
            ent = rec["entropy"]
            writer.writerow([
                rec["round"], rec["sample_id"],
                "" if ent is None else f"{ent:.12g}",
                rec.get("label_source", source), rec["label"],
            ])
