"""Acceptance suite: one test per release criterion (A1..A10), each ending
in a single machine-greppable PASS/FAIL line. The statistical claims (A5..A8)
run real desk-scale trainings and take tens of minutes combined; deselect
with ``-m "not acceptance"`` for quick iteration."""

import math
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from agile import tensor as T
from agile.active import (
    ActiveConfig,
    active_loop,
    mc_predict,
    oracle_labeler,
    predictive_entropy,
)
from agile.bench import MethodConfig, make_world, run_method, save_run
from agile.meta import (
    MetaState,
    adapt_and_eval,
    baseline_vanilla,
    inner_adapt_second_order,
    load_state,
    meta_train,
    save_state,
)
from agile.model import ConvClassifier, DenseClassifier, ModelConfig, Params
from agile.service import ServiceRuntime, create_app
from agile.tasks import (
    AugmentationConfig,
    Episode,
    augment_task,
    flip_labels,
    generate_synthetic_task,
    rotate_patches,
    shuffle_channels,
)

pytestmark = pytest.mark.acceptance

# -- A6/A8 evaluation profile (16x16 patches keep MC scoring affordable) ----
A6_SEEDS = 12
A6_TASKS_PER_SEED = 3
A6_CONFIG = dict(budget=6, t_passes=10, query_batch=1, adapt_steps=5)
A6_TASK_SIZE = 1000  # 600-sample train pool, so the 6-label budget is 1%

_CACHE: dict = {}


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\n{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# A1 gradient correctness
# ---------------------------------------------------------------------------

def test_a1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(50):
        if trial % 10 == 0:  # a few conv stacks, mostly dense nets
            model = ConvClassifier(ModelConfig(
                input_shape=(8, 8, 2), blocks=2, filters=3, dropout_rate=0.0))
            x = rng.standard_normal((2, 8, 8, 2))
        else:
            sizes = tuple(int(s) for s in rng.integers(3, 8, size=2))
            model = DenseClassifier(sizes, classes=2)
            x = rng.standard_normal((3, sizes[0]))
        params = model.init_params(rng)
        y = rng.integers(0, 2, size=x.shape[0])

        def loss_fn(tensors):
            logits = model.apply(tensors, x, mode="train", use_dropout=False)
            return T.softmax_cross_entropy(logits, y)

        err = T.finite_diff_check(
            loss_fn, dict(params.values), eps=1e-5,
            max_coords_per_param=4, rng=rng,
        )
        worst = max(worst, err)
    minutes = (time.perf_counter() - t0) / 60
    ok = worst < 1e-4 and minutes < 2
    _report("A1 gradient correctness",
            ok, f"max rel err {worst:.2e} < 1e-4, {minutes:.2f} min < 2")


# ---------------------------------------------------------------------------
# A2 augmentation algebra
# ---------------------------------------------------------------------------

def test_a2_augmentation_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(22)
    checked = 0
    for i in range(200):
        task = generate_synthetic_task(
            rng, h=8, w=8, c=3, signal_channel=int(rng.integers(3)),
            q=24, task_id=f"alg-{i}")
        # label flip is an involution
        once = flip_labels(task, np.random.default_rng(i), 1.0)
        twice = flip_labels(once, np.random.default_rng(i), 1.0)
        assert twice.equals(task)
        # channel permutation composed with its inverse is the identity
        perm_rng = np.random.default_rng(1000 + i)
        shuffled = shuffle_channels(task, perm_rng, 1.0)
        perm = np.asarray(shuffled.provenance[-1]["perm"])
        inv = np.argsort(perm)
        restored = shuffled.patches[..., inv]
        np.testing.assert_array_equal(restored, task.patches)
        # rotation by 180 twice is the identity
        rot = rotate_patches(task, _Forced2(), 1.0)
        rot2 = rotate_patches(rot, _Forced2(), 1.0)
        np.testing.assert_array_equal(rot2.patches, task.patches)
        # zero-probability augmentation is the exact identity
        same = augment_task(task, AugmentationConfig(0.0, 0.0, 0.0),
                            np.random.default_rng(i))
        assert same.equals(task)
        checked += 1
    minutes = (time.perf_counter() - t0) / 60
    ok = checked == 200 and minutes < 1
    _report("A2 augmentation algebra",
            ok, f"{checked}/200 tasks exact, {minutes:.2f} min < 1")


class _Forced2:
    """rng stub that always fires the transform and picks 2 quarter turns."""

    def random(self, *a, **k):
        return 0.0

    def integers(self, *a, **k):
        return 2


# ---------------------------------------------------------------------------
# A3 second-order meta-gradient
# ---------------------------------------------------------------------------

def _dense_meta_objective(model, values, episode, alpha):
    params = Params(values)
    tensors = params.to_tensors()
    with T.no_grad():
        slogits = model.apply(tensors, episode.support_x, mode="train")
        sloss = T.softmax_cross_entropy(slogits, episode.support_y)
    # re-run with the tape to get support gradients
    tensors = params.to_tensors()
    sloss = T.softmax_cross_entropy(
        model.apply(tensors, episode.support_x, mode="train"),
        episode.support_y)
    grads = T.backward(sloss)
    phi = {
        k: T.Tensor(t.data - alpha * (grads[t].data if t in grads
                                      else np.zeros_like(t.data)))
        for k, t in tensors.items()
    }
    with T.no_grad():
        qlogits = model.apply(phi, episode.query_x, mode="train")
        return float(T.softmax_cross_entropy(qlogits, episode.query_y).data)


def test_a3_second_order_meta_gradient():
    t0 = time.perf_counter()
    model = DenseClassifier((4, 4), classes=2)  # 4*4+4 + 4*2+2 = 30 params
    rng = np.random.default_rng(33)
    theta = model.init_params(rng)
    assert theta.count() <= 50
    ep = Episode(rng.random((6, 4)), np.array([0, 1, 0, 1, 0, 1]),
                 rng.random((4, 4)), np.array([1, 0, 1, 0]), 3,
                 np.arange(6), np.arange(4))
    alpha = 0.05

    leaves = theta.to_tensors()
    phi = inner_adapt_second_order(model, leaves, ep, alpha)
    qloss = T.softmax_cross_entropy(
        model.apply(phi, ep.query_x, mode="train"), ep.query_y)
    grads = T.backward(qloss)

    eps, max_err = 1e-6, 0.0
    for name in theta.values:
        g = grads[leaves[name]].data.ravel()
        flat = theta.values[name].ravel()
        for i in range(flat.size):
            bump = np.zeros_like(flat)
            bump[i] = eps
            up, dn = dict(theta.values), dict(theta.values)
            shape = theta.values[name].shape
            up[name] = (flat + bump).reshape(shape)
            dn[name] = (flat - bump).reshape(shape)
            numeric = (_dense_meta_objective(model, up, ep, alpha)
                       - _dense_meta_objective(model, dn, ep, alpha)) / (2 * eps)
            err = abs(numeric - g[i]) / max(abs(numeric), abs(g[i]), 1.0)
            max_err = max(max_err, err)

    # first order equals second order exactly at alpha=0
    leaves = theta.to_tensors()
    phi0 = inner_adapt_second_order(model, leaves, ep, alpha=0.0)
    qloss0 = T.softmax_cross_entropy(
        model.apply(phi0, ep.query_x, mode="train"), ep.query_y)
    second0 = {k: T.backward(qloss0)[leaves[k]].data for k in leaves}
    leaves2 = theta.to_tensors()
    qloss1 = T.softmax_cross_entropy(
        model.apply(leaves2, ep.query_x, mode="train"), ep.query_y)
    first0 = {k: T.backward(qloss1)[leaves2[k]].data for k in leaves2}
    alpha0_exact = all(
        np.array_equal(first0[k], second0[k]) or
        np.allclose(first0[k], second0[k], atol=1e-12) for k in first0)

    minutes = (time.perf_counter() - t0) / 60
    ok = max_err < 1e-3 and alpha0_exact and minutes < 2
    _report("A3 second-order meta-gradient", ok,
            f"max rel err {max_err:.2e} < 1e-3, alpha=0 first==second: "
            f"{alpha0_exact}, {minutes:.2f} min < 2")


# ---------------------------------------------------------------------------
# A4 entropy properties
# ---------------------------------------------------------------------------

def test_a4_entropy_properties():
    t0 = time.perf_counter()
    h_half = predictive_entropy(np.array([0.5, 0.5]))
    h_sure = predictive_entropy(np.array([1.0, 0.0]))
    uniform_ok = abs(h_half - math.log(2)) <= 1e-12
    sure_ok = h_sure == 0.0

    grid = np.linspace(0.0, 1.0, 101)
    ent = np.array([predictive_entropy(np.array([p, 1 - p])) for p in grid])
    symmetric = np.allclose(ent, ent[::-1], atol=1e-12)
    # unimodal: increasing up to p=0.5 then decreasing
    rising, falling = np.diff(ent[:51]), np.diff(ent[50:])
    unimodal = bool(np.all(rising > 0) and np.all(falling < 0))

    model = ConvClassifier(ModelConfig(input_shape=(8, 8, 2), blocks=2,
                                       filters=4, dropout_rate=0.0))
    rng = np.random.default_rng(44)
    params = model.init_params(rng)
    x = rng.standard_normal((5, 8, 8, 2))
    mc = mc_predict(model, params, x, t_passes=7,
                    rng=np.random.default_rng(0))
    with T.no_grad():
        logits = model.apply(params.to_tensors(), x, mode="eval").data
    z = logits - logits.max(axis=1, keepdims=True)
    det = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    dropout0_ok = np.array_equal(mc, det)

    minutes = (time.perf_counter() - t0) / 60
    ok = (uniform_ok and sure_ok and symmetric and unimodal and dropout0_ok
          and minutes < 1)
    _report("A4 entropy properties", ok,
            f"H(.5,.5)-ln2={h_half - math.log(2):.1e}, H(1,0)={h_sure}, "
            f"symmetric={symmetric}, unimodal={unimodal}, "
            f"mc==deterministic at dropout 0: {dropout0_ok}, "
            f"{minutes:.2f} min < 1")


# ---------------------------------------------------------------------------
# A5/A7: augmented vs plain meta-training at desk scale
# ---------------------------------------------------------------------------

def _a5_runs() -> dict:
    """Train augmented + plain meta-learners for 5 seeds and evaluate
    1-step / multi-step adaptation on each world's 10 real tasks."""
    if "a5" in _CACHE:
        return _CACHE["a5"]
    t0 = time.perf_counter()
    aug_acc1, plain_acc1, curves = [], [], []
    for seed in range(5):
        world = make_world(seed=seed, samples_per_task=400)
        aug = world.meta_state("augmented")
        plain = world.meta_state("base")
        for t_idx, task in enumerate(world.real_tasks):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, 7919, t_idx]))
            sup = rng.choice(task.train_idx, size=16, replace=False)
            sx, sy = task.patches[sup], task.labels[sup]
            curve = adapt_and_eval(world.model, aug.params, task, sx, sy,
                                   steps=10)
            aug_acc1.append(curve[1])
            curves.append(curve)
            plain_curve = adapt_and_eval(world.model, plain.params, task,
                                         sx, sy, steps=1)
            plain_acc1.append(plain_curve[1])
    _CACHE["a5"] = {
        "aug_acc1": np.array(aug_acc1),
        "plain_acc1": np.array(plain_acc1),
        "curves": np.array(curves),  # [5*10, 11]
        "minutes": (time.perf_counter() - t0) / 60,
    }
    return _CACHE["a5"]


def test_a5_task_augmentation_claim():
    runs = _a5_runs()
    aug = float(runs["aug_acc1"].mean())
    plain = float(runs["plain_acc1"].mean())
    gap = aug - plain
    ok = gap >= 0.20 and aug >= 0.75 and runs["minutes"] < 30
    _report("A5 task-augmentation claim", ok,
            f"augmented {aug:.3f} vs plain {plain:.3f}, gap {gap:.3f} >= 0.20,"
            f" augmented >= 0.75, {runs['minutes']:.1f} min < 30")


def test_a7_fast_adaptation_shape():
    curves = _a5_runs()["curves"]
    mean_curve = curves.mean(axis=0)
    jump = float(mean_curve[1] - mean_curve[0])
    steps = np.diff(mean_curve[1:])
    non_decreasing = bool(np.all(steps >= -0.03))
    ok = jump >= 0.2 and non_decreasing
    _report("A7 fast-adaptation shape", ok,
            f"1-step jump {jump:.3f} >= 0.2, steps 1..10 within -0.03: "
            f"{non_decreasing} (min step {steps.min():+.3f})")


# ---------------------------------------------------------------------------
# A6/A8: active selection at a 1%-of-pool budget
# ---------------------------------------------------------------------------

def _a6_world() -> tuple:
    if "a6" not in _CACHE:
        t0 = time.perf_counter()
        world = make_world(seed=0, patch=(16, 16, 7), samples_per_task=400)
        state = world.meta_state("augmented")
        _CACHE["a6"] = (world, state, (time.perf_counter() - t0) / 60)
    return _CACHE["a6"]


def _a6_task(seed: int, j: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 33, j]))
    return generate_synthetic_task(
        rng, h=16, w=16, c=7, signal_channel=3 + (seed * 3 + j) % 4,
        q=A6_TASK_SIZE, task_id=f"a6-{seed}-{j}")


def test_a6_active_selection_claim():
    world, state, train_minutes = _a6_world()
    t0 = time.perf_counter()
    gaps = []
    for seed in range(A6_SEEDS):
        accs = {"entropy": [], "random": []}
        for j in range(A6_TASKS_PER_SEED):
            task = _a6_task(seed, j)
            for sel in ("entropy", "random"):
                cfg = ActiveConfig(selection=sel, **A6_CONFIG)
                metrics, _, _ = active_loop(
                    world.model, state.params, task, cfg,
                    oracle_labeler(task), seed=seed * 10 + j)
                accs[sel].append(metrics["accuracy"])
        gaps.append(np.mean(accs["entropy"]) - np.mean(accs["random"]))
    gaps = np.array(gaps)
    wins = int(np.sum(gaps > 0))
    decided = int(np.sum(gaps != 0))
    # one-sided sign test: P(X >= wins | n=decided, p=1/2)
    p_value = sum(math.comb(decided, k) for k in range(wins, decided + 1))
    p_value /= 2.0 ** decided
    minutes = train_minutes + (time.perf_counter() - t0) / 60
    mean_gap = float(gaps.mean())
    ok = mean_gap > 0 and p_value < 0.05 and minutes < 20
    _report("A6 active-selection claim", ok,
            f"mean gap {mean_gap:+.4f} > 0, wins {wins}/{decided}, "
            f"sign test p={p_value:.4f} < 0.05, {minutes:.1f} min < 20")


def test_a8_size_sweep():
    world, state, _ = _a6_world()
    accs: dict = {"10%": [], "1%": [], "vanilla": []}
    for seed in range(5):
        for j in range(2):
            task = _a6_task(100 + seed, j)
            pool = len(task.train_idx)
            for pct in ("10%", "1%"):
                budget = max(2, int(0.1 * pool if pct == "10%"
                                    else 0.01 * pool))
                cfg = ActiveConfig(budget=budget, t_passes=10,
                                   query_batch=max(2, budget // 8),
                                   adapt_steps=1)
                metrics, _, _ = active_loop(
                    world.model, state.params, task, cfg,
                    oracle_labeler(task), seed=seed * 10 + j)
                accs[pct].append(metrics["accuracy"])
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, 55, j]))
            sup = rng.choice(task.train_idx, size=max(2, pool // 100),
                             replace=False)
            acc, _ = baseline_vanilla(
                world.model, task, task.patches[sup], task.labels[sup],
                updates=100, seed=seed)
            accs["vanilla"].append(acc)
    m10 = float(np.mean(accs["10%"]))
    m1 = float(np.mean(accs["1%"]))
    mv = float(np.mean(accs["vanilla"]))
    ok = m10 >= m1 and m1 >= mv
    _report("A8 size sweep", ok,
            f"10% budget {m10:.3f} >= 1% budget {m1:.3f} >= "
            f"vanilla-100 at 1% {mv:.3f}")


# ---------------------------------------------------------------------------
# A9 determinism & persistence
# ---------------------------------------------------------------------------

def test_a9_determinism_and_persistence(tmp_path):
    from agile.meta import MetaConfig

    cfg = MetaConfig.desk_scale(iterations=20, meta_batch=1, k_shot=2,
                                query_size=2, eval_every=10 ** 9,
                                checkpoint_every=10)
    rng = np.random.default_rng(0)
    tasks = [generate_synthetic_task(rng, h=16, w=16, c=3, signal_channel=i,
                                     q=60, task_id=f"det-{i}")
             for i in range(2)]
    model = ConvClassifier(ModelConfig(input_shape=(16, 16, 3)))

    s1 = meta_train(model, tasks, cfg, seed=7,
                    checkpoint_dir=str(tmp_path / "run1"))
    s2 = meta_train(model, tasks, cfg, seed=7,
                    checkpoint_dir=str(tmp_path / "run2"))
    bitwise = True
    for it in ("iter000010", "iter000020"):
        for fname in ("state.json", "manifest.txt", "params.bin"):
            pa = tmp_path / "run1" / it / fname
            pb = tmp_path / "run2" / it / fname
            if not (pa.exists() and pb.exists()
                    and pa.read_bytes() == pb.read_bytes()):
                bitwise = False

    # resume from the 10-iteration checkpoint and match the straight run
    resumed = load_state(str(tmp_path / "run1" / "iter000010"))
    resumed.iteration = 10
    cfg2 = MetaConfig.desk_scale(iterations=20, meta_batch=1, k_shot=2,
                                 query_size=2, eval_every=10 ** 9,
                                 checkpoint_every=10 ** 9)
    s3 = meta_train(model, tasks, cfg2, seed=7, state=resumed)
    resume_exact = all(
        np.array_equal(s1.params.values[k], s3.params.values[k])
        for k in s1.params.values)

    # identical seeds -> identical exported result files
    world = make_world(seed=3, n_meta=2, n_real=2, patch=(16, 16, 3),
                       samples_per_task=60,
                       meta_config=MetaConfig.desk_scale(
                           iterations=5, eval_every=10 ** 9,
                           checkpoint_every=10 ** 9, k_shot=2, query_size=2))
    mc = MethodConfig("maml", 4, 1, "base", 3)
    save_run(run_method(mc, world, curve_steps=2), str(tmp_path / "resA"))
    save_run(run_method(mc, world, curve_steps=2), str(tmp_path / "resB"))
    results_exact = all(
        (tmp_path / "resA" / n).read_bytes()
        == (tmp_path / "resB" / n).read_bytes()
        for n in ("config.json", "metrics.csv", "curves.csv"))

    ok = bitwise and resume_exact and results_exact
    _report("A9 determinism & persistence", ok,
            f"checkpoints bit-identical: {bitwise}, 10-iteration resume "
            f"exact: {resume_exact}, result files identical: {results_exact}")


# ---------------------------------------------------------------------------
# A10 protocol transparency (UI path == oracle path)
# ---------------------------------------------------------------------------

def test_a10_protocol_transparency():
    model = ConvClassifier(ModelConfig(input_shape=(16, 16, 3)))
    rng = np.random.default_rng(7)
    theta = model.init_params(rng)
    task = generate_synthetic_task(rng, h=16, w=16, c=3, signal_channel=0,
                                   q=80, task_id="ui-task")
    runtime = ServiceRuntime(model, theta, [task])
    client = TestClient(create_app(runtime))

    resp = client.post("/sessions", json={
        "task": 0, "budget": 6, "seed": 11, "t_passes": 3, "query_batch": 2})
    sid = resp.json()["session_id"]
    status = resp.json()["status"]
    double_submit_ok = True
    while status != "done":
        queries = client.get(f"/sessions/{sid}/queries").json()["queries"]
        for q in queries:
            body = {"sample_id": q["sample_id"],
                    "label": int(task.labels[q["sample_id"]])}
            first = client.post(f"/sessions/{sid}/labels", json=body)
            second = client.post(f"/sessions/{sid}/labels", json=body)
            if not first.json().get("accepted"):
                double_submit_ok = False
            if second.status_code == 200 and second.json().get("accepted"):
                double_submit_ok = False  # duplicate must never re-apply
        status = client.get(f"/sessions/{sid}/status").json()["status"]

    final = client.get(f"/sessions/{sid}/status").json()
    cfg = ActiveConfig(budget=6, t_passes=3, query_batch=2)
    metrics, pool, _ = active_loop(model, theta, task, cfg,
                                   oracle_labeler(task), seed=11)
    history_ok = (
        [(h["round"], h["sample_id"], h["entropy"], h["label"])
         for h in final["history"]]
        == [(h["round"], h["sample_id"], h["entropy"], h["label"])
            for h in pool.history])
    metrics_ok = final["metrics"] == metrics
    seen = [h["sample_id"] for h in final["history"]]
    no_loss_no_dup = len(seen) == len(set(seen)) == 6

    ok = history_ok and metrics_ok and double_submit_ok and no_loss_no_dup
    _report("A10 protocol transparency", ok,
            f"UI history == oracle history: {history_ok}, metrics equal: "
            f"{metrics_ok}, double-submit never re-applied: "
            f"{double_submit_ok}, no lost/duplicated labels: {no_loss_no_dup}")
