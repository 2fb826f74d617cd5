"""Classifier assembly: shapes, initialization, modes, optimizer steps."""

import numpy as np
import pytest

import agile.tensor as T
from agile.model import (
    AdamState,
    ConvClassifier,
    DenseClassifier,
    ModelConfig,
    Params,
    adam_step,
    sgd_step,
)

SMALL = ModelConfig(input_shape=(8, 8, 3), blocks=2, filters=4)


@pytest.fixture()
def small():
    model = ConvClassifier(SMALL)
    params = model.init_params(np.random.default_rng(0))
    return model, params


def test_output_shape_and_param_count(small):
    model, params = small
    x = np.random.default_rng(1).random((5, 8, 8, 3))
    logits = model.apply(params.to_tensors(), x, mode="eval")
    assert logits.data.shape == (5, 2)
    # conv blocks: k*k*cin*f weights, 2 bn params + 2 running stats each
    expect = 0
    cin = 3
    for _ in range(SMALL.blocks):
        expect += 3 * 3 * cin * 4 + 4 * 4
        cin = 4
    expect += SMALL.dense_in() * 2 + 2
    assert params.count() == expect


def test_default_config_matches_paper_scale_architecture():
    cfg = ModelConfig()
    assert cfg.blocks == 4 and cfg.filters == 32 and cfg.kernel == 3
    assert cfg.classes == 2 and cfg.dropout_rate == 0.1
    assert cfg.input_shape == (32, 32, 7)
    assert cfg.spatial_out() == (2, 2)  # 32 -> 16 -> 8 -> 4 -> 2


def test_init_statistics_and_determinism():
    model = ConvClassifier(ModelConfig(input_shape=(16, 16, 4), blocks=2, filters=16))
    p1 = model.init_params(np.random.default_rng(7))
    p2 = model.init_params(np.random.default_rng(7))
    assert p1.checksum() == p2.checksum()
    w = p1.values["block0.kernel"]
    fan_in = 3 * 3 * 4
    assert abs(w.std() - np.sqrt(2.0 / fan_in)) < 0.05 * np.sqrt(2.0 / fan_in) * 3
    np.testing.assert_array_equal(p1.values["block0.gamma"], np.ones(16))
    np.testing.assert_array_equal(p1.values["block0.running_var"], np.ones(16))


def test_eval_mode_is_deterministic(small):
    model, params = small
    x = np.random.default_rng(2).random((3, 8, 8, 3))
    a = model.apply(params.to_tensors(), x, mode="eval").data
    b = model.apply(params.to_tensors(), x, mode="eval").data
    np.testing.assert_array_equal(a, b)


def test_mc_mode_is_stochastic_train_stats_differ(small):
    model, params = small
    x = np.random.default_rng(2).random((6, 8, 8, 3))
    rng = np.random.default_rng(3)
    a = model.apply(params.to_tensors(), x, mode="mc", rng=rng).data
    b = model.apply(params.to_tensors(), x, mode="mc", rng=rng).data
    assert not np.array_equal(a, b)
    # train mode normalizes with batch stats -> differs from eval output
    c = model.apply(params.to_tensors(), x, mode="train",
                    rng=np.random.default_rng(4), use_dropout=False).data
    d = model.apply(params.to_tensors(), x, mode="eval").data
    assert not np.allclose(c, d)


def test_apply_rejects_bad_mode_and_shape(small):
    model, params = small
    x = np.random.default_rng(0).random((2, 8, 8, 3))
    with pytest.raises(T.ParameterError):
        model.apply(params.to_tensors(), x, mode="banana")
    with pytest.raises(T.ShapeError):
        model.apply(params.to_tensors(), x[:, :, :, :2], mode="eval")


def test_stats_sink_collects_all_bn_layers(small):
    model, params = small
    x = np.random.default_rng(5).random((4, 8, 8, 3))
    sink = {}
    model.apply(params.to_tensors(), x, mode="train",
                rng=np.random.default_rng(0), stats_sink=sink, use_dropout=False)
    for b in range(SMALL.blocks):
        assert f"block{b}.running_mean" in sink
        assert f"block{b}.running_var" in sink
    # params themselves unchanged (immutability)
    np.testing.assert_array_equal(params.values["block0.running_mean"],
                                  np.zeros(4))


def test_sgd_step_out_of_place_and_role(small):
    model, params = small
    grads = {k: np.ones_like(v) for k, v in params.values.items()
             if k in params.trainable_names()}
    stepped = sgd_step(params, grads, 0.1)
    assert stepped.role == "adapted" and params.role == "meta"
    np.testing.assert_allclose(
        stepped.values["head.bias"], params.values["head.bias"] - 0.1
    )
    # running stats are carried over untouched
    np.testing.assert_array_equal(stepped.values["block0.running_var"],
                                  params.values["block0.running_var"])
    with pytest.raises(T.ParameterError):
        sgd_step(params, {"head.bias": grads["head.bias"]}, 0.1)


def test_adam_step_matches_reference_formula():
    # independent scalar oracle of the bias-corrected update
    params = Params({"w": np.array([1.0])}, role="meta")
    grads = {"w": np.array([0.5])}
    state = AdamState()
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    m = v = 0.0
    w = 1.0
    cur = params
    for t in range(1, 4):
        state, cur = adam_step(state, cur, grads, lr)
        m = b1 * m + (1 - b1) * 0.5
        v = b2 * v + (1 - b2) * 0.25
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert cur.values["w"][0] == pytest.approx(w, abs=1e-15)


def test_dense_classifier_supports_second_order():
    model = DenseClassifier((6, 8), classes=2)
    assert model.second_order_capable
    params = model.init_params(np.random.default_rng(0))
    x = np.random.default_rng(1).random((4, 6))
    logits = model.apply(params.to_tensors(), x, mode="train")
    loss = T.softmax_cross_entropy(logits, np.array([0, 1, 0, 1]))
    grads = T.backward(loss, create_graph=True)
    leaf = params.to_tensors()  # fresh leaves not in this graph
    assert grads is not None  # differentiable path exists end-to-end


def test_spatial_divisibility_warning():
    cfg = ModelConfig(input_shape=(10, 10, 3), blocks=3, filters=4)
    with pytest.warns(UserWarning):
        model = ConvClassifier(cfg)
    params = model.init_params(np.random.default_rng(0))
    x = np.random.default_rng(1).random((2, 10, 10, 3))
    out = model.apply(params.to_tensors(), x, mode="eval")
    assert out.data.shape == (2, 2)
