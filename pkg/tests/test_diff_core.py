import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psdiora import diff_core as dc


def small_params(dim=4, vocab=6, seed=0, scale=0.5):
    return dc.ModelParams.init(vocab, dim, seed=seed, scale=scale)


def test_compose_zero_weights_gives_zero():
    p = small_params(dim=3)
    p["compose_W"].value[:] = 0.0
    out = dc.compose(dc.Tensor(np.ones(3)), dc.Tensor(-np.ones(3)), p)
    assert np.array_equal(out.value, np.zeros(3))


def test_compose_hand_value_dim1():
    p = small_params(dim=1)
    p["compose_W"].value[:] = [[1.0], [1.0]]
    p["compose_b"].value[:] = 0.0
    out = dc.compose(dc.Tensor(np.array([0.5])), dc.Tensor(np.array([0.25])), p)
    assert out.value[0] == pytest.approx(math.tanh(0.75), abs=1e-15)


def test_compose_and_score_reject_dimension_mismatch():
    p = small_params(dim=3)
    with pytest.raises(ValueError):
        dc.compose(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(2)), p)
    with pytest.raises(ValueError):
        dc.score(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(2)), p)


def test_score_identity_and_zero():
    p = small_params(dim=3)
    p["score_S"].value[:] = np.eye(3)
    e1 = dc.Tensor(np.array([1.0, 0.0, 0.0]))
    assert dc.score(e1, e1, p).value == 1.0
    p["score_S"].value[:] = 0.0
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert dc.score(dc.Tensor(rng.normal(size=3)), dc.Tensor(rng.normal(size=3)), p).value == 0.0


def _input_grad_check(fn, x, eps=1e-5):
    t = dc.Tensor(x.copy(), requires_grad=True)
    fn(t).backward()
    analytic = t.grad.copy()
    flat = x.reshape(-1)
    numeric = np.zeros_like(flat)
    for c in range(flat.size):
        orig = flat[c]
        flat[c] = orig + eps
        fp = float(fn(dc.Tensor(x)).value)
        flat[c] = orig - eps
        fm = float(fn(dc.Tensor(x)).value)
        flat[c] = orig
        numeric[c] = (fp - fm) / (2 * eps)
    return np.max(np.abs(analytic.reshape(-1) - numeric) / np.maximum(np.maximum(np.abs(numeric), np.abs(analytic.reshape(-1))), 1e-6))


def test_compose_input_gradient_matches_finite_differences():
    p = small_params(dim=4)
    right = dc.Tensor(np.random.default_rng(2).normal(size=4))
    left = np.random.default_rng(3).normal(size=4)
    err = _input_grad_check(lambda t: dc.tsum(dc.compose(t, right, p)), left)
    assert err < 1e-6


def test_score_input_gradient_matches_finite_differences():
    p = small_params(dim=4)
    right = dc.Tensor(np.random.default_rng(4).normal(size=4))
    left = np.random.default_rng(5).normal(size=4)
    assert _input_grad_check(lambda t: dc.score(t, right, p), left) < 1e-6


def test_softmax_examples():
    assert np.allclose(dc.softmax_values(np.array([0.0, 0.0])), [0.5, 0.5], atol=0)
    assert np.allclose(dc.softmax_values(np.array([1000.0, 1000.0])), [0.5, 0.5], atol=0)
    out = dc.softmax_values(np.array([math.log(1.0), math.log(3.0)]))
    assert out == pytest.approx([0.25, 0.75], abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12),
    st.floats(-1e3, 1e3, allow_nan=False),
)
def test_softmax_normalized_and_shift_invariant(xs, c):
    x = np.array(xs)
    p = dc.softmax_values(x)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(dc.softmax_values(x + c), p, atol=1e-12, rtol=0)


@pytest.mark.parametrize(
    "op",
    [
        lambda t: dc.tsum(dc.tanh(t)),
        lambda t: dc.tsum(dc.mul(dc.softmax(t, axis=-1), np.arange(12.0).reshape(3, 4))),
        lambda t: dc.tsum(dc.mul(dc.log_softmax(t, axis=-1), np.arange(12.0).reshape(3, 4))),
        lambda t: dc.tsum(dc.pick(dc.log_softmax(t, axis=-1), np.array([0, 3, 1]))),
        lambda t: dc.tsum(dc.mul(dc.take(t, np.array([[0, 2], [2, 2]]), axis=0), 1.7)),
        lambda t: dc.tsum(dc.mul(dc.concat([t, dc.tanh(t)], axis=1), 0.3)),
        lambda t: dc.tsum(dc.weighted_sum(dc.softmax(dc.index(t, (slice(None), slice(0, 2))), axis=-1), dc.broadcast_to(dc.index(t, (slice(None), slice(0, 2), None)), (3, 2, 5)))),
        lambda t: dc.tsum(dc.mul(dc.matmul(t, np.arange(8.0).reshape(4, 2) / 7), dc.tanh(dc.index(t, (slice(None), slice(0, 2)))))),
    ],
)
def test_ops_pass_gradient_check(op):
    x = np.random.default_rng(7).normal(size=(3, 4))
    assert _input_grad_check(op, x) < 1e-4


def test_bilinear_gradient_wrt_matrix():
    rng = np.random.default_rng(8)
    left = dc.Tensor(rng.normal(size=(2, 3, 4)))
    right = dc.Tensor(rng.normal(size=(2, 3, 4)))
    m = rng.normal(size=(4, 4))
    assert _input_grad_check(lambda t: dc.tsum(dc.tanh(dc.bilinear(left, t, right))), m) < 1e-4


def test_nan_trips_error():
    with pytest.raises(dc.NumericalError):
        dc.tanh(dc.Tensor(np.array([np.nan])))
    with pytest.raises(dc.NumericalError), np.errstate(over="ignore"):
        dc.mul(dc.Tensor(np.array([1e308])), 1e10)


def test_grad_check_quadratic_and_constant():
    theta = {"x": dc.Tensor(np.array([3.0]), requires_grad=True)}
    rep = dc.grad_check(lambda p: dc.tsum(dc.mul(p["x"], p["x"])), theta)
    assert rep.passed(1e-6)
    theta["x"].value[:] = 3.0
    dc.mul(theta["x"], theta["x"]).backward()
    assert theta["x"].grad[0] == 6.0
    theta["x"].grad = None
    const = dc.grad_check(lambda p: dc.tsum(dc.add(dc.mul(p["x"], 0.0), 5.0)), theta)
    assert const.max_rel_error == 0.0


def test_gradient_accumulation_is_additive():
    x = dc.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    y = dc.tanh(x)
    dc.tsum(dc.add(y, y)).backward()
    assert np.allclose(x.grad, 2 * (1 - np.tanh(x.value) ** 2), atol=1e-15)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = small_params(dim=5, vocab=9, seed=3)
    path = tmp_path / "m.npz"
    dc.save_checkpoint(path, p.arrays(), {"config_hash": "abc", "note": [1, 2]})
    arrays, meta = dc.load_checkpoint(path)
    assert meta["config_hash"] == "abc" and meta["format_version"] == dc.CHECKPOINT_VERSION
    for name, v in p.arrays().items():
        assert arrays[name].tobytes() == v.tobytes()


def test_init_is_seeded_uniform_with_zero_bias():
    a, b = small_params(seed=11, scale=0.1), small_params(seed=11, scale=0.1)
    for name in dc.PARAM_NAMES:
        assert np.array_equal(a[name].value, b[name].value)
    assert np.all(a["compose_b"].value == 0)
    assert np.all(np.abs(a["embed"].value) <= 0.1)


def test_config_hash_is_order_independent():
    assert dc.config_hash({"a": 1, "b": 2}) == dc.config_hash({"b": 2, "a": 1})
    assert dc.config_hash({"a": 1}) != dc.config_hash({"a": 2})
