import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meetalign import diffcore as dc
from meetalign.diffcore import Parameter, SeededRng, Tape, Tensor

from conftest import max_rel_err


def _check(build, shapes, seed=0, tol=1e-6):
    rng = SeededRng(seed, "fd")
    params = [Parameter(f"p{i}", rng.normal(s)) for i, s in enumerate(shapes)]

    def loss():
        out = build(*params)
        weights = Tensor(SeededRng(99, "w").normal(out.shape))
        return dc.total(dc.mul(out, weights))

    _, grads = dc.value_and_grad(loss, params)
    fd = dc.finite_diff_gradient(lambda: loss().item(), params)
    for p in params:
        assert max_rel_err(grads[p.name], fd[p.name]) < tol, p.name


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda a, b: dc.matmul(a, b), [(3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: dc.matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("matmul_3d", lambda a, b: dc.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    ("add_broadcast", lambda a, b: dc.add(a, b), [(3, 4), (4,)]),
    ("mul", lambda a, b: dc.mul(a, b), [(3, 4), (3, 4)]),
    ("scale", lambda a: dc.scale(a, -2.5), [(3,)]),
    ("reshape", lambda a: dc.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: dc.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("slice", lambda a: dc.take_rows(a, 1, 3, axis=1), [(2, 4, 3)]),
    ("layer_norm", lambda x, g, b: dc.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
    ("gelu", lambda a: dc.gelu(a), [(4, 3)]),
    ("softmax", lambda a: dc.softmax(a), [(3, 6)]),
    ("log_softmax", lambda a: dc.log_softmax(a), [(3, 6)]),
    ("gather", lambda a: dc.gather(a, np.array([0, 5, 2])), [(3, 6)]),
    ("concatenate", lambda a, b: dc.concatenate([a, b], axis=1), [(2, 3), (2, 2)]),
    ("embedding", lambda t: dc.embedding(t, np.array([[1, 1], [0, 3]])), [(4, 3)]),
    ("causal_mask", lambda a: dc.softmax(dc.causal_mask_fill(a)), [(2, 4, 4)]),
])
def test_primitive_gradients_match_finite_differences(name, build, shapes):
    _check(build, shapes)


def test_layer_norm_hand_value():
    # mean 2.5, variance 1.25
    out = dc.layer_norm(Tensor([1.0, 2.0, 3.0, 4.0]), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    denom = math.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out, [-1.5 / denom, -0.5 / denom, 0.5 / denom, 1.5 / denom], rtol=0, atol=1e-15)


def test_gelu_tanh_form():
    x = np.array([-2.0, 0.0, 0.5, 3.0])
    expect = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(dc.gelu(Tensor(x)).data, expect, rtol=1e-14)


def test_causal_mask_blocks_future():
    s = dc.softmax(dc.causal_mask_fill(Tensor(np.zeros((3, 3))))).data
    np.testing.assert_allclose(s, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_log_softmax_stable_for_large_logits():
    out = dc.log_softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(out).all()
    assert out[0, 1] == pytest.approx(-1000.0)


def test_backward_requires_scalar():
    p = Parameter("p", np.ones(3))
    with Tape() as tape:
        y = dc.scale(p, 2.0)
    with pytest.raises(dc.ShapeError):
        dc.backward(tape, y, [p])


def test_unused_parameter_gets_zero_gradient():
    p, q = Parameter("p", np.ones(3)), Parameter("q", np.ones(2))
    _, g = dc.value_and_grad(lambda: dc.total(p), [p, q])
    np.testing.assert_array_equal(g["p"], np.ones(3))
    np.testing.assert_array_equal(g["q"], np.zeros(2))


def test_frozen_parameter_not_recorded():
    p = Parameter("p", np.ones(3), trainable=False)
    with Tape() as tape:
        dc.total(dc.mul(p, p))
    assert len(tape) == 0


def test_shared_input_gradients_accumulate():
    p = Parameter("p", np.array([3.0]))
    _, g = dc.value_and_grad(lambda: dc.total(dc.mul(p, p)), [p])
    assert g["p"][0] == 6.0


def test_shape_mismatch_is_rejected():
    with pytest.raises(dc.ShapeError):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError):
        dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_unknown_primitive():
    with pytest.raises(ValueError):
        dc.primitive_forward("conv", Tensor(1.0))
    assert dc.primitive_forward("scale", Tensor([2.0]), 3.0).data[0] == 6.0


def test_finite_diff_flags_nonfinite():
    p = Parameter("p", np.array([0.0, 1.0]))
    with pytest.raises(dc.NonFiniteGradient) as info:
        dc.finite_diff_gradient(lambda: float(np.log(p.data[0] + 1e-6)) if p.data[0] > 0 else float("nan"), [p])
    assert ("p", 0) in info.value.flagged


def test_finite_diff_coords_subset():
    p = Parameter("p", np.array([1.0, 2.0, 3.0]))
    g = dc.finite_diff_gradient(lambda: float((p.data ** 2).sum()), [p], coords={"p": [1]})
    assert np.isnan(g["p"][0]) and g["p"][1] == pytest.approx(4.0)


# ------------------------------------------------------------------ rng


def test_rng_is_reproducible_and_streams_differ():
    a, b = SeededRng(5, "x"), SeededRng(5, "x")
    np.testing.assert_array_equal(a.raw(8), b.raw(8))
    assert not np.array_equal(SeededRng(5, "x").raw(4), SeededRng(5, "y").raw(4))
    assert not np.array_equal(SeededRng(5, "x").raw(4), SeededRng(6, "x").raw(4))


def test_rng_frozen_values():
    # regression anchor for the seed -> stream mapping
    r = SeededRng(0, "anchor")
    first = r.raw(1)[0]
    assert first == SeededRng(0, "anchor").raw(1)[0]
    u = SeededRng(0, "anchor").uniform()
    assert u == (int(first) >> 11) / 2 ** 53


def test_normal_moments():
    z = SeededRng(1, "n").normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 40))
def test_permutation_is_a_permutation(seed, n):
    perm = SeededRng(seed, "p").permutation(n)
    assert sorted(perm.tolist()) == list(range(n))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(-5, 5), st.integers(1, 30))
def test_integers_in_range(seed, low, span):
    xs = SeededRng(seed, "i").integers(low, low + span, 20)
    assert xs.min() >= low and xs.max() < low + span


def test_categorical_respects_zero_mass():
    r = SeededRng(3, "c")
    draws = {r.categorical(np.array([0.0, 0.3, 0.0, 0.7])) for _ in range(200)}
    assert draws == {1, 3}
