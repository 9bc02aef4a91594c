import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jointpercept import numcore as nc

F64 = np.float64


def leaf(shape, seed=0, scale=1.0, positive=False):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, scale, shape)
    if positive:
        a = np.abs(a) + 0.5
    return nc.Tensor(a, requires_grad=True, dtype=F64)


def weighted_sum(out: nc.Tensor, seed=99) -> nc.Tensor:
    # random projection so every output element carries a distinct weight
    w = np.random.default_rng(seed).normal(size=out.shape)
    return nc.sum(nc.mul(out, nc.Tensor(w, dtype=F64)))


OPS = {
    "add": (lambda a, b: nc.add(a, b), [(3, 4), (3, 4)], {}),
    "sub": (lambda a, b: nc.sub(a, b), [(3, 4), (3, 4)], {}),
    "mul": (lambda a, b: nc.mul(a, b), [(3, 4), (3, 4)], {}),
    "scale": (lambda a: nc.scale(a, -2.5), [(5,)], {}),
    "add_n": (lambda a, b, c: nc.add_n([a, b, c]), [(2, 3)] * 3, {}),
    "exp": (lambda a: nc.exp(a), [(4, 3)], {}),
    "log": (lambda a: nc.log(a), [(4, 3)], {"positive": True}),
    "gelu": (lambda a: nc.gelu(a), [(6, 5)], {}),
    "reshape": (lambda a: nc.reshape(a, (2, 6)), [(3, 4)], {}),
    "transpose": (lambda a: nc.transpose(a, (2, 0, 1)), [(2, 3, 4)], {}),
    "broadcast_to": (lambda a: nc.broadcast_to(a, (3, 4, 5)), [(4, 1)], {}),
    "sum_axis": (lambda a: nc.sum(a, axis=1), [(3, 4)], {}),
    "sum_keepdims": (lambda a: nc.sum(a, axis=0, keepdims=True), [(3, 4)], {}),
    "mean": (lambda a: nc.mean(a, axis=-1), [(3, 4)], {}),
    "matmul": (lambda a, b: nc.matmul(a, b), [(3, 4), (4, 2)], {}),
    "matmul_batched": (lambda a, b: nc.matmul(a, b), [(2, 3, 4), (2, 4, 5)], {}),
    "take": (lambda a: nc.take(a, [0, 2, 2, 1]), [(3, 4)], {}),
    "getitem": (lambda a: nc.getitem(a, (slice(None), slice(1, 3))), [(3, 4)], {}),
    "concat": (lambda a, b: nc.concat([a, b], axis=1), [(2, 3), (2, 2)], {}),
    "place_rows": (lambda a, b: nc.place_rows(5, [(np.array([0, 3]), a), (np.array([4]), b)]),
                   [(2, 3), (1, 3)], {}),
    "layer_norm": (lambda x, g, b: nc.layer_norm(x, g, b), [(3, 6), (6,), (6,)], {}),
    "softmax": (lambda a: nc.softmax(a), [(3, 5)], {}),
    "masked_softmax": (lambda a: nc.masked_softmax(a, np.tril(np.ones((4, 4), bool))), [(4, 4)], {}),
    "log_softmax": (lambda a: nc.log_softmax(a), [(3, 5)], {}),
    "l2_normalize": (lambda a: nc.l2_normalize(a), [(3, 5)], {}),
    "cosine_sim": (lambda a, b: nc.cosine_sim(a, b), [(7,), (7,)], {}),
    "linear": (lambda x, w, b: nc.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)], {}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_central_differences(name):
    fn, shapes, kw = OPS[name]
    inputs = [leaf(s, seed=i, **kw) for i, s in enumerate(shapes)]
    rep = nc.grad_check(lambda: weighted_sum(fn(*inputs)), inputs, step=1e-6, tol=1e-4)
    assert rep.passed, (name, rep.per_input)


def test_softmax_of_equal_logits_is_uniform():
    p = nc.softmax(nc.Tensor([0.0, 0.0], dtype=F64))
    np.testing.assert_array_equal(p.data, [0.5, 0.5])


def test_layer_norm_of_constant_row_returns_bias():
    x = nc.Tensor(np.full((2, 4), 3.0), dtype=F64)
    g = nc.Tensor(np.arange(4.0) + 1, dtype=F64)
    b = nc.Tensor([0.1, -0.2, 0.3, 0.0], dtype=F64)
    np.testing.assert_allclose(nc.layer_norm(x, g, b).data, np.tile(b.data, (2, 1)), atol=1e-12)


def test_matmul_by_identity_is_exact():
    a = leaf((3, 3))
    out = nc.matmul(a, nc.Tensor(np.eye(3), dtype=F64))
    np.testing.assert_array_equal(out.data, a.data)


@pytest.mark.parametrize("u,v,expected", [
    ((1.0, 0.0), (0.0, 1.0), 0.0),
    ((1.0, 1.0), (2.0, 2.0), 1.0),
    ((1.0, 0.0), (-3.0, 0.0), -1.0),
    ((1.0, 0.0), (1.0, 1.0), 1 / math.sqrt(2)),
])
def test_cosine_examples(u, v, expected):
    out = nc.cosine_sim(nc.Tensor(u, dtype=F64), nc.Tensor(v, dtype=F64))
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_gelu_known_values():
    x = nc.Tensor([0.0, 1.0, -1.0], dtype=F64)
    # x * Phi(x) with Phi(1) = 0.8413447460685429
    np.testing.assert_allclose(nc.gelu(x).data, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)


def test_masked_entries_are_exactly_zero():
    mask = np.array([[True, False, True], [False, False, False]])
    p = nc.masked_softmax(nc.Tensor(np.ones((2, 3)) * 50, dtype=F64), mask).data
    assert p[0, 1] == 0.0
    np.testing.assert_array_equal(p[1], 0.0)
    assert p[0].sum() == pytest.approx(1.0)


def test_shape_mismatch_is_rejected_without_implicit_broadcast():
    with pytest.raises(nc.ShapeError):
        nc.add(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones(3)))
    with pytest.raises(nc.ShapeError):
        nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))
    with pytest.raises(nc.ShapeError):
        nc.reshape(nc.Tensor(np.ones(6)), (4, 2))


def test_non_finite_values_raise():
    with pytest.raises(nc.NumericError):
        nc.Tensor([1.0, np.nan])
    with pytest.raises(nc.NumericError):
        nc.log(nc.Tensor([0.0, 1.0]))
    with pytest.raises(nc.NumericError):
        nc.exp(nc.Tensor([1000.0], dtype=F64))
    with pytest.raises(nc.NumericError):
        nc.l2_normalize(nc.Tensor(np.zeros(3)))


def test_backward_needs_scalar():
    with pytest.raises(nc.UsageError):
        nc.backward(nc.scale(leaf((2,)), 1.0))


def test_unused_parameter_gets_zero_gradient():
    a, unused = leaf((3,)), leaf((3,), seed=1)
    with nc.fresh_tape():
        nc.backward(nc.sum(nc.mul(a, a)))
    np.testing.assert_array_equal(unused.grad, 0.0)
    np.testing.assert_allclose(a.grad, 2 * a.data)


def test_shared_input_accumulates_gradient():
    a = leaf((4,))
    with nc.fresh_tape():
        nc.backward(nc.sum(nc.add(a, nc.scale(a, 3.0))))
    np.testing.assert_array_equal(a.grad, 4.0)


def test_no_grad_records_nothing():
    a = leaf((3,))
    with nc.fresh_tape() as tape, nc.no_grad():
        nc.exp(a)
        assert len(tape) == 0


def test_default_dtype_is_float32_and_float64_is_kept():
    assert nc.Tensor([1.0, 2.0]).dtype == np.float32
    assert nc.Tensor(np.ones(2)).dtype == np.float64
    assert nc.exp(nc.Tensor([1.0], dtype=F64)).dtype == np.float64


def test_gradients_are_deterministic():
    def run():
        x, w = leaf((4, 6)), leaf((6, 3), seed=1)
        with nc.fresh_tape():
            nc.backward(nc.sum(nc.log_softmax(nc.matmul(x, w))))
        return x.grad.copy(), w.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)


def test_item_requires_single_element():
    with pytest.raises(nc.UsageError):
        nc.Tensor(np.ones(2)).item()


finite_rows = hnp.arrays(F64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                         elements=st.floats(-20, 20, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-50, 50))
def test_softmax_sums_to_one_and_ignores_shifts(x, c):
    p = nc.softmax(nc.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    q = nc.softmax(nc.Tensor(x + c)).data
    np.testing.assert_allclose(p, q, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_layer_norm_output_is_standardised(x):
    x = x + np.linspace(0, 1, x.shape[-1])  # avoid exactly constant rows
    d = x.shape[-1]
    y = nc.layer_norm(nc.Tensor(x), nc.Tensor(np.ones(d)), nc.Tensor(np.zeros(d))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + nc.LN_EPS), rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(finite_rows, st.floats(0.01, 100))
def test_l2_normalize_is_scale_invariant(x, c):
    x = x + 0.5  # keep rows away from zero
    u = nc.l2_normalize(nc.Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(u, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nc.l2_normalize(nc.Tensor(x * c)).data, u, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_broadcast_gradient_sums_expanded_axes(b, m, n):
    a = nc.Tensor(np.ones((m, 1)), requires_grad=True, dtype=F64)
    with nc.fresh_tape():
        nc.backward(nc.sum(nc.broadcast_to(a, (b, m, n))))
    np.testing.assert_array_equal(a.grad, np.full((m, 1), b * n))
