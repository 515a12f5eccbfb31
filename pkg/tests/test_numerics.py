import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hetprompt import numerics as nx

SEEDS = st.integers(0, 2**32 - 1)


def _fd_grad(f, x, h=1e-5, points=3):
    """Central differences; ``points=5`` uses the fourth-order stencil."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        def at(step):
            xs = x.copy()
            xs[idx] += step
            return f(xs)
        if points == 5:
            g[idx] = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h)
        else:
            g[idx] = (at(h) - at(-h)) / (2 * h)
    return g


def check_primitive(op, shapes, seed, away_from_zero=False, tol=1e-6, h=1e-3, points=5):
    """Analytic vs central-difference gradient of sum(R * op(*inputs))."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if away_from_zero:
        # keep every entry further than 2h from the kink at 0
        xs = [np.where(np.abs(x) < 0.05, np.where(x < 0, -0.05, 0.05), x) for x in xs]
    out_shape = op(nx.Tape(enabled=False), *[nx.Tape(enabled=False).constant(x) for x in xs]).shape
    R = rng.normal(size=out_shape)

    def value(arrays):
        t = nx.Tape(enabled=False)
        return float(np.sum(R * op(t, *[t.constant(a) for a in arrays]).value))

    params = [nx.Param(x, f"x{k}") for k, x in enumerate(xs)]
    tape = nx.Tape()
    out = op(tape, *[tape.watch(p) for p in params])
    tape.backward(nx.reduce_sum(out * tape.constant(R)))
    for k, p in enumerate(params):
        def f(xk, k=k):
            arrays = list(xs)
            arrays[k] = xk
            return value(arrays)
        fd = _fd_grad(f, xs[k], h, points)
        err = nx.relative_error(p.grad, fd)
        # entries where both are tiny are dominated by roundoff
        err = np.where(np.maximum(np.abs(p.grad), np.abs(fd)) < 1e-7, 0.0, err)
        assert err.max() < tol, (k, err.max())


SEG = np.array([0, 2, 2, 1, 0])
CSR = sp.csr_matrix(np.array([[1.0, 0, 2], [0, 0, 0], [0.5, 1, 0]]))

PRIMITIVES = {
    "matmul": (lambda t, a, b: nx.matmul(a, b), [(3, 5), (5, 4)], False),
    "add": (lambda t, a, b: a + b, [(3, 5), (3, 5)], False),
    "add_broadcast": (lambda t, a, b: a + b, [(3, 5), (1, 5)], False),
    "sub": (lambda t, a, b: a - b, [(3, 5), (3, 5)], False),
    "scale": (lambda t, a: nx.scale(a, -2.5), [(3, 5)], False),
    "elementwise_mul": (lambda t, a, b: a * b, [(3, 5), (3, 5)], False),
    "mul_column_broadcast": (lambda t, a, b: a * b, [(3, 5), (3, 1)], False),
    "transpose": (lambda t, a: a.T, [(3, 5)], False),
    "concat_cols": (lambda t, a, b: nx.concat_cols(a, b), [(3, 5), (3, 2)], False),
    "concat_rows": (lambda t, a, b: nx.concat_rows(a, b), [(3, 5), (2, 5)], False),
    "slice_cols": (lambda t, a: nx.slice_cols(a, 1, 4), [(3, 5)], False),
    "slice_rows": (lambda t, a: nx.slice_rows(a, 1, 3), [(3, 5)], False),
    "row_softmax": (lambda t, a: nx.row_softmax(a), [(3, 5)], False),
    "row_log_softmax": (lambda t, a: nx.row_log_softmax(a), [(3, 5)], False),
    "leaky_relu": (lambda t, a: nx.leaky_relu(a), [(3, 5)], True),
    "tanh": (lambda t, a: nx.tanh(a), [(3, 5)], False),
    "reduce_mean_rows": (lambda t, a: nx.reduce_mean_rows(a), [(3, 5)], False),
    "reduce_sum": (lambda t, a: nx.reduce_sum(a), [(3, 5)], False),
    "l2_normalize_rows": (lambda t, a: nx.l2_normalize_rows(a), [(3, 5)], False),
    "frobenius_norm_sq": (lambda t, a: nx.frobenius_norm_sq(a), [(3, 5)], False),
    "pick": (lambda t, a: nx.pick(a, [4, 0, 2]), [(3, 5)], False),
    "gather_rows": (lambda t, a: nx.gather_rows(a, [2, 0, 2, 1]), [(3, 5)], False),
    "segment_sum": (lambda t, a: nx.segment_sum(a, SEG, 3), [(5, 3)], False),
    "segment_softmax": (lambda t, a: nx.segment_softmax(a, SEG, 3), [(5, 1)], False),
    "edge_weighted_sum": (lambda t, w, a: nx.edge_weighted_sum(w, a, nx.Segments(SEG, 3), [1, 0, 2, 2, 0]),
                          [(5, 1), (3, 5)], False),
    "sparse_matmul": (lambda t, a: nx.sparse_matmul(CSR, a), [(3, 5)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=15, deadline=None)
@given(seed=SEEDS)
def test_primitive_gradient_matches_central_differences(name, seed):
    op, shapes, kink = PRIMITIVES[name]
    check_primitive(op, shapes, seed, away_from_zero=kink)


@settings(max_examples=25, deadline=None)
@given(seed=SEEDS)
def test_composed_graph_of_primitives_3x3(seed):
    def op(t, a, b, c):
        return nx.row_softmax(nx.tanh(a @ b) * c) + nx.l2_normalize_rows(a - c)
    check_primitive(op, [(3, 3)] * 3, seed, h=1e-5, points=3)


def test_row_softmax_of_zeros_is_half():
    t = nx.Tape(enabled=False)
    np.testing.assert_array_equal(nx.row_softmax(t.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])


def test_identity_matmul():
    t = nx.Tape(enabled=False)
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal((t.constant(np.eye(3)) @ t.constant(x)).value, x)


def test_leaky_relu_value_and_slope():
    p = nx.Param([[-1.0]])
    t = nx.Tape()
    y = nx.leaky_relu(t.watch(p))
    assert y.value[0, 0] == pytest.approx(-0.01)
    t.backward(y)
    assert p.grad[0, 0] == pytest.approx(0.01)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-700, 700)))
def test_row_softmax_rows_sum_to_one_and_positive(x):
    s = nx.row_softmax(nx.Tape(enabled=False).constant(x)).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert (s > 0).all() or np.ptp(x, axis=1).max() > 700


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_rows_unit_or_flagged_zero(x):
    y = nx.l2_normalize_rows(nx.Tape(enabled=False).constant(x)).value
    norms = np.linalg.norm(y, axis=1)
    zero = nx.zero_rows(x)
    np.testing.assert_array_equal(zero, np.flatnonzero(~x.any(axis=1)))
    live = np.setdiff1d(np.arange(x.shape[0]), zero)
    np.testing.assert_allclose(norms[live], 1.0, atol=1e-12)
    np.testing.assert_array_equal(y[zero], 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=SEEDS)
def test_tape_replay_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 3))

    def run():
        p, q = nx.Param(a), nx.Param(b)
        t = nx.Tape()
        out = nx.reduce_sum(nx.row_softmax(nx.leaky_relu(t.watch(p) @ t.watch(q))) * 3.0)
        t.backward(out)
        return out.value.copy(), p.grad.copy(), q.grad.copy()

    for x, y in zip(run(), run()):
        assert x.tobytes() == y.tobytes()


def test_linear_map_gradient_is_broadcast_of_x():
    x = np.array([[1.0], [2.0], [-3.0]])
    W = nx.Param(np.ones((2, 3)))
    t = nx.Tape()
    t.backward(nx.reduce_sum(t.watch(W) @ t.constant(x)))
    np.testing.assert_array_equal(W.grad, np.tile(x.T, (2, 1)))


def test_frobenius_gradient_is_2q():
    Q = nx.Param(np.random.default_rng(0).normal(size=(3, 4)))
    t = nx.Tape()
    t.backward(nx.frobenius_norm_sq(t.watch(Q)))
    np.testing.assert_allclose(Q.grad, 2 * Q.value, rtol=0, atol=1e-15)


def test_backward_on_non_scalar_is_contract_error():
    p = nx.Param(np.ones((2, 2)))
    t = nx.Tape()
    with pytest.raises(nx.ContractError):
        t.backward(t.watch(p) * 2.0)


def test_non_trainable_params_untouched():
    p = nx.Param(np.ones((2, 2)), trainable=False)
    q = nx.Param(np.ones((2, 2)))
    t = nx.Tape()
    t.backward(nx.reduce_sum(t.watch(p) * t.watch(q)))
    np.testing.assert_array_equal(p.grad, 0.0)
    np.testing.assert_array_equal(q.grad, 1.0)


def test_shape_mismatch_names_both_shapes():
    t = nx.Tape(enabled=False)
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


def test_non_finite_output_is_numeric_error():
    t = nx.Tape(enabled=False)
    with pytest.raises(nx.NumericError):
        t.constant([[1e308]]) * t.constant([[1e308]])


def test_finite_diff_check_quadratic():
    W = nx.Param(np.random.default_rng(1).normal(size=(3, 4)), "W")
    report = nx.finite_diff_check(lambda t: nx.scale(nx.frobenius_norm_sq(t.watch(W)), 0.5), [W])
    assert report["W"] < 1e-9 and report["__ok__"]


def test_constant_loss_has_zero_gradient():
    W = nx.Param(np.ones((2, 2)), "W")
    t = nx.Tape()
    out = nx.reduce_sum(t.watch(W) * 0.0) + t.constant([[3.0]])
    t.backward(out)
    assert np.abs(W.grad).max() <= 1e-10
    report = nx.finite_diff_check(lambda t: nx.reduce_sum(t.watch(W) * 0.0) + t.constant([[3.0]]), [W])
    assert report["W"] <= 1e-10


def test_adam_first_step_is_minus_lr_sign():
    g = np.array([[0.3, -2.0, 1e-3]])
    out = nx.adam_step([np.zeros((1, 3))], [g], {}, lr=0.01)[0]
    np.testing.assert_allclose(out, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_grad_leaves_params():
    p = np.array([[1.0, 2.0]])
    out = nx.adam_step([p], [np.zeros_like(p)], {}, lr=0.1)[0]
    np.testing.assert_array_equal(out, p)


def test_adam_quadratic_scalar_simulation():
    # independent oracle: plain-float simulation of the bias-corrected update
    w, m, v = 1.0, 0.0, 0.0
    state, arr = {}, np.array([[1.0]])
    for t in range(1, 101):
        g = 2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        arr = nx.adam_step([arr], [2 * arr], state, lr=0.1)[0]
    assert arr[0, 0] == pytest.approx(w, abs=1e-12)
    assert abs(arr[0, 0]) < 0.1


def test_adam_class_matches_functional():
    rng = np.random.default_rng(2)
    p = nx.Param(rng.normal(size=(2, 3)))
    arr, state = p.value.copy(), {}
    opt = nx.Adam([p], lr=0.01)
    for _ in range(5):
        g = rng.normal(size=(2, 3))
        p.grad = g
        opt.step()
        arr = nx.adam_step([arr], [g], state, lr=0.01)[0]
    np.testing.assert_allclose(p.value, arr, rtol=0, atol=1e-15)


def test_adam_rejects_non_finite_grad():
    with pytest.raises(nx.NumericError):
        nx.adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], {}, lr=0.1)
    p = nx.Param(np.zeros((1, 2)))
    p.grad = np.array([[np.inf, 0.0]])
    with pytest.raises(nx.NumericError):
        nx.Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.value, 0.0)


def test_adam_state_shape_mismatch():
    state = {}
    nx.adam_step([np.zeros((1, 2))], [np.ones((1, 2))], state, lr=0.1)
    with pytest.raises(nx.DimensionError):
        nx.adam_step([np.zeros((2, 2))], [np.ones((2, 2))], state, lr=0.1)


def test_tape_dump_lists_records():
    p = nx.Param(np.ones((2, 2)), "p")
    t = nx.Tape()
    nx.tanh(t.watch(p) @ t.watch(p))
    lines = t.dump().splitlines()
    assert [line.split("\t")[1] for line in lines] == ["matmul", "tanh"]


def test_segment_softmax_sums_per_segment():
    rng = np.random.default_rng(3)
    ids = rng.integers(0, 7, size=40)
    s = nx.segment_softmax(nx.Tape(enabled=False).constant(rng.normal(size=(40, 1)) * 50), ids, 7).value[:, 0]
    sums = np.bincount(ids, weights=s, minlength=7)
    np.testing.assert_allclose(sums[np.unique(ids)], 1.0, atol=1e-12)
