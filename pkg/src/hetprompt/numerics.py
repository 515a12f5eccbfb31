"""Dense 2-D reverse-mode differentiation on top of numpy.

A :class:`Tape` records every primitive applied to :class:`Var` values.
Calling :meth:`Tape.backward` on a scalar walks the records in reverse and
accumulates vector-Jacobian products into the ``grad`` of every trainable
:class:`Param` that was watched on the tape.

All values are float64 matrices of shape ``(rows, cols)``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    # a NaN or inf anywhere makes the sum non-finite
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"{name} produced non-finite values")
    return arr


class Param:
    """A named matrix with a gradient buffer."""

    def __init__(self, value, name: str = "", trainable: bool = True):
        self.value = _check_finite(name or "param", _as_matrix(value))
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Param({self.name!r}, shape={self.shape}{flag})"


class Var:
    __slots__ = ("tape", "value", "requires_grad", "param", "_grad")

    def __init__(self, tape: "Tape", value: np.ndarray, requires_grad: bool, param=None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.param = param
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    With ``enabled=False`` no records are kept and nothing requires a
    gradient; useful for evaluation passes.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records = []
        self.params = []

    def constant(self, value) -> Var:
        return Var(self, _as_matrix(value), False)

    def watch(self, param: Param) -> Var:
        needs = self.enabled and param.trainable
        if needs:
            self.params.append(param)
        return Var(self, param.value, needs, param)

    def record(self, name, out: np.ndarray, inputs, backward_fn) -> Var:
        _check_finite(name, out)
        needs = self.enabled and any(v.requires_grad for v in inputs)
        var = Var(self, out, needs)
        if needs:
            self.records.append((name, var, inputs, backward_fn))
        return var

    def backward(self, output: Var):
        if output.shape != (1, 1):
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        if output.tape is not self:
            raise ContractError("output was recorded on a different tape")
        if not output.requires_grad:
            return
        for _, var, inputs, _ in self.records:
            var._grad = None
            for inp in inputs:
                inp._grad = None
        output._grad = np.ones((1, 1))
        for name, var, inputs, fn in reversed(self.records):
            g = var._grad
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(f"{name}: gradient shape {gi.shape} != input shape {inp.shape}")
                inp._grad = gi if inp._grad is None else inp._grad + gi
        seen = set()
        for _, _, inputs, _ in self.records:
            for inp in inputs:
                # a param watched several times gets the sum over its watches
                if inp.param is not None and inp._grad is not None and id(inp) not in seen:
                    seen.add(id(inp))
                    inp.param.grad = inp.param.grad + inp._grad

    def dump(self) -> str:
        lines = []
        for k, (name, var, inputs, _) in enumerate(self.records):
            shapes = ", ".join(str(v.shape) for v in inputs)
            lines.append(f"{k}\t{name}\t({shapes}) -> {var.shape}")
        return "\n".join(lines)


def _pair(a, b):
    if isinstance(a, Var):
        tape = a.tape
    elif isinstance(b, Var):
        tape = b.tape
    else:
        raise TypeError("at least one operand must be a Var")
    if not isinstance(a, Var):
        a = tape.constant(a)
    if not isinstance(b, Var):
        b = tape.constant(b)
    return tape, a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def matmul(a: Var, b: Var) -> Var:
    tape, a, b = _pair(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)
    return tape.record("matmul", av @ bv, (a, b), back)


def add(a, b) -> Var:
    tape, a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)
    return tape.record("add", a.value + b.value, (a, b), back)


def sub(a, b) -> Var:
    tape, a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)
    return tape.record("sub", a.value - b.value, (a, b), back)


def scale(a: Var, c: float) -> Var:
    def back(g):
        return (g * c,)
    return a.tape.record("scale", a.value * c, (a,), back)


def elementwise_mul(a, b) -> Var:
    tape, a, b = _pair(a, b)
    _broadcast_shape("elementwise_mul", a, b)
    av, bv = a.value, b.value

    def back(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)
    return tape.record("elementwise_mul", av * bv, (a, b), back)


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(*xs: Var) -> Var:
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[x.shape for x in xs]}")
    widths = np.cumsum([0] + [x.shape[1] for x in xs])

    def back(g):
        return tuple(g[:, widths[k]:widths[k + 1]] for k in range(len(xs)))
    return xs[0].tape.record("concat_cols", np.hstack([x.value for x in xs]), xs, back)


def concat_rows(*xs: Var) -> Var:
    cols = {x.shape[1] for x in xs}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[x.shape for x in xs]}")
    heights = np.cumsum([0] + [x.shape[0] for x in xs])

    def back(g):
        return tuple(g[heights[k]:heights[k + 1]] for k in range(len(xs)))
    return xs[0].tape.record("concat_rows", np.vstack([x.value for x in xs]), xs, back)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    n, c = a.shape

    def back(g):
        full = np.zeros((n, c))
        full[:, start:stop] = g
        return (full,)
    return a.tape.record("slice_cols", a.value[:, start:stop].copy(), (a,), back)


def slice_rows(a: Var, start: int, stop: int) -> Var:
    n, c = a.shape

    def back(g):
        full = np.zeros((n, c))
        full[start:stop] = g
        return (full,)
    return a.tape.record("slice_rows", a.value[start:stop].copy(), (a,), back)


def row_softmax(a: Var) -> Var:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    return a.tape.record("row_softmax", s, (a,), back)


def row_log_softmax(a: Var) -> Var:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    tot = e.sum(axis=1, keepdims=True)
    out = z - np.log(tot)
    s = e / tot

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)
    return a.tape.record("row_log_softmax", out, (a,), back)


def leaky_relu(a: Var, slope: float = LEAKY_SLOPE) -> Var:
    d = np.where(a.value > 0, 1.0, slope)

    def back(g):
        return (g * d,)
    return a.tape.record("leaky_relu", a.value * d, (a,), back)


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)

    def back(g):
        return (g * (1.0 - t * t),)
    return a.tape.record("tanh", t, (a,), back)


def reduce_mean_rows(a: Var) -> Var:
    n = a.shape[0]

    def back(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return a.tape.record("reduce_mean_rows", a.value.mean(axis=0, keepdims=True), (a,), back)


def reduce_sum(a: Var) -> Var:
    def back(g):
        return (np.full(a.shape, g[0, 0]),)
    return a.tape.record("reduce_sum", np.array([[a.value.sum()]]), (a,), back)


def l2_normalize_rows(a: Var) -> Var:
    """Rows scaled to unit norm; all-zero rows stay zero (see ``zero_rows``)."""
    # scale by the row max first so tiny entries do not underflow when squared
    peak = np.abs(a.value).max(axis=1, keepdims=True)
    peak_safe = np.where(peak > 0, peak, 1.0)
    norms = peak * np.sqrt(((a.value / peak_safe) ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    y = a.value / safe
    live = norms > 0

    def back(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * proj) / safe, 0.0),)
    return a.tape.record("l2_normalize_rows", y, (a,), back)


def zero_rows(a) -> np.ndarray:
    value = a.value if isinstance(a, Var) else np.asarray(a)
    return np.flatnonzero(~np.any(value != 0, axis=1))


def frobenius_norm_sq(a: Var) -> Var:
    av = a.value

    def back(g):
        return (2.0 * g[0, 0] * av,)
    return a.tape.record("frobenius_norm_sq", np.array([[np.sum(av * av)]]), (a,), back)


def pick(a: Var, cols) -> Var:
    """Entry ``a[i, cols[i]]`` for each row, as a column vector."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    if cols.shape != (a.shape[0],):
        raise DimensionError(f"pick: need {a.shape[0]} column indices, got {cols.shape}")

    def back(g):
        full = np.zeros(a.shape)
        full[rows, cols] = g[:, 0]
        return (full,)
    return a.tape.record("pick", a.value[rows, cols].reshape(-1, 1), (a,), back)


# ------------------------------------------------------------ graph helpers

class Segments:
    """Bucket assignment of rows, with cached sparse indicator and sort order.

    Build once per fixed index array and pass it to the segment primitives
    instead of the raw ids to avoid recomputing the helpers every call.
    """

    def __init__(self, ids, n_segments: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.n = int(n_segments)
        if self.ids.ndim != 1:
            raise DimensionError("segment ids must be one-dimensional")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.n):
            raise DimensionError(f"segment ids out of range for {self.n} segments")
        self._matrix = None
        self._sorted = None

    def __len__(self):
        return self.ids.size

    @property
    def matrix(self):
        if self._matrix is None:
            m = len(self.ids)
            self._matrix = sp.csr_matrix((np.ones(m), (self.ids, np.arange(m))), shape=(self.n, m))
        return self._matrix

    def sum(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] == 1:
            return np.bincount(self.ids, weights=x[:, 0], minlength=self.n).reshape(-1, 1)
        return np.asarray(self.matrix @ x)

    def max1(self, v: np.ndarray) -> np.ndarray:
        if self._sorted is None:
            order = np.argsort(self.ids, kind="stable")
            ids = self.ids[order]
            starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]]) if ids.size else np.zeros(0, np.int64)
            self._sorted = (order, ids, starts)
        order, ids, starts = self._sorted
        out = np.full(self.n, -np.inf)
        if ids.size:
            out[ids[starts]] = np.maximum.reduceat(v[order], starts)
        return out


def _segments(seg, n_segments=None) -> Segments:
    if isinstance(seg, Segments):
        if n_segments is not None and n_segments != seg.n:
            raise DimensionError(f"segments cover {seg.n} buckets, expected {n_segments}")
        return seg
    return Segments(seg, n_segments)


def gather_rows(a: Var, idx) -> Var:
    """Rows ``a[idx]``; ``idx`` may be a :class:`Segments` over ``a``'s rows."""
    seg = idx if isinstance(idx, Segments) else None
    idx = seg.ids if seg is not None else np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if seg is not None and seg.n != n:
        raise DimensionError(f"gather_rows: segments cover {seg.n} rows, input has {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")

    def back(g):
        s = seg if seg is not None else Segments(idx, n)
        return (s.sum(g),)
    return a.tape.record("gather_rows", a.value[idx], (a,), back)


def segment_sum(a: Var, seg, n_segments: int = None) -> Var:
    """Sum rows of ``a`` into buckets given by ``seg``."""
    seg = _segments(seg, n_segments)
    if len(seg) != a.shape[0]:
        raise DimensionError(f"segment_sum: {a.shape[0]} rows but {len(seg)} segment ids")
    ids = seg.ids

    def back(g):
        return (g[ids],)
    return a.tape.record("segment_sum", seg.sum(a.value), (a,), back)


def segment_softmax(a: Var, seg, n_segments: int = None) -> Var:
    """Softmax of a column vector within each segment."""
    seg = _segments(seg, n_segments)
    if a.shape[1] != 1 or len(seg) != a.shape[0]:
        raise DimensionError(f"segment_softmax: needs a column of {len(seg)} scores, got {a.shape}")
    ids = seg.ids
    v = a.value[:, 0]
    e = np.exp(v - seg.max1(v)[ids])
    den = np.bincount(ids, weights=e, minlength=seg.n)
    s = (e / den[ids]).reshape(-1, 1)

    def back(g):
        tot = np.bincount(ids, weights=(g * s)[:, 0], minlength=seg.n)
        return (s * (g - tot[ids].reshape(-1, 1)),)
    return a.tape.record("segment_softmax", s, (a,), back)


def edge_weighted_sum(weights: Var, a: Var, dst: Segments, src) -> Var:
    """out[i] = sum over edges e with dst[e] = i of weights[e] * a[src[e]].

    Equivalent to ``segment_sum(gather_rows(a, src) * weights, dst)`` without
    materializing the gathered rows in the forward pass.
    """
    src = src.ids if isinstance(src, Segments) else np.asarray(src, dtype=np.int64)
    if weights.shape != (len(dst), 1) or src.shape != (len(dst),):
        raise DimensionError(f"edge_weighted_sum: {weights.shape} weights for {len(dst)} edges")
    if src.size and src.max() >= a.shape[0]:
        raise DimensionError(f"edge_weighted_sum: source index out of range for {a.shape[0]} rows")
    w = weights.value[:, 0]
    m = sp.csr_matrix((w, (dst.ids, src)), shape=(dst.n, a.shape[0]))
    av = a.value
    ids = dst.ids

    def back(g):
        gw = None
        if weights.requires_grad:
            gw = np.einsum("ij,ij->i", g[ids], av[src]).reshape(-1, 1)
        return gw, (np.asarray(m.T @ g) if a.requires_grad else None)
    return a.tape.record("edge_weighted_sum", np.asarray(m @ av), (weights, a), back)


def sparse_matmul(matrix, a: Var) -> Var:
    """Product of a fixed scipy sparse (or dense) matrix with ``a``."""
    if matrix.shape[1] != a.shape[0]:
        raise DimensionError(f"sparse_matmul: {matrix.shape} @ {a.shape}")
    mt = matrix.T

    def back(g):
        return (np.asarray(mt @ g),)
    return a.tape.record("sparse_matmul", np.asarray(matrix @ a.value), (a,), back)


# ------------------------------------------------------------- optimization

class Adam:
    """Adam with bias correction over a fixed list of params."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for {p.name or 'param'}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update of raw arrays.

    ``state`` is a dict holding ``t``, ``m`` and ``v``; it is created on the
    first call when empty. Returns the list of updated arrays.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(g) for g in grads]
        state["v"] = [np.zeros_like(g) for g in grads]
    for m, g in zip(state["m"], grads):
        if m.shape != g.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} != gradient shape {g.shape}")
    state["t"] += 1
    t = state["t"]
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * g
        state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * g * g
        mhat = state["m"][k] / (1 - beta1 ** t)
        vhat = state["v"][k] / (1 - beta2 ** t)
        out.append(np.asarray(p, dtype=np.float64) - lr * mhat / (np.sqrt(vhat) + eps))
    return out


# ------------------------------------------------------------ gradient check

def relative_error(a, f):
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def finite_diff_check(loss_fn, params, h: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None, seed: int = 0):
    """Compare tape gradients with central differences.

    ``loss_fn(tape)`` must build the loss on the given tape from the params
    and return the scalar Var. Returns ``{param name: max relative error}``
    plus an ``ok`` flag under the key ``"__ok__"``. With ``max_entries`` only
    a random subset of entries per param is probed.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = loss_fn(tape)
    tape.backward(out)
    rng = np.random.default_rng(seed)

    def value():
        return float(loss_fn(Tape(enabled=False)).value[0, 0])

    report = {}
    for k, p in enumerate(params):
        analytic = p.grad.copy()
        flat = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
        worst = 0.0
        for idx in flat:
            pos = np.unravel_index(idx, p.shape)
            orig = p.value[pos]
            p.value = p.value.copy()
            p.value[pos] = orig + h
            up = value()
            p.value[pos] = orig - h
            down = value()
            p.value[pos] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(analytic[pos], fd)))
        report[p.name or f"param{k}"] = worst
    report["__ok__"] = all(v < tol for key, v in report.items() if key != "__ok__")
    return report
