"""Small reverse-mode differentiation core on top of numpy.

Tensors wrap numpy arrays. Operations executed while a :class:`Tape` is
active are recorded on it, and :meth:`Tape.backward` replays them in reverse
to accumulate gradients into leaf tensors (normally :class:`Parameter`).
Outside a tape every op is a plain numpy computation, which is what
evaluation uses.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

DTYPES = {"float64": np.float64, "float32": np.float32}
# extended precision, used by the finite-difference oracle only (equals float64 on some platforms)
ORACLE_DTYPE = np.longdouble
_FLOAT_TYPES = (np.float32, np.float64, np.longdouble)

# set to True to raise on non-finite forward values
DEBUG = False

_default_dtype = np.float64
_local = threading.local()  # per-thread stack of active tapes
_param_ids = itertools.count()


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = ORACLE_DTYPE if name == "longdouble" else DTYPES[name]
    try:
        yield
    finally:
        _default_dtype = old


def set_precision(name: str) -> None:
    global _default_dtype
    _default_dtype = DTYPES[name]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in _FLOAT_TYPES:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor with a gradient accumulator of the same shape."""

    __slots__ = ("uid",)

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.uid = next(_param_ids)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: object  # callable(grad_out) -> tuple of input grads (None where not needed)


@dataclass
class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; only ops run inside the ``with`` block are
    recorded. A tape is meant to be owned by a single worker.
    """

    records: list = field(default_factory=list)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        for rec in self.records:
            rec.out._tape = None
        self.records = []

    def backward(self, loss: Tensor, scale: float = 1.0, into: dict | None = None):
        """Propagate d(scale * loss) back to every leaf that requires grad.

        Leaf gradients are added to ``leaf.grad`` or, when ``into`` is a
        dict, accumulated there keyed by the leaf object (leaves untouched).
        """
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape (detached value)")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.full(loss.shape, scale, dtype=loss.dtype)}
        start = None
        for i in range(len(self.records) - 1, -1, -1):
            if self.records[i].out is loss:
                start = i
                break
        for rec in reversed(self.records[: start + 1]):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    _accumulate_leaf(inp, gi, into)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def _accumulate_leaf(leaf: Tensor, g, into):
    if into is not None:
        if leaf in into:
            into[leaf] = into[leaf] + g
        else:
            into[leaf] = np.array(g, dtype=leaf.dtype)
        return
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.data)
    leaf.grad += g


def backward(loss: Tensor, scale: float = 1.0, into: dict | None = None):
    """Backpropagate from ``loss`` using the tape that recorded it."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to any tape")
    tape.backward(loss, scale=scale, into=into)


def _stack() -> list:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = []
    return st


def _active_tape():
    st = _stack()
    return st[-1] if st else None


def _finish(data, inputs, vjp) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward op")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    # allowed: trailing-dimension match (bias rows, column scalings of size 1)
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product (with the same limited broadcasting as :func:`add`)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


hadamard = mul


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish(-a.data, (a,), lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # expit is exact in the tails but slow; in single precision the tanh identity is within
    # rounding and several times faster
    if x.dtype != np.float32:
        return expit(x)
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _finish(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _finish(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity}


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, W, b=None) -> Tensor:
    """Row-wise affine map ``x @ W.T + b`` for x of shape (N, k), W of shape (n, k)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is None:
        return _finish(out, (x, W), lambda g: (g @ Wd, g.T @ xd))
    b = as_tensor(b)
    if b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = out + b.data
    return _finish(out, (x, W, b), lambda g: (g @ Wd, g.T @ xd, g.sum(axis=0)))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(d.shape) for d in datas)) from None
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _finish(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def column_block(W, start: int, stop: int) -> Tensor:
    """Columns start:stop of a 2-d tensor."""
    W = as_tensor(W)
    shape = W.shape

    def vjp(g):
        gw = np.zeros(shape, dtype=g.dtype)
        gw[:, start:stop] = g
        return (gw,)

    return _finish(np.ascontiguousarray(W.data[:, start:stop]), (W,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def scale_rows(x, w) -> Tensor:
    """Multiply row i of x (N, d) by w[i]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows: rows {x.shape} vs weights {w.shape}")
    xd, wd = x.data, w.data
    return _finish(xd * wd[:, None], (x, w),
                   lambda g: (g * wd[:, None], np.einsum("ij,ij->i", g, xd)))


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _finish(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def dot_rows(a, b) -> Tensor:
    """Per-row inner products of two (N, d) tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot_rows: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish(np.einsum("ij,ij->i", ad, bd), (a, b),
                   lambda g: (g[:, None] * bd, g[:, None] * ad))


# ---------------------------------------------------------------- indexing


def _segment_matrix(groups, n_groups, n_items, weights=None, dtype=np.float64):
    if weights is None:
        weights = np.ones(n_items, dtype=dtype)
    return sp.csr_matrix((weights, (groups, np.arange(n_items))), shape=(n_groups, n_items))


def _segment_sum_1d(idx, values, n):
    if values.dtype == ORACLE_DTYPE and ORACLE_DTYPE != np.float64:
        out = np.zeros(n, dtype=values.dtype)  # bincount would round through float64
        np.add.at(out, idx, values)
        return out
    return np.bincount(idx, weights=values, minlength=n).astype(values.dtype, copy=False)


def _index_add(n_rows, idx, values):
    """Sum rows of ``values`` into ``n_rows`` slots by ``idx`` in ascending index order."""
    if values.ndim == 1:
        return _segment_sum_1d(idx, values, n_rows)
    S = _segment_matrix(idx, n_rows, len(idx), dtype=values.dtype)
    return np.asarray(S @ values)


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    return _finish(x.data[idx], (x,), lambda g: (_index_add(n, idx, g),))


def expand_rows(x, idx, n: int) -> Tensor:
    """Place the rows of x at positions ``idx`` of an (n, ...) zero tensor. idx must be unique."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    out[idx] = x.data
    return _finish(out, (x,), lambda g: (g[idx],))


def scatter_sum(values, groups, n_groups: int) -> Tensor:
    """Per-group sum of the rows of ``values``; accumulation runs in ascending row order."""
    values = as_tensor(values)
    groups = np.asarray(groups, dtype=np.int64)
    if len(groups) != values.shape[0]:
        raise DimensionError(f"scatter_sum: {values.shape[0]} values but {len(groups)} group ids")
    out = _index_add(n_groups, groups, values.data)
    return _finish(out, (values,), lambda g: (g[groups],))


def weighted_edge_sum(weights, values, src, dst, n_dst: int) -> Tensor:
    """out[o] = sum over edges e with dst[e] == o of weights[e] * values[src[e]].

    Same result as scatter_sum(scale_rows(gather_rows(values, src), weights), dst)
    without materialising the per-edge rows in the forward pass.
    """
    weights, values = as_tensor(weights), as_tensor(values)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    wd, vd = weights.data, values.data
    S = sp.csr_matrix((wd, (dst, src)), shape=(n_dst, vd.shape[0]))
    out = np.asarray(S @ vd)

    def vjp(g):
        gv = np.asarray(S.T @ g)
        gw = np.einsum("ij,ij->i", g[dst], vd[src])
        return (gw, gv)

    return _finish(out, (weights, values), vjp)


def gathered_sum(tables, indices, bias=None) -> Tensor:
    """sum_k tables[k][indices[k]] (+ bias): row lookups from several tables added together."""
    tables = [as_tensor(t) for t in tables]
    indices = [np.asarray(i, dtype=np.int64) for i in indices]
    out = tables[0].data[indices[0]]
    for t, i in zip(tables[1:], indices[1:]):
        out += t.data[i]
    inputs = list(tables)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        inputs.append(bias)
    sizes = [t.shape[0] for t in tables]

    def vjp(g):
        grads = [_index_add(n, i, g) for n, i in zip(sizes, indices)]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _finish(out, tuple(inputs), vjp)


def gated_fusion(pre_u, pre_f, h_rule, h_msg, W_c, b_c) -> Tensor:
    """Fused gate/candidate/mix step of a GRU-style unit, rows independent.

    g_u = sigmoid(pre_u), g_f = sigmoid(pre_f),
    h_c = tanh((h_msg + g_f * h_rule) @ W_c.T + b_c),
    out = (1 - g_u) * h_rule + g_u * h_c.
    """
    pre_u, pre_f, h_rule, h_msg, W_c, b_c = map(as_tensor, (pre_u, pre_f, h_rule, h_msg, W_c, b_c))
    hr, hm, Wc = h_rule.data, h_msg.data, W_c.data
    if not (pre_u.shape == pre_f.shape == hr.shape == hm.shape) or Wc.shape != (hr.shape[1],) * 2:
        raise DimensionError("gated_fusion: shape mismatch "
                             f"{pre_u.shape} {pre_f.shape} {hr.shape} {hm.shape} {Wc.shape}")
    g_u = _sigmoid(pre_u.data)
    g_f = _sigmoid(pre_f.data)
    z = g_f * hr
    z += hm
    h_c = z @ Wc.T
    h_c += b_c.data
    np.tanh(h_c, out=h_c)
    out = h_c - hr
    out *= g_u
    out += hr

    def vjp(g):
        gg = g * g_u
        d_pc = h_c * h_c
        np.subtract(1.0, d_pc, out=d_pc)
        d_pc *= gg
        dz = d_pc @ Wc
        d_hr = g - gg
        d_hr += dz * g_f
        d_pu = h_c - hr
        d_pu *= gg
        d_pu *= 1.0 - g_u
        d_pf = dz * hr
        d_pf *= g_f
        d_pf *= 1.0 - g_f
        return (d_pu, d_pf, d_hr, dz, d_pc.T @ z, d_pc.sum(axis=0))

    return _finish(out, (pre_u, pre_f, h_rule, h_msg, W_c, b_c), vjp)


def group_max(x: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.full(n_groups, -np.inf, dtype=x.dtype)
    np.maximum.at(out, groups, x)
    return out


def scatter_softmax(logits, groups, n_groups: int | None = None) -> Tensor:
    """Softmax of a 1-d tensor within each group (max-shifted)."""
    logits = as_tensor(logits)
    groups = np.asarray(groups, dtype=np.int64)
    x = logits.data
    if x.ndim != 1 or len(groups) != len(x):
        raise DimensionError(f"scatter_softmax: logits {x.shape} vs groups {groups.shape}")
    if n_groups is None:
        n_groups = int(groups.max()) + 1 if len(groups) else 0
    if len(x) == 0:
        return _finish(x.copy(), (logits,), lambda g: (g,))
    mx = group_max(x, groups, n_groups)
    e = np.exp(x - mx[groups])
    denom = _segment_sum_1d(groups, e, n_groups)
    y = (e / denom[groups]).astype(x.dtype, copy=False)

    def vjp(g):
        s = _segment_sum_1d(groups, g * y, n_groups)
        return ((y * (g - s[groups])).astype(y.dtype, copy=False),)

    return _finish(y, (logits,), vjp)


def scatter_dense(values, rows, cols, shape) -> Tensor:
    """Dense (B, V) tensor of zeros with ``values`` written at (rows, cols). Positions must be unique."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros(shape, dtype=values.dtype)
    out[rows, cols] = values.data
    return _finish(out, (values,), lambda g: (g[rows, cols],))


def take(x, rows, cols) -> Tensor:
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _finish(x.data[rows, cols], (x,), vjp)


def logsumexp_rows(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    mx = xd.max(axis=1, keepdims=True)
    e = np.exp(xd - mx)
    s = e.sum(axis=1, keepdims=True)
    out = (np.log(s) + mx)[:, 0]
    p = e / s
    return _finish(out, (x,), lambda g: (g[:, None] * p,))


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict  # parameter name -> max relative error
    flagged: list  # (name, flat index, analytic, numeric, rel error) above tolerance
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(loss_fn, params, epsilon: float = 1e-5, tolerance: float = 1e-4,
                      names=None, extended: bool = True) -> GradCheckReport:
    """Compare tape gradients against central differences for every parameter entry.

    ``loss_fn()`` must rebuild the loss from the current parameter values and
    return a scalar Tensor. Parameters must be float64; the tape gradient is
    taken in float64. With ``extended`` the perturbed losses are evaluated
    in long double, which keeps the round-off of (f+ - f-) / 2eps far below
    the tolerance even for gradients that are exactly zero.
    """
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check needs 64-bit parameters")
    if not params:
        return GradCheckReport({}, [], tolerance)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    tape.clear()
    analytic = [p.grad.copy() for p in params]

    oracle = ORACLE_DTYPE if extended else np.float64
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(oracle)
    report = GradCheckReport({}, [], tolerance)
    try:
        with precision("longdouble" if extended else "float64"):
            for name, p, grad in zip(names, params, analytic):
                numeric = np.zeros(p.shape, dtype=oracle)
                flat = p.data.reshape(-1)
                eps = oracle(epsilon)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    f_plus = loss_fn().data
                    flat[i] = orig - eps
                    f_minus = loss_fn().data
                    flat[i] = orig
                    numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * eps)
                err = relative_error(grad, numeric).reshape(-1)
                report.max_rel_error[name] = float(err.max()) if err.size else 0.0
                for i in np.flatnonzero(err > tolerance):
                    report.flagged.append((name, int(i), float(grad.reshape(-1)[i]),
                                           float(numeric.reshape(-1)[i]), float(err[i])))
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return report
