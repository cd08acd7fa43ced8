"""Reverse-mode automatic differentiation on numpy arrays.

Tensors record the operations that produced them (parent links plus a
backward closure); ``Tensor.backward`` replays that record in reverse
topological order. The op set is exactly what the recommender's encoders
and losses need. Training runs in float32; verification re-runs graphs in
float64 (see ``grad_check``).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckInapplicableError,
    ConfigurationError,
    DegenerateAttentionError,
    DimensionError,
    TrainingDivergenceError,
    VocabularyError,
)

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def backward(self, seed=None):
        """Run the recorded tape backwards from this tensor.

        A tape can be consumed once; a second backward without a fresh
        forward pass raises.
        """
        if self._spent:
            raise RuntimeError(
                "backward already ran on this graph; run a new forward pass first"
            )
        if seed is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
            node._spent = True
        # Release the graph so intermediate buffers can be collected.
        for node in order:
            if node._backward_fn is not None:
                node._parents = ()
                node._backward_fn = None
                node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor):
    """Reverse topological order of the graph above ``root`` (iterative)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._spent = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope*x) elementwise; subgradient at 0 is ``slope``."""
    data = np.where(a.data > 0, a.data, a.data * slope)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * np.where(a.data > 0, 1.0, slope))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

    def backward(g):
        if a.requires_grad:
            with np.errstate(over="ignore"):
                sig = 1.0 / (1.0 + np.exp(-a.data))
            _accum(a, g * sig)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2Dx2D, 2Dx1D (matvec) and 1Dx2D (vecmat)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
        data = ad @ bd

        def backward(g):
            if a.requires_grad:
                _accum(a, g @ bd.T)
            if b.requires_grad:
                _accum(b, ad.T @ g)

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
        data = ad @ bd

        def backward(g):
            if a.requires_grad:
                _accum(a, np.outer(g, bd))
            if b.requires_grad:
                _accum(b, ad.T @ g)

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
        data = ad @ bd

        def backward(g):
            if a.requires_grad:
                _accum(a, bd @ g)
            if b.requires_grad:
                _accum(b, np.outer(ad, g))

    else:
        raise DimensionError(
            f"matmul supports 2Dx2D, 2Dx1D and 1Dx2D, got {ad.shape} x {bd.shape}"
        )
    return _make(data, (a, b), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    data = np.asarray(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2D tensor, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    data = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make(data, (a,), backward)


def get_row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"get_row needs a 2D tensor, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[i] = g
            _accum(a, buf)

    return _make(a.data[i].copy(), (a,), backward)


def stack_rows(rows) -> Tensor:
    """Stack 1D tensors of equal length into a 2D tensor."""
    rows = list(rows)
    if not rows:
        raise DimensionError("stack_rows needs at least one row")
    data = np.stack([r.data for r in rows])

    def backward(g):
        for i, r in enumerate(rows):
            if r.requires_grad:
                _accum(r, g[i])

    return _make(data, tuple(rows), backward)


def stack_scalars(vals) -> Tensor:
    """Stack 0-d tensors into a 1D tensor."""
    vals = list(vals)
    if not vals:
        raise DimensionError("stack_scalars needs at least one value")
    data = np.stack([np.asarray(v.data).reshape(()) for v in vals])

    def backward(g):
        for i, v in enumerate(vals):
            if v.requires_grad:
                _accum(v, np.asarray(g[i]).reshape(v.shape))

    return _make(data, tuple(vals), backward)


def concat_cols(parts) -> Tensor:
    """Concatenate 2D tensors with equal row counts along columns."""
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def backward(g):
        start = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, g[:, start : start + w])
            start += w

    return _make(data, tuple(parts), backward)


def concat_vec(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 1D tensors."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError(f"concat_vec needs 1D tensors, got {a.shape} and {b.shape}")
    data = np.concatenate([a.data, b.data])
    na = a.data.shape[0]

    def backward(g):
        if a.requires_grad:
            _accum(a, g[:na])
        if b.requires_grad:
            _accum(b, g[na:])

    return _make(data, (a, b), backward)


def softmax_masked(logits: Tensor, mask) -> Tensor:
    """Masked softmax along the last axis.

    ``mask`` is a boolean vector matching the last axis; masked positions get
    exactly 0 and the unmasked positions form a probability distribution.
    Stabilized by subtracting the per-row max over unmasked entries.
    """
    m = np.asarray(mask, dtype=bool)
    x = logits.data
    if m.ndim != 1 or m.shape[0] != x.shape[-1]:
        raise DimensionError(
            f"mask of length {m.shape} does not match logits last axis {x.shape}"
        )
    if not m.any():
        raise DegenerateAttentionError("softmax over an all-masked vector")
    mx = np.max(np.where(m, x, -np.inf), axis=-1, keepdims=True)
    # Masked entries are clamped to the max before exp so wildly large junk
    # logits in masked slots cannot overflow.
    e = np.where(m, np.exp(np.where(m, x, mx) - mx), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    data = e / s

    def backward(g):
        if logits.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            _accum(logits, data * (g - inner))

    return _make(data, (logits,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero each element with probability ``rate`` and rescale survivors.

    Identity when not training or when rate is 0.
    """
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    inv = 1.0 / (1.0 - rate)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * keep * inv)

    return _make(x.data * keep * inv, (x,), backward)


def embedding_rows(table: Tensor, ids, mask) -> Tensor:
    """Gather rows of ``table`` by id; masked-false rows come out zero.

    Gradients scatter-add back into the gathered rows only.
    """
    ids = np.asarray(ids, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if ids.shape != m.shape or ids.ndim != 1:
        raise DimensionError(f"ids {ids.shape} and mask {m.shape} must be equal-length vectors")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise VocabularyError(
            f"id out of range: table has {table.data.shape[0]} rows, ids span "
            f"[{ids.min()}, {ids.max()}]"
        )
    data = table.data[ids] * m[:, None].astype(table.data.dtype)

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids[m], g[m])
            _accum(table, buf)

    return _make(data, (table,), backward)


def mask_rows(x: Tensor, mask) -> Tensor:
    """Zero the rows of a 2D tensor where ``mask`` is false."""
    m = np.asarray(mask, dtype=bool)
    col = constant(m[:, None].astype(x.data.dtype))
    return mul(x, col)


def multi_head_self_attention(x: Tensor, wq, wk, wv, wo: Tensor, mask) -> Tensor:
    """Scaled dot-product self-attention over the unmasked rows of ``x``.

    ``wq``/``wk``/``wv`` are per-head projection matrices [d x d_h], ``wo``
    the output projection [d x d]. No positional encoding: the op is
    permutation-equivariant in its rows. Masked rows neither attend nor get
    attended to, and come out as zero rows.
    """
    n, d = x.shape
    heads = len(wq)
    if len(wk) != heads or len(wv) != heads:
        raise ConfigurationError("wq, wk, wv must have one matrix per head")
    d_h = wq[0].shape[1]
    if d_h * heads != d:
        raise ConfigurationError(
            f"model dim {d} is not divisible into {heads} heads of width {d_h}"
        )
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise DegenerateAttentionError("attention over an all-masked sequence")
    outs = []
    inv_sqrt = 1.0 / math.sqrt(d_h)
    for h in range(heads):
        q = matmul(x, wq[h])
        k = matmul(x, wk[h])
        v = matmul(x, wv[h])
        scores = scale(matmul(q, transpose(k)), inv_sqrt)
        attn = softmax_masked(scores, m)  # [n x n], key axis masked
        outs.append(matmul(attn, v))
    merged = outs[0] if heads == 1 else concat_cols(outs)
    return mask_rows(matmul(merged, wo), m)


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 8e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}, {self.n_checked} elements)"


# Elements whose analytic and numeric gradients are both below this scale are
# compared on that scale instead, so finite-difference noise on true zeros
# does not register as error.
_REL_FLOOR = 1e-4


def grad_check(fn, inputs, tol: float = 1e-4, h_scale: float = 1e-5,
               name: str = "fn") -> GradCheckReport:
    """Compare backward gradients with central finite differences in float64.

    ``fn`` maps the given tensors to a tensor; non-scalar outputs are summed.
    Each input element is perturbed by h = h_scale * max(1, |x|). Reports the
    maximum relative error |analytic - numeric| / max(|analytic|, |numeric|,
    floor) over all elements of all inputs.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    pts = [Tensor(t.data.copy(), requires_grad=True, dtype=np.float64) for t in inputs]

    def evaluate():
        out = fn(*pts)
        return out if out.data.size == 1 else tsum(out)

    out = evaluate()
    if not np.all(np.isfinite(out.data)):
        raise CheckInapplicableError(f"{name}: non-finite output at the check point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in pts]

    report = GradCheckReport(name=name, max_rel_err=0.0, tol=tol, n_checked=0)
    for p, ana in zip(pts, analytic):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = h_scale * max(1.0, abs(orig))
            with no_grad():
                flat[i] = orig + h
                f_plus = float(evaluate().data.sum())
                flat[i] = orig - h
                f_minus = float(evaluate().data.sum())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise CheckInapplicableError(f"{name}: non-finite value during finite differences")
            nflat[i] = (f_plus - f_minus) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), _REL_FLOOR)
        rel = np.abs(ana - num) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.per_input.append(worst)
        report.n_checked += int(flat.size)
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
