"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model in the package is built from the primitive ops below. The graph
is implicit: each Tensor keeps references to its parents plus a closure that
maps the output gradient to parent gradients. A fresh graph is built on every
forward pass; backward() walks it once in reverse topological order.

Gradients never accumulate into leaves with trainable=False, so frozen
parameters keep an exactly-zero (absent) gradient buffer by construction.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NonFiniteError

PROB_FLOOR = 1e-12
LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Immutable-by-convention float64 array plus its place on the tape."""

    __slots__ = ("data", "parents", "_bwd", "grad", "trainable")

    def __init__(self, data, parents=(), bwd=None, trainable=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents = tuple(parents) if _grad_enabled else ()
        self._bwd = bwd if _grad_enabled else None
        self.grad = None
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, trainable=False)

    def assert_finite(self, where: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in {where}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    # Operator sugar used throughout the models.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, trainable: bool = False) -> Tensor:
    return Tensor(data, trainable=trainable)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd) -> Tensor:
    if _grad_enabled:
        return Tensor(data, parents=parents, bwd=bwd)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError("add", a.shape, b.shape)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError("mul", a.shape, b.shape)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def concat_rows(tensors) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat_rows of zero tensors")
    cols = {t.shape[1] for t in ts if t.data.ndim == 2}
    if any(t.data.ndim != 2 for t in ts) or len(cols) != 1:
        raise DimensionError("concat_rows", *[t.shape for t in ts])
    counts = [t.shape[0] for t in ts]
    splits = np.cumsum(counts)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(np.concatenate([t.data for t in ts], axis=0), tuple(ts), bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("slice_cols", a.shape)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), bwd)


def row_softmax(x) -> Tensor:
    """Softmax over the last axis with max subtraction for stability."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize each row of x over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return (dx, dgain, dbias)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit: 0.5 x (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def bwd(g):
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), bwd)


def embedding_gather(table, ids) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise DimensionError("embedding_gather", table.shape, idx.shape)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bwd)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def bwd(g):
        return (np.full(x.shape, float(g) / n),)

    return _make(np.float64(x.data.mean()), (x,), bwd)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        return (np.full(x.shape, float(g)),)

    return _make(np.float64(x.data.sum()), (x,), bwd)


def cross_entropy(logits, target: int) -> Tensor:
    """Negative log-softmax of a 1-D logit row at the target index."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise DimensionError("cross_entropy", logits.shape)
    t = int(target)
    if not 0 <= t < logits.shape[0]:
        raise ContractError(f"cross_entropy target {t} out of range {logits.shape[0]}")
    m = logits.data.max()
    e = np.exp(logits.data - m)
    p = e / e.sum()
    loss = math.log(e.sum()) + m - logits.data[t]

    def bwd(g):
        d = p.copy()
        d[t] -= 1.0
        return (d * float(g),)

    return _make(np.float64(loss), (logits,), bwd)


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) between probability rows, floored at 1e-12 before the log."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError("kl_divergence", p.shape, q.shape)
    pf = np.maximum(p.data, PROB_FLOOR)
    qf = np.maximum(q.data, PROB_FLOOR)
    logp = np.log(pf)
    logq = np.log(qf)
    val = float((pf * (logp - logq)).sum())

    def bwd(g):
        dp = np.where(p.data > PROB_FLOOR, logp - logq + 1.0, 0.0)
        dq = np.where(q.data > PROB_FLOOR, -pf / qf, 0.0)
        return (dp * float(g), dq * float(g))

    return _make(np.float64(val), (p, q), bwd)


def l2_normalize_rows(x) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("l2_normalize_rows", x.shape)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise NonFiniteError("l2_normalize_rows: zero-norm row")
    y = x.data / norms

    def bwd(g):
        return ((g - y * (y * g).sum(axis=-1, keepdims=True)) / norms,)

    return _make(y, (x,), bwd)


def stop_gradient(x) -> Tensor:
    """Pass the value through but sever gradient flow to its ancestors."""
    x = _as_tensor(x)
    return Tensor(x.data)


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v with an optional additive mask."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("scaled_dot_attention", q.shape, k.shape, v.shape)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError("scaled_dot_attention", q.shape, k.shape, v.shape)
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        logits = add(logits, Tensor(mask))
    return matmul(row_softmax(logits), v)


def multi_head_attention(q_in, kv_in, wq, wk, wv, wo, n_heads: int, mask=None) -> Tensor:
    """Multi-head scaled-dot attention, fused into one tape node.

    Heads are realized by the column-split reshape convention; the optional
    additive mask has shape (n, m) and broadcasts over heads.
    """
    q_in, kv_in = _as_tensor(q_in), _as_tensor(kv_in)
    wq, wk, wv, wo = _as_tensor(wq), _as_tensor(wk), _as_tensor(wv), _as_tensor(wo)
    d = wq.shape[1]
    if d % n_heads or q_in.shape[1] != wq.shape[0] or kv_in.shape[1] != wk.shape[0]:
        raise DimensionError("multi_head_attention", q_in.shape, kv_in.shape, wq.shape, (n_heads,))
    n, m = q_in.shape[0], kv_in.shape[0]
    dk = d // n_heads
    inv = 1.0 / math.sqrt(dk)

    q = q_in.data @ wq.data
    k = kv_in.data @ wk.data
    v = kv_in.data @ wv.data
    qh = q.reshape(n, n_heads, dk).transpose(1, 0, 2)
    kh = k.reshape(m, n_heads, dk).transpose(1, 0, 2)
    vh = v.reshape(m, n_heads, dk).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) * inv
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = attn @ vh
    joined = ctx.transpose(1, 0, 2).reshape(n, d)
    out = joined @ wo.data

    def bwd(g):
        d_wo = joined.T @ g
        d_ctx = (g @ wo.data.T).reshape(n, n_heads, dk).transpose(1, 0, 2)
        d_attn = d_ctx @ vh.transpose(0, 2, 1)
        d_vh = attn.transpose(0, 2, 1) @ d_ctx
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_qh = (d_scores @ kh) * inv
        d_kh = (d_scores.transpose(0, 2, 1) @ qh) * inv
        d_q = d_qh.transpose(1, 0, 2).reshape(n, d)
        d_k = d_kh.transpose(1, 0, 2).reshape(m, d)
        d_v = d_vh.transpose(1, 0, 2).reshape(m, d)
        d_q_in = d_q @ wq.data.T
        d_kv = d_k @ wk.data.T + d_v @ wv.data.T
        d_wq = q_in.data.T @ d_q
        d_wk = kv_in.data.T @ d_k
        d_wv = kv_in.data.T @ d_v
        return (d_q_in, d_kv, d_wq, d_wk, d_wv, d_wo)

    return _make(out, (q_in, kv_in, wq, wk, wv, wo), bwd)


# ---------------------------------------------------------------------------
# Catalog dispatcher: the named-op surface with input validation
# ---------------------------------------------------------------------------

OP_NAMES = (
    "matmul",
    "add",
    "scale",
    "concat-rows",
    "row-softmax",
    "layer-norm",
    "gelu",
    "embedding-gather",
    "scaled-dot-attention",
    "mean",
    "cross-entropy",
    "kl-divergence",
    "stop-gradient",
)


def forward_op(name: str, *inputs) -> Tensor:
    """Apply a catalog op by name, checking finiteness of tensor inputs."""
    if name not in OP_NAMES:
        raise ContractError(f"unknown op {name!r}; catalog: {OP_NAMES}")
    for x in inputs:
        if isinstance(x, Tensor):
            x.assert_finite(f"{name} input")
        elif isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
            if not np.isfinite(x).all():
                raise NonFiniteError(f"non-finite values in {name} input")
    if name == "matmul":
        return matmul(*inputs)
    if name == "add":
        return add(*inputs)
    if name == "scale":
        return scale(*inputs)
    if name == "concat-rows":
        return concat_rows(inputs)
    if name == "row-softmax":
        return row_softmax(*inputs)
    if name == "layer-norm":
        return layer_norm(*inputs)
    if name == "gelu":
        return gelu(*inputs)
    if name == "embedding-gather":
        return embedding_gather(*inputs)
    if name == "scaled-dot-attention":
        return scaled_dot_attention(*inputs)
    if name == "mean":
        return mean(*inputs)
    if name == "cross-entropy":
        return cross_entropy(*inputs)
    if name == "kl-divergence":
        return kl_divergence(*inputs)
    return stop_gradient(*inputs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss.

    Returns a map {trainable leaf Tensor -> gradient array} covering every
    trainable leaf reachable from the loss. Leaves cut off by stop-gradient
    are unreachable and simply absent (their buffers stay zero). Non-trainable
    leaves never receive an accumulation. The graph is rebuilt per forward
    pass, so each call overwrites .grad with this graph's gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if not node.parents:
            if node.trainable:
                result[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._bwd(g)):
            if pg is None:
                continue
            if not parent.parents and not parent.trainable:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def fd_gradient_entries(f, t: Tensor, entries, step: float = 1e-5):
    """Central finite differences of scalar f() at selected flat entries of t."""
    flat = t.data.reshape(-1)
    out = []
    for i in entries:
        keep = flat[i]
        flat[i] = keep + step
        hi = f()
        flat[i] = keep - step
        lo = f()
        flat[i] = keep
        out.append((hi - lo) / (2.0 * step))
    return np.array(out)


def check_gradients(f, wrt, rng=None, max_entries: int = 6, step: float = 1e-5):
    """Compare analytic gradients of scalar f() against central differences.

    f rebuilds its graph on every call and returns a float. Gradients are
    taken by running f once in Tensor mode via f_tensor when provided; here
    we expect wrt tensors to already carry .grad from the caller's backward.
    Returns the max relative error over the sampled entries of each tensor.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in wrt:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        n = t.data.size
        entries = range(n) if n <= max_entries else sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        numeric = fd_gradient_entries(f, t, entries, step=step)
        a = analytic.reshape(-1)[list(entries)]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
