"""Dense float64 arrays with taped reverse-mode differentiation and Adam.

Everything the policy network and its losses need, nothing more: matrix
products, row-wise softmax / layer norm, GELU / ReLU, dropout, a handful of
structural ops, scalar reductions, and a fused block-diagonal multi-head
attention used to batch independent token sequences through one graph.

Every op runs in float64 and raises NumericFault as soon as a NaN or Inf
appears. Graphs are define-by-run: each produced Tensor remembers its parents
and a closure that routes the incoming gradient to them. `backward()` walks
the graph once in reverse topological order.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericFault, ParameterError

_GRAD_ENABLED = True

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A full-array sum is NaN/Inf iff some entry is; magnitudes here stay far
    # below the overflow threshold so false positives cannot occur.
    if not math.isfinite(float(arr.sum())):
        raise NumericFault(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def constant(data) -> Tensor:
    """A leaf tensor that never receives gradient."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(data, (a, b), backward, "add")


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a (1, D) row vector to every row of a (n, D) tensor."""
    if row.data.shape != (1, a.data.shape[1]):
        raise DimensionError(
            f"add_row expects (1, {a.data.shape[1]}), got {row.data.shape}"
        )
    data = a.data + row.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if row.requires_grad:
            row._accumulate(g.sum(axis=0, keepdims=True))

    return _make(data, (a, row), backward, "add_row")


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a plain ndarray (broadcastable, no gradient) to a tensor."""
    data = a.data + c

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)

    return _make(data, (a,), backward, "add_const")


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(data, (a,), backward, "scale")


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(2.0 * a.data * g)

    return _make(data, (a,), backward, "square")


def sum_all(a: Tensor) -> Tensor:
    data = np.array([[a.data.sum()]])

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g[0, 0])))

    return _make(data, (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.array([[a.data.sum() / n]])

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g[0, 0]) / n))

    return _make(data, (a,), backward, "mean_all")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), backward, "relu")


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * (x * x * x)))


def _gelu_forward(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = _gelu_tanh(x)
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    t = _gelu_tanh(a.data)
    data = 0.5 * a.data * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _gelu_grad(a.data, t))

    return _make(data, (a,), backward, "gelu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) >= rate) / keep
    data = a.data * mask

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), backward, "dropout")


# ---------------------------------------------------------------------------
# row-wise normalizations

LAYER_NORM_EPS = 1e-5


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            a._accumulate(p * (g - dot))

    return _make(p, (a,), backward, "softmax_rows")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row zero mean / unit variance followed by affine gain and bias."""
    d = a.data.shape[-1]
    if gain.data.shape != (1, d) or bias.data.shape != (1, d):
        raise DimensionError(
            f"layer_norm gain/bias must be (1, {d}), got {gain.data.shape}/{bias.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0, keepdims=True))
        if a.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gh - m1 - xhat * m2))

    return _make(data, (a, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# structural ops


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            a._accumulate(da)

    return _make(data, (a,), backward, "gather_rows")


def gather_cols_rowwise(a: Tensor, cols: np.ndarray) -> Tensor:
    """out[i, j] = a[i, cols[i, j]] for per-row column indices."""
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape[0] != a.data.shape[0]:
        raise DimensionError("gather_cols_rowwise: row counts differ")
    rows = np.arange(a.data.shape[0])[:, None]
    data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, (rows, cols), g)
            a._accumulate(da)

    return _make(data, (a,), backward, "gather_cols_rowwise")


def interleave_row(blocks: Tensor, lead: Tensor, block_len: int) -> Tensor:
    """Prepend `lead` (1, D) to every consecutive block of `block_len` rows.

    blocks is (B*block_len, D); the result is (B*(block_len+1), D) where row 0
    of every block is `lead` and the remaining rows are the block's rows.
    """
    n, d = blocks.data.shape
    if lead.data.shape != (1, d):
        raise DimensionError(f"lead must be (1, {d}), got {lead.data.shape}")
    if n % block_len != 0:
        raise DimensionError("blocks row count not divisible by block_len")
    b = n // block_len
    out = np.empty((b * (block_len + 1), d))
    lead_idx = np.arange(b) * (block_len + 1)
    body_mask = np.ones(b * (block_len + 1), dtype=bool)
    body_mask[lead_idx] = False
    out[lead_idx] = lead.data
    out[body_mask] = blocks.data

    def backward(g):
        if lead.requires_grad:
            lead._accumulate(g[lead_idx].sum(axis=0, keepdims=True))
        if blocks.requires_grad:
            blocks._accumulate(g[body_mask])

    return _make(out, (blocks, lead), backward, "interleave_row")


# ---------------------------------------------------------------------------
# fused block-diagonal multi-head attention

def _mha_forward(z3: np.ndarray, u: np.ndarray, w_o: np.ndarray,
                 n_heads: int, d_head: int):
    """Multi-head qkv self-attention on a (B, n, D) stack of sequences.

    `u` concatenates per-head projections along columns, head h occupying
    columns [h*3*d_head, (h+1)*3*d_head) in q|k|v order. Returns the (B, n, D)
    output and the intermediates needed for the backward pass.
    """
    b, n, _ = z3.shape
    qkv = z3 @ u                                       # (B, n, 3*k*dh)
    qkv = qkv.reshape(b, n, n_heads, 3, d_head)
    q = np.ascontiguousarray(qkv[:, :, :, 0, :].transpose(0, 2, 1, 3))  # (B,k,n,dh)
    k = np.ascontiguousarray(qkv[:, :, :, 1, :].transpose(0, 2, 1, 3))
    v = np.ascontiguousarray(qkv[:, :, :, 2, :].transpose(0, 2, 1, 3))
    logits = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(d_head)          # (B,k,n,n)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ v                                                     # (B,k,n,dh)
    concat = ctx.transpose(0, 2, 1, 3).reshape(b, n, n_heads * d_head)
    out = concat @ w_o                                                  # (B, n, D)
    return out, (q, k, v, probs, concat)


def _mha_backward(g3: np.ndarray, z3: np.ndarray, u: np.ndarray, w_o: np.ndarray,
                  n_heads: int, d_head: int, cache):
    q, k, v, probs, concat = cache
    b, n, d = z3.shape
    d_w_o = concat.reshape(b * n, -1).T @ g3.reshape(b * n, d)
    d_concat = g3 @ w_o.T
    d_ctx = np.ascontiguousarray(
        d_concat.reshape(b, n, n_heads, d_head).transpose(0, 2, 1, 3))
    d_probs = d_ctx @ v.transpose(0, 1, 3, 2)
    d_v = probs.transpose(0, 1, 3, 2) @ d_ctx
    dot = (d_probs * probs).sum(axis=-1, keepdims=True)
    d_logits = probs * (d_probs - dot) / math.sqrt(d_head)
    d_q = d_logits @ k
    d_k = d_logits.transpose(0, 1, 3, 2) @ q
    d_qkv = np.empty((b, n, n_heads, 3, d_head))
    d_qkv[:, :, :, 0, :] = d_q.transpose(0, 2, 1, 3)
    d_qkv[:, :, :, 1, :] = d_k.transpose(0, 2, 1, 3)
    d_qkv[:, :, :, 2, :] = d_v.transpose(0, 2, 1, 3)
    d_qkv = d_qkv.reshape(b, n, n_heads * 3 * d_head)
    d_u = z3.reshape(b * n, d).T @ d_qkv.reshape(b * n, -1)
    d_z = (d_qkv @ u.T).reshape(b, n, d)
    return d_z, d_u, d_w_o


def block_mha(z: Tensor, u_heads: list[Tensor], w_o: Tensor,
              n_heads: int, d_head: int, block_len: int) -> Tensor:
    """Multi-head self-attention applied independently to each block of
    `block_len` rows of z ((B*block_len, D)); heads are concatenated and
    projected by w_o."""
    n, d = z.data.shape
    if n % block_len != 0:
        raise DimensionError("block_mha: rows not divisible by block_len")
    if len(u_heads) != n_heads:
        raise DimensionError(f"block_mha expects {n_heads} head projections")
    b = n // block_len
    u = np.concatenate([h.data for h in u_heads], axis=1)
    z3 = z.data.reshape(b, block_len, d)
    out3, cache = _mha_forward(z3, u, w_o.data, n_heads, d_head)
    data = out3.reshape(n, w_o.data.shape[1])

    def backward(g):
        g3 = g.reshape(b, block_len, -1)
        d_z, d_u, d_w_o = _mha_backward(g3, z3, u, w_o.data, n_heads, d_head, cache)
        if w_o.requires_grad:
            w_o._accumulate(d_w_o)
        step = 3 * d_head
        for h, head in enumerate(u_heads):
            if head.requires_grad:
                head._accumulate(d_u[:, h * step:(h + 1) * step])
        if z.requires_grad:
            z._accumulate(d_z.reshape(n, d))

    return _make(data, (z, w_o, *u_heads), backward, "block_mha")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable parameter from a (1, 1) scalar loss."""
    if loss.data.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 tensor, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node.grad = None  # free intermediate storage
            node._backward = None
            node._parents = ()


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: list[Tensor], grads: list[np.ndarray],
              state: AdamState, lr: float) -> None:
    """One in-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params/grads/state lengths differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data = p.data - (lr / c1) * (m / denom)
        _check_finite(p.data, "adam_step")


@dataclass
class Adam:
    """Convenience wrapper binding an AdamState to a parameter list."""

    params: list[Tensor]
    lr: float = 0.001
    state: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
