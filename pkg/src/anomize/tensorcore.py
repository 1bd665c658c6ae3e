"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order. The LSTM and multi-head attention are fused primitives with
hand-written backward passes so long sequences do not explode the graph.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "DimensionError",
    "NonFiniteError",
    "GradCheckReport",
    "as_tensor",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "reshape",
    "softmax",
    "sigmoid",
    "tanh",
    "gelu",
    "log",
    "clip",
    "absolute",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "cosine_sim_matrix",
    "topk",
    "topm_mean",
    "lstm",
    "multi_head_attention",
    "check_gradients",
    "finite_checks",
]

_NORM_FLOOR = 1e-12
_CHECK_FINITE = False


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Raise :class:`NonFiniteError` naming the op whenever an output is NaN/Inf."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


def _coerce(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    if isinstance(data, np.generic) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """A float array that optionally participates in gradient computation."""

    __slots__ = ("data", "grad", "_requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self._requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _take(self, index)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op {op!r}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, _parents=parents if needs else (), _backward=backward if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.data.dtype.type(factor)

    def backward(g):
        return (g * a.data.dtype.type(factor),)

    return _result(out, (a,), backward, "scale")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return _result(out, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1 - out * out),)

    return _result(out, (x,), backward, "tanh")


def gelu(x) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF from erf."""
    x = as_tensor(x)
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / math.sqrt(2.0)))
    out = (v * cdf).astype(v.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + v * pdf)).astype(v.dtype),)

    return _result(out, (x,), backward, "gelu")


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(out, (x,), backward, "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)

    def backward(g):
        inside = (x.data >= lo) & (x.data <= hi)
        return (g * inside,)

    return _result(out, (x,), backward, "clip")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return _result(out, (x,), backward, "abs")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ------------------------------------------------------------ shape & reduce


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def _take(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=x.dtype), (x,), backward, "index")


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x) -> Tensor:
    """Maximum of a vector; gradient goes to the first maximal entry."""
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    idx = int(np.argmax(flat))

    def backward(g):
        full = np.zeros_like(flat)
        full[idx] = np.asarray(g).reshape(())
        return (full.reshape(x.shape),)

    return _result(np.asarray(flat[idx], dtype=x.dtype), (x,), backward, "max")


# ---------------------------------------------------------------- linear alg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), backward, "softmax")


def cosine_sim_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity of the rows of ``a`` (p x d) and ``b`` (q x d).

    Rows whose norm is at most 1e-12 produce similarity 0 and receive no gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim_matrix shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    va = na > _NORM_FLOOR
    vb = nb > _NORM_FLOOR
    ia = np.where(va, 1.0 / np.where(va, na, 1.0), 0.0).astype(a.dtype)
    ib = np.where(vb, 1.0 / np.where(vb, nb, 1.0), 0.0).astype(b.dtype)
    ua = a.data * ia
    ub = b.data * ib
    out = np.clip(ua @ ub.T, -1.0, 1.0)

    def backward(g):
        # d(u)/d(x) for u = x/|x| is (I - u u^T)/|x|
        gua = g @ ub
        gub = g.T @ ua
        ga = (gua - ua * np.sum(gua * ua, axis=1, keepdims=True)) * ia
        gb = (gub - ub * np.sum(gub * ub, axis=1, keepdims=True)) * ib
        return ga, gb

    return _result(out.astype(np.result_type(a.dtype, b.dtype)), (a, b), backward, "cosine")


# ---------------------------------------------------------------- selection


def topk(values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries, ties to the lower index."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values).reshape(-1)
    if not 1 <= k <= v.size:
        raise ValueError(f"topk needs 1 <= K <= {v.size}, got K={k}")
    order = np.argsort(-v, kind="stable")[:k]
    return order, v[order]


def topm_mean(x, m: int) -> Tensor:
    """Column-wise mean of the ``m`` largest entries of an (n, c) or (n,) tensor."""
    x = as_tensor(x)
    data = x.data if x.data.ndim == 2 else x.data[:, None]
    n = data.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"top-M needs 1 <= M <= {n}, got M={m}")
    idx = np.argsort(-data, axis=0, kind="stable")[:m]
    picked = np.take_along_axis(data, idx, axis=0)
    out = picked.mean(axis=0)
    if x.data.ndim == 1:
        out = out.reshape(())

    def backward(g):
        full = np.zeros_like(data)
        gg = np.broadcast_to(np.asarray(g).reshape(1, -1) / m, idx.shape)
        np.put_along_axis(full, idx, gg, axis=0)
        return (full.reshape(x.shape),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "topm_mean")


# ---------------------------------------------------------------- fused ops


def lstm(x, w_in, w_rec, bias) -> Tensor:
    """Single-layer LSTM over an (n, d_in) sequence, zero initial state.

    ``w_in`` is (d_in, 4h), ``w_rec`` is (h, 4h) and ``bias`` is (4h,), with gate
    blocks ordered input, forget, cell, output. Returns all hidden states (n, h).
    """
    x, w_in, w_rec, bias = (as_tensor(t) for t in (x, w_in, w_rec, bias))
    n = x.shape[0]
    if n == 0:
        raise ValueError("lstm received an empty sequence")
    hidden = w_rec.shape[0]
    if w_in.shape != (x.shape[1], 4 * hidden) or w_rec.shape != (hidden, 4 * hidden):
        raise DimensionError(f"lstm weight shapes {w_in.shape}, {w_rec.shape} do not fit input {x.shape}")
    dtype = np.result_type(x.dtype, w_in.dtype)
    xw = x.data @ w_in.data + bias.data
    gates = np.empty((n, 4 * hidden), dtype=dtype)
    cells = np.empty((n, hidden), dtype=dtype)
    hs = np.empty((n, hidden), dtype=dtype)
    h = np.zeros(hidden, dtype=dtype)
    c = np.zeros(hidden, dtype=dtype)
    H = hidden
    for t in range(n):
        z = xw[t] + h @ w_rec.data
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H:2 * H])
        gg = np.tanh(z[2 * H:3 * H])
        o = _sigmoid(z[3 * H:])
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:] = i, f, gg, o
        cells[t] = c
        hs[t] = h

    def backward(g):
        dz = np.empty_like(gates)
        dh_next = np.zeros(H, dtype=dtype)
        dc_next = np.zeros(H, dtype=dtype)
        for t in range(n - 1, -1, -1):
            i, f, gg, o = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
            tc = np.tanh(cells[t])
            c_prev = cells[t - 1] if t > 0 else np.zeros(H, dtype=dtype)
            dh = g[t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz[t, :H] = dc * gg * i * (1 - i)
            dz[t, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[t, 2 * H:3 * H] = dc * i * (1 - gg * gg)
            dz[t, 3 * H:] = dh * tc * o * (1 - o)
            dh_next = dz[t] @ w_rec.data.T
            dc_next = dc * f
        h_prev = np.vstack([np.zeros((1, H), dtype=dtype), hs[:-1]])
        return dz @ w_in.data.T, x.data.T @ dz, h_prev.T @ dz, dz.sum(axis=0)

    return _result(hs, (x, w_in, w_rec, bias), backward, "lstm")


@dataclass
class AttentionWeights:
    """Per-head attention probabilities, shape (heads, q, k)."""

    probs: np.ndarray


def multi_head_attention(query, keys, wq, bq, wk, bk, wv, bv, wo, bo, heads: int,
                         return_weights: bool = False):
    """Scaled dot-product multi-head attention with key = value.

    ``query`` is (q, d). ``keys`` is either (k, d), shared by every query row,
    or (q, k, d), where query row i attends only to ``keys[i]``. Projection
    weights are (d, d) stored as (in, out); biases are (d,).
    """
    tensors = [as_tensor(t) for t in (query, keys, wq, bq, wk, bk, wv, bv, wo, bo)]
    query, keys, wq, bq, wk, bk, wv, bv, wo, bo = tensors
    d = query.shape[-1]
    if d % heads:
        raise DimensionError(f"model dim {d} is not divisible by {heads} heads")
    if keys.shape[-1] != d:
        raise DimensionError(f"attention key dim {keys.shape[-1]} != query dim {d}")
    shared = keys.data.ndim == 2
    if not shared and keys.shape[0] != query.shape[0]:
        raise DimensionError(f"per-row keys {keys.shape} do not match {query.shape[0]} queries")
    nq = query.shape[0]
    dh = d // heads
    inv = 1.0 / math.sqrt(dh)

    Q = query.data @ wq.data + bq.data                     # (q, d)
    K = keys.data @ wk.data + bk.data                      # (k, d) | (q, k, d)
    V = keys.data @ wv.data + bv.data
    Qh = Q.reshape(nq, heads, dh).transpose(1, 0, 2)       # (H, q, dh)
    if shared:
        Kh = K.reshape(-1, heads, dh).transpose(1, 0, 2)   # (H, k, dh)
        Vh = V.reshape(-1, heads, dh).transpose(1, 0, 2)
        scores = np.einsum("hqe,hke->hqk", Qh, Kh) * inv
    else:
        Kh = K.reshape(nq, -1, heads, dh).transpose(2, 0, 1, 3)  # (H, q, k, dh)
        Vh = V.reshape(nq, -1, heads, dh).transpose(2, 0, 1, 3)
        scores = np.einsum("hqe,hqke->hqk", Qh, Kh) * inv
    scores = scores - scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    if shared:
        ctx_h = np.einsum("hqk,hke->hqe", P, Vh)
    else:
        ctx_h = np.einsum("hqk,hqke->hqe", P, Vh)
    ctx = ctx_h.transpose(1, 0, 2).reshape(nq, d)
    out = ctx @ wo.data + bo.data

    def backward(g):
        g_wo = ctx.T @ g
        g_bo = g.sum(axis=0)
        g_ctx = (g @ wo.data.T).reshape(nq, heads, dh).transpose(1, 0, 2)
        if shared:
            g_P = np.einsum("hqe,hke->hqk", g_ctx, Vh)
            g_Vh = np.einsum("hqk,hqe->hke", P, g_ctx)
        else:
            g_P = np.einsum("hqe,hqke->hqk", g_ctx, Vh)
            g_Vh = np.einsum("hqk,hqe->hqke", P, g_ctx)
        g_s = P * (g_P - np.sum(g_P * P, axis=-1, keepdims=True)) * inv
        if shared:
            g_Qh = np.einsum("hqk,hke->hqe", g_s, Kh)
            g_Kh = np.einsum("hqk,hqe->hke", g_s, Qh)
            g_K = g_Kh.transpose(1, 0, 2).reshape(-1, d)
            g_V = g_Vh.transpose(1, 0, 2).reshape(-1, d)
        else:
            g_Qh = np.einsum("hqk,hqke->hqe", g_s, Kh)
            g_Kh = np.einsum("hqk,hqe->hqke", g_s, Qh)
            g_K = g_Kh.transpose(1, 2, 0, 3).reshape(nq, -1, d)
            g_V = g_Vh.transpose(1, 2, 0, 3).reshape(nq, -1, d)
        g_Q = g_Qh.transpose(1, 0, 2).reshape(nq, d)
        flat_keys = keys.data.reshape(-1, d)
        flat_gK = g_K.reshape(-1, d)
        flat_gV = g_V.reshape(-1, d)
        g_query = g_Q @ wq.data.T
        g_keys = (g_K @ wk.data.T) + (g_V @ wv.data.T)
        return (
            g_query, g_keys,
            query.data.T @ g_Q, g_Q.sum(axis=0),
            flat_keys.T @ flat_gK, flat_gK.sum(axis=0),
            flat_keys.T @ flat_gV, flat_gV.sum(axis=0),
            g_wo, g_bo,
        )

    result = _result(out, tensors, backward, "attention")
    if return_weights:
        return result, AttentionWeights(P)
    return result


# ---------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def check_gradients(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5, tol: float = 1e-4,
                    seed: int = 0, floor: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences in float64.

    Non-scalar outputs are contracted with a fixed random cotangent. The error
    per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero
    gradients from amplifying finite-difference noise.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    cotangent = None

    def evaluate(values, grad: bool):
        nonlocal cotangent
        leaves = [Tensor(v, requires_grad=grad) for v in values]
        with finite_checks(True):
            out = f(*leaves)
        if cotangent is None:
            cotangent = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
        return leaves, out

    leaves, out = evaluate(arrays, True)
    try:
        out.backward(cotangent)
    except FloatingPointError as exc:
        raise NonFiniteError(f"backward of {out.op!r}: {exc}") from exc
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    numeric = []
    for k, base in enumerate(arrays):
        est = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            vals = [a.copy() for a in arrays]
            vals[k][ix] = base[ix] + eps
            plus = float(np.sum(evaluate(vals, False)[1].data * cotangent))
            vals[k][ix] = base[ix] - eps
            minus = float(np.sum(evaluate(vals, False)[1].data * cotangent))
            est[ix] = (plus - minus) / (2 * eps)
        numeric.append(est)

    per_input = []
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            per_input.append(0.0)
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_input.append(float(np.max(np.abs(a - n) / denom)))
    return GradCheckReport(max(per_input, default=0.0), tol, per_input, analytic, numeric)
