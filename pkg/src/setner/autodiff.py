"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors wrap 2-D (or scalar) float arrays. Every operation records its
inputs and a backward closure, so the computation graph is rebuilt on each
forward pass (define-by-run). Calling ``backward()`` on a scalar result
fills the ``grad`` buffer of every tensor that requires gradients.

Gradient semantics: leaf tensors (parameters, inputs) accumulate across
repeated backward calls; intermediate results are reset at the start of
each backward pass. ``zero_grad()`` clears a buffer explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values fall outside an operation's domain (e.g. log of <= 0)."""


class GraphError(RuntimeError):
    """The computation graph is used in a way that violates its contract."""


_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure-numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_check_finite(enabled: bool) -> None:
    """Verify every op output is finite (slow; meant for tests)."""
    global _check_finite
    _check_finite = enabled


class Tensor:
    """A node in the computation graph holding a numpy array and its grad."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        """Propagate d(self)/d(node) into every requires_grad node.

        ``self`` must hold a single scalar. Leaf grads accumulate across
        calls; intermediate grads are recomputed from scratch.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        for node in order:
            if node._parents:
                node.grad = None
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators (same-shape or scalar-constant right operands).
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return addc(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return addc(self, -float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _toposort(root: Tensor) -> list[Tensor]:
    """Deterministic post-order over the graph reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise GraphError("operation produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        if _need(a):
            _accumulate(a, g)
        if _need(b):
            _accumulate(b, g)

    return _result(out_data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (1, n) row vector to every row of x."""
    if b.data.shape != (1, x.data.shape[1]):
        raise ShapeError(
            f"add_bias: bias {b.data.shape} does not match columns of {x.data.shape}"
        )
    out_data = x.data + b.data

    def backward(g):
        if _need(x):
            _accumulate(x, g)
        if _need(b):
            _accumulate(b, g.sum(axis=0, keepdims=True))

    return _result(out_data, (x, b), backward)


def addc(x: Tensor, c: float) -> Tensor:
    out_data = x.data + x.data.dtype.type(c)

    def backward(g):
        if _need(x):
            _accumulate(x, g)

    return _result(out_data, (x,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data * b.data

    def backward(g):
        if _need(a):
            _accumulate(a, g * b.data)
        if _need(b):
            _accumulate(b, g * a.data)

    return _result(out_data, (a, b), backward)


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant array or scalar (no gradient into c)."""
    c_arr = np.asarray(c, dtype=x.data.dtype)
    out_data = x.data * c_arr

    def backward(g):
        if _need(x):
            grad = g * c_arr
            if grad.shape != x.data.shape:
                raise ShapeError("mul_const: constant broadcast changed shape")
            _accumulate(x, grad)

    return _result(out_data, (x,), backward)


def scale(x: Tensor, c: float) -> Tensor:
    return mul_const(x, float(c))


def neg(x: Tensor) -> Tensor:
    def backward(g):
        if _need(x):
            _accumulate(x, -g)

    return _result(-x.data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if _need(x):
            _accumulate(x, g * (x.data > 0))

    return _result(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward(g):
        if _need(x):
            _accumulate(x, g * (1.0 - out_data * out_data))

    return _result(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # overflow-free: exp of a non-positive argument only
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        if _need(x):
            _accumulate(x, g * out_data * (1.0 - out_data))

    return _result(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: input has non-positive entries")
    out_data = np.log(x.data)

    def backward(g):
        if _need(x):
            _accumulate(x, g / x.data)

    return _result(out_data, (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p).

    Exact identity (and no RNG draw) when not training or p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout: p={p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    factor = keep / x.data.dtype.type(1.0 - p)
    out_data = x.data * factor

    def backward(g):
        if _need(x):
            _accumulate(x, g * factor)

    return _result(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra / structure ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible"
        )
    out_data = a.data @ b.data

    def backward(g):
        if _need(a):
            _accumulate(a, g @ b.data.T)
        if _need(b):
            _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    def backward(g):
        if _need(x):
            _accumulate(x, g.T)

    return _result(x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        if _need(x):
            _accumulate(x, g.reshape(x.data.shape))

    return _result(out_data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis {axis} not supported")
    other = 1 - axis
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.ndim != 2 or t.data.shape[other] != ref[other]:
            raise ShapeError(
                f"concat: shape {t.data.shape} incompatible with {ref} on axis {axis}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, ext in zip(tensors, extents):
            if _need(t):
                if axis == 0:
                    _accumulate(t, g[offset : offset + ext, :])
                else:
                    _accumulate(t, g[:, offset : offset + ext])
            offset += ext

    return _result(out_data, tuple(tensors), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[start:stop, :].copy()

    def backward(g):
        if _need(x):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop, :] += g

    return _result(out_data, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[:, start:stop].copy()

    def backward(g):
        if _need(x):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:stop] += g

    return _result(out_data, (x,), backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by index; repeated indices accumulate grads (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise DomainError(
            f"gather_rows: index out of range for {x.data.shape[0]} rows"
        )
    out_data = x.data[idx]

    def backward(g):
        if _need(x):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return _result(out_data, (x,), backward)


def repeat_each_row(x: Tensor, times: int) -> Tensor:
    """Rows repeated consecutively: out[i * times + j] = x[i]."""
    n, c = x.data.shape
    out_data = np.repeat(x.data, times, axis=0)

    def backward(g):
        if _need(x):
            _accumulate(x, g.reshape(n, times, c).sum(axis=1))

    return _result(out_data, (x,), backward)


def tile_rows(x: Tensor, times: int) -> Tensor:
    """Whole matrix stacked `times` times: out[j * n + i] = x[i]."""
    n, c = x.data.shape
    out_data = np.tile(x.data, (times, 1))

    def backward(g):
        if _need(x):
            _accumulate(x, g.reshape(times, n, c).sum(axis=0))

    return _result(out_data, (x,), backward)


def repeat_blocks(x: Tensor, block_rows: int, times: int) -> Tensor:
    """Consecutive row blocks each repeated: block b appears `times` times."""
    n, c = x.data.shape
    if n % block_rows:
        raise ShapeError(f"repeat_blocks: {n} rows not divisible by {block_rows}")
    blocks = n // block_rows
    out_data = (
        x.data.reshape(blocks, 1, block_rows, c)
        .repeat(times, axis=1)
        .reshape(blocks * times * block_rows, c)
    )

    def backward(g):
        if _need(x):
            _accumulate(
                x, g.reshape(blocks, times, block_rows, c).sum(axis=1).reshape(n, c)
            )

    return _result(out_data, (x,), backward)


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder rows by a permutation (a bijection, unlike gather_rows)."""
    p = np.asarray(perm, dtype=np.intp)
    if p.shape != (x.data.shape[0],) or np.bincount(p, minlength=p.size).max() != 1:
        raise ShapeError("permute_rows: perm must be a permutation of the rows")
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    out_data = x.data[p]

    def backward(g):
        if _need(x):
            _accumulate(x, g[inv])

    return _result(out_data, (x,), backward)


def gather_items(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[k], cols[k]] into a (k, 1) column."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if r.shape != c.shape or r.ndim != 1:
        raise ShapeError("gather_items: rows and cols must be equal-length 1-D")
    out_data = x.data[r, c].reshape(-1, 1)

    def backward(g):
        if _need(x):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (r, c), g[:, 0])

    return _result(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        if _need(x):
            _accumulate(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _result(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# normalization / attention ops


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if axis not in (0, 1) or x.data.ndim != 2:
        if not (x.data.ndim == 1 and axis in (0, -1)):
            raise ShapeError(f"softmax: axis {axis} invalid for {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if _need(x):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(x, out_data * (g - inner))

    return _result(out_data, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to positions where mask is True.

    Masked positions get exactly zero probability; a row with no valid
    position is a contract violation.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    if not m.any(axis=1).all():
        raise GraphError("masked_softmax: a row has no valid positions")
    neg_inf = np.finfo(x.data.dtype).min
    valid_max = np.where(m, x.data, neg_inf).max(axis=1, keepdims=True)
    e = np.exp(np.where(m, x.data - valid_max, -np.inf))
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if _need(x):
            inner = (g * out_data).sum(axis=1, keepdims=True)
            _accumulate(x, out_data * (g - inner))

    return _result(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with affine parameters of shape (1, d)."""
    if gain.data.shape != (1, x.data.shape[1]) or bias.data.shape != gain.data.shape:
        raise ShapeError(
            f"layer_norm: affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match {x.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if _need(gain):
            _accumulate(gain, (g * xhat).sum(axis=0, keepdims=True))
        if _need(bias):
            _accumulate(bias, g.sum(axis=0, keepdims=True))
        if _need(x):
            gx = g * gain.data
            mean_gx = gx.mean(axis=1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, inv_sigma * (gx - mean_gx - xhat * mean_gx_xhat))

    return _result(out_data, (x, gain, bias), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention: softmax(q kᵀ / sqrt(d)) v.

    mask, when given, is a boolean vector over key rows; invalid keys get
    zero weight. All keys masked out is a contract error.
    """
    if k.data.shape != v.data.shape or q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(
            f"attention: shapes q={q.data.shape} k={k.data.shape} v={v.data.shape}"
        )
    dk = q.data.shape[1]
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dk))
    if mask is None:
        weights = softmax(logits, axis=1)
    else:
        weights = masked_softmax(logits, np.asarray(mask, dtype=bool).reshape(1, -1))
    return matmul(weights, v)


def mha_core(
    qp: Tensor,
    kp: Tensor,
    vp: Tensor,
    n_heads: int,
    n_groups: int,
    key_mask: Optional[np.ndarray] = None,
    keys_time_major: bool = False,
) -> Tensor:
    """Batched multi-head scaled dot-product attention over projected inputs.

    qp has shape (n_groups * n_q, d) with rows grouped by sentence; kp/vp
    hold (n_groups * n_k, d) rows, either grouped by sentence or time-major
    (row t * n_groups + s). Heads are contiguous d/n_heads column blocks.
    key_mask (n_groups, n_k) marks valid key positions per group; queries in
    group s attend only to that group's valid keys.
    """
    total_q, d = qp.data.shape
    total_k = kp.data.shape[0]
    if kp.data.shape != vp.data.shape or kp.data.shape[1] != d:
        raise ShapeError("mha_core: kp/vp shapes inconsistent with qp")
    if d % n_heads != 0 or total_q % n_groups != 0 or total_k % n_groups != 0:
        raise ShapeError("mha_core: dimensions not divisible by heads/groups")
    nq = total_q // n_groups
    nk = total_k // n_groups
    dk = d // n_heads
    inv_scale = 1.0 / math.sqrt(dk)

    def to_heads(flat: np.ndarray, time_major: bool, n: int) -> np.ndarray:
        if time_major:
            return flat.reshape(n, n_groups, n_heads, dk).transpose(1, 2, 0, 3)
        return flat.reshape(n_groups, n, n_heads, dk).transpose(0, 2, 1, 3)

    def from_heads(arr: np.ndarray, time_major: bool, n: int) -> np.ndarray:
        if time_major:
            return arr.transpose(2, 0, 1, 3).reshape(n * n_groups, d)
        return arr.transpose(0, 2, 1, 3).reshape(n_groups * n, d)

    q4 = to_heads(qp.data, False, nq)
    k4 = to_heads(kp.data, keys_time_major, nk)
    v4 = to_heads(vp.data, keys_time_major, nk)
    scores = (q4 @ k4.transpose(0, 1, 3, 2)) * inv_scale  # (B, h, nq, nk)
    if key_mask is None:
        valid = np.ones((n_groups, 1, 1, nk), dtype=bool)
    else:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (n_groups, nk):
            raise ShapeError(
                f"mha_core: key_mask {km.shape} != {(n_groups, nk)}"
            )
        if not km.any(axis=1).all():
            raise GraphError("mha_core: a group has no valid keys")
        valid = km[:, None, None, :]
    neg_inf = np.finfo(scores.dtype).min
    valid_max = np.where(valid, scores, neg_inf).max(axis=3, keepdims=True)
    e = np.exp(np.where(valid, scores - valid_max, -np.inf))
    attn = e / e.sum(axis=3, keepdims=True)
    out4 = attn @ v4
    out_data = from_heads(out4, False, nq)

    def backward(g):
        g4 = to_heads(g, False, nq)
        d_attn = g4 @ v4.transpose(0, 1, 3, 2)
        inner = (d_attn * attn).sum(axis=3, keepdims=True)
        d_scores = attn * (d_attn - inner)
        if _need(vp):
            dv4 = attn.transpose(0, 1, 3, 2) @ g4
            _accumulate(vp, from_heads(dv4, keys_time_major, nk))
        if _need(qp):
            dq4 = (d_scores @ k4) * inv_scale
            _accumulate(qp, from_heads(dq4, False, nq))
        if _need(kp):
            dk4 = (d_scores.transpose(0, 1, 3, 2) @ q4) * inv_scale
            _accumulate(kp, from_heads(dk4, keys_time_major, nk))

    return _result(out_data, (qp, kp, vp), backward)


def lstm_cell_core(
    x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor
) -> Tensor:
    """Fused LSTM cell with gate order [input, forget, cell, output].

    Returns the next hidden and cell states stacked row-wise: the first
    half of the rows is h_next, the second half c_next. Fusing the cell
    into one graph node keeps step loops cheap; the backward applies the
    standard gate gradient identities.
    """
    n_rows, hidden = h.data.shape
    if w.data.shape[1] != 4 * hidden or u.data.shape != (hidden, 4 * hidden):
        raise ShapeError(
            f"lstm_cell_core: gate shapes w={w.data.shape} u={u.data.shape} "
            f"do not match hidden size {hidden}"
        )
    if b.data.shape != (1, 4 * hidden):
        raise ShapeError(f"lstm_cell_core: bias shape {b.data.shape}")
    gates = x.data @ w.data + h.data @ u.data + b.data
    zi = np.exp(-np.abs(gates[:, :hidden]))
    i_g = np.where(gates[:, :hidden] >= 0, 1.0 / (1.0 + zi), zi / (1.0 + zi))
    zf = np.exp(-np.abs(gates[:, hidden : 2 * hidden]))
    f_g = np.where(
        gates[:, hidden : 2 * hidden] >= 0, 1.0 / (1.0 + zf), zf / (1.0 + zf)
    )
    g_g = np.tanh(gates[:, 2 * hidden : 3 * hidden])
    zo = np.exp(-np.abs(gates[:, 3 * hidden :]))
    o_g = np.where(gates[:, 3 * hidden :] >= 0, 1.0 / (1.0 + zo), zo / (1.0 + zo))
    c_next = f_g * c.data + i_g * g_g
    tanh_c = np.tanh(c_next)
    h_next = o_g * tanh_c
    out_data = np.concatenate([h_next, c_next], axis=0)

    def backward(g):
        gh = g[:n_rows]
        gc_out = g[n_rows:]
        gc = gc_out + gh * o_g * (1.0 - tanh_c * tanh_c)
        d_gates = np.empty_like(gates)
        d_gates[:, :hidden] = gc * g_g * i_g * (1.0 - i_g)
        d_gates[:, hidden : 2 * hidden] = gc * c.data * f_g * (1.0 - f_g)
        d_gates[:, 2 * hidden : 3 * hidden] = gc * i_g * (1.0 - g_g * g_g)
        d_gates[:, 3 * hidden :] = gh * tanh_c * o_g * (1.0 - o_g)
        if _need(c):
            _accumulate(c, gc * f_g)
        if _need(x):
            _accumulate(x, d_gates @ w.data.T)
        if _need(h):
            _accumulate(h, d_gates @ u.data.T)
        if _need(w):
            _accumulate(w, x.data.T @ d_gates)
        if _need(u):
            _accumulate(u, h.data.T @ d_gates)
        if _need(b):
            _accumulate(b, d_gates.sum(axis=0, keepdims=True))

    return _result(out_data, (x, h, c, w, u, b), backward)


# ---------------------------------------------------------------------------
# helpers


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    """Sum a nonempty sequence of same-shape tensors."""
    it = iter(tensors)
    total = next(it)
    for t in it:
        total = add(total, t)
    return total
