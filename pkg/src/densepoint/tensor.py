"""Dense fp64 tensors with reverse-mode automatic differentiation.

Every differentiable op records a node holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` replays the nodes
in reverse topological order and accumulates into leaf ``.grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid operator configuration (groups, ratios, ...)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents: tuple, backward_fn: Callable, op: str):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """N-dimensional float64 array that can take part in autodiff."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Learnable leaf tensor; always participates in autodiff."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded counter-based (Philox) generator; the only randomness source."""
    return np.random.Generator(np.random.Philox(seed))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out._node = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._node = _Node(tuple(parents), backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Raises:
        ShapeError: if ``loss`` is not a single scalar.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad += g
            continue
        parent_grads = t._node.backward_fn(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _make(ad / bd, (a, b), bw, "div")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing; gradient scatters back into the source."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[key]), (x,), bw, "getitem")


# ---------------------------------------------------------------------------
# reductions and concatenation
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is not None:
        axis = _check_axis(axis, x.ndim)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    count = x.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "reduce_mean")


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first (lowest-index) maximum."""
    axis = _check_axis(axis, x.ndim)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, arg, g, axis=axis)
        return (full,)

    if not keepdims:
        out = np.squeeze(out, axis)
    return _make(out, (x,), bw, "reduce_max")


def concat_channels(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    axis = _check_axis(axis, nd)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(
            a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis
        ):
            raise ShapeError(f"concat extent mismatch: {ref} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the usual ``dA = dC B^T``, ``dB = A^T dC``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def grouped_linear(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, groups: int = 1
) -> Tensor:
    """Channel-first grouped linear map, i.e. a 1x1 grouped convolution.

    Args:
        x: input of shape (B, Ci, *spatial).
        weight: (Co, Ci // groups); rows of group g map input block g.
        bias: optional (Co,).
        groups: number of independent channel blocks.

    Returns:
        Tensor of shape (B, Co, *spatial).
    """
    co, cig = weight.shape
    b, ci = x.shape[:2]
    if groups < 1 or ci % groups or co % groups:
        raise ConfigError(
            f"channels ({ci} in, {co} out) must be divisible by groups={groups}"
        )
    if cig * groups != ci:
        raise ShapeError(f"weight {weight.shape} does not fit input channels {ci} / {groups} groups")
    spatial = x.shape[2:]
    p = int(np.prod(spatial)) if spatial else 1
    cog = co // groups
    # (groups, cig, B*P) so that each group is one GEMM
    xg = x.data.reshape(b, groups, cig, p).transpose(1, 2, 0, 3).reshape(groups, cig, b * p)
    wg = weight.data.reshape(groups, cog, cig)
    yg = np.matmul(wg, xg)
    out = yg.reshape(groups, cog, b, p).transpose(2, 0, 1, 3).reshape((b, co) + spatial)
    if bias is not None:
        out = out + bias.data.reshape((1, co) + (1,) * len(spatial))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gg = g.reshape(b, groups, cog, p).transpose(1, 2, 0, 3).reshape(groups, cog, b * p)
        gx = None
        if x.requires_grad:
            gx = np.matmul(wg.transpose(0, 2, 1), gg)
            gx = gx.reshape(groups, cig, b, p).transpose(2, 0, 1, 3).reshape(x.shape)
        gw = np.matmul(gg, xg.transpose(0, 2, 1)).reshape(co, cig)
        if bias is None:
            return gx, gw
        gb = g.reshape(b, co, p).sum(axis=(0, 2))
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), parents, bw, "grouped_linear")


# ---------------------------------------------------------------------------
# indexing by neighborhoods
# ---------------------------------------------------------------------------


def gather_points(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather per-point features by integer index.

    Args:
        x: (B, C, N) features.
        index: integer array (B, *idx_shape) of point indices in [0, N).

    Returns:
        Tensor (B, C, *idx_shape). The gradient scatter-adds back to x.
    """
    bsz, c, n = x.shape
    index = np.asarray(index)
    idx_shape = index.shape[1:]
    flat = index.reshape(bsz, -1)
    q = flat.shape[1]
    rows = (flat + (np.arange(bsz)[:, None] * n)).reshape(-1)
    # (C, B*N) layout so one sparse product handles every channel
    xt = x.data.transpose(1, 0, 2).reshape(c, bsz * n)
    out = xt[:, rows].reshape(c, bsz, q).transpose(1, 0, 2).reshape((bsz, c) + idx_shape)

    def bw(g):
        scatter = sp.csr_matrix(
            (np.ones(rows.size, dtype=DTYPE), (np.arange(rows.size), rows)),
            shape=(rows.size, bsz * n),
        )
        gt = g.reshape(bsz, c, q).transpose(1, 0, 2).reshape(c, bsz * q)
        gx = np.asarray(scatter.T.dot(gt.T)).T
        return (gx.reshape(c, bsz, n).transpose(1, 0, 2),)

    return _make(np.ascontiguousarray(out), (x,), bw, "gather")


# ---------------------------------------------------------------------------
# normalisation and regularisation
# ---------------------------------------------------------------------------


class BNState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool
) -> Tensor:
    """Per-channel batch normalisation over every axis except axis 1."""
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"batch_norm expects {state.channels} channels, got {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)
    if training:
        count = x.data.size // c
        mean = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        m = state.momentum
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * unbiased

        def bw(g):
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(state.running_var.reshape(bshape) + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gd + bd, (x, gamma, beta), bw, "batch_norm")


def _count_matrix(nbrs: np.ndarray, n: int) -> sp.csr_matrix:
    """(B*No, B*N) matrix whose entry (i, p) counts how often p is a neighbor of i."""
    bsz, no, m = nbrs.shape
    rows = np.repeat(np.arange(bsz * no), m)
    cols = (nbrs + (np.arange(bsz) * n)[:, None, None]).reshape(-1)
    return sp.csr_matrix((np.ones(rows.size, dtype=DTYPE), (rows, cols)), shape=(bsz * no, bsz * n))


def _rows(x: np.ndarray) -> np.ndarray:
    """(B, C, N) -> (B*N, C)."""
    return x.transpose(0, 2, 1).reshape(-1, x.shape[1])


def _unrows(x: np.ndarray, bsz: int) -> np.ndarray:
    """(B*N, C) -> (B, C, N)."""
    return x.reshape(bsz, -1, x.shape[1]).transpose(0, 2, 1)


def neighborhood_bn_relu_max(
    y: Tensor,
    nbrs: np.ndarray,
    centre: Optional[Tensor],
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    training: bool,
) -> Tensor:
    """Fused ``max_j relu(batch_norm(y[:, :, nbrs[i, j]] - centre[:, :, i]))``.

    Equal to gathering y into a (B, C, No, M) block, subtracting the
    per-centroid term, batch-normalising over the block, applying ReLU and
    max-pooling over M, but never runs batch norm on the block. Its
    statistics come from per-point sums weighted by gather counts, and
    because the normalisation is a per-channel affine map, pooling picks the
    max (or the min for channels with a negative scale) before the map.

    Args:
        y: (B, C, N) per-point responses.
        nbrs: (B, No, M) neighbor indices into N.
        centre: (B, C, No) per-centroid offsets, or None for zero.
        gamma, beta, state: batch-norm parameters and running statistics.

    Returns:
        (B, C, No) pooled activations.
    """
    bsz, c, n = y.shape
    nbrs = np.asarray(nbrs, dtype=np.int64)
    if nbrs.ndim != 3 or nbrs.shape[0] != bsz:
        raise ShapeError(f"neighbors {nbrs.shape} do not match features {y.shape}")
    _, no, m = nbrs.shape
    if c != state.channels:
        raise ShapeError(f"batch_norm expects {state.channels} channels, got {c}")
    if centre is not None and centre.shape != (bsz, c, no):
        raise ShapeError(f"centre term {centre.shape} should be {(bsz, c, no)}")
    yd = y.data
    cd = centre.data if centre is not None else np.zeros((bsz, c, no), dtype=DTYPE)
    count = bsz * no * m
    if training:
        amat = _count_matrix(nbrs, n)
        cnt = np.asarray(amat.sum(axis=0)).reshape(bsz, 1, n)
        mean = ((cnt * yd).sum(axis=(0, 2)) - m * cd.sum(axis=(0, 2))) / count
        yc = yd - mean[None, :, None]
        s_c = _unrows(amat @ _rows(yc), bsz)  # sum over each neighborhood of (y - mean)
        var = ((cnt * yc * yc).sum(axis=(0, 2)) - 2 * (cd * s_c).sum(axis=(0, 2)) + m * (cd * cd).sum(axis=(0, 2))) / count
        var = np.maximum(var, 0.0)
        mo = state.momentum
        state.running_mean = (1 - mo) * state.running_mean + mo * mean
        state.running_var = (1 - mo) * state.running_var + mo * var * (count / max(count - 1, 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    scale = gamma.data * inv
    shift = beta.data - mean * scale
    # pick the neighbor that maximises the affine map, per channel
    flat = nbrs.reshape(bsz, no * m)
    signed = np.where(scale < 0, -1.0, 1.0)[:, None]
    pick_j = np.empty((bsz, c, no), dtype=np.int64)
    for b in range(bsz):
        block = yd[b][:, flat[b]]
        if (signed < 0).any():
            block *= signed
        pick_j[b] = block.reshape(c, no, m).argmax(axis=2)
    bidx = np.arange(bsz)[:, None, None]
    psel = flat[bidx, np.arange(no)[None, None, :] * m + pick_j]
    ysel = yd[bidx, np.arange(c)[None, :, None], psel]
    zsel = ysel - cd
    pre = zsel * scale[None, :, None] + shift[None, :, None]
    out = np.maximum(pre, 0.0)

    def bw(g):
        h = g * (pre > 0)
        xhat_sel = (zsel - mean[None, :, None]) * inv[None, :, None]
        dgamma = (h * xhat_sel).sum(axis=(0, 2))
        dbeta = h.sum(axis=(0, 2))
        dz_sel = h * scale[None, :, None]
        flat_idx = ((np.arange(bsz)[:, None, None] * c + np.arange(c)[None, :, None]) * n + psel).reshape(-1)
        gy = np.bincount(flat_idx, weights=dz_sel.reshape(-1), minlength=bsz * c * n).reshape(bsz, c, n)
        gc = -dz_sel
        if training:
            dxhat = h * gamma.data[None, :, None]
            d1 = dxhat.sum(axis=(0, 2)) / count
            d2 = (dxhat * xhat_sel).sum(axis=(0, 2)) / count
            a = (inv * d1)[None, :, None]
            b2 = (inv * inv * d2)[None, :, None]
            gy = gy - cnt * (a + b2 * yc) + b2 * _unrows(amat.T @ _rows(cd), bsz)
            gc = gc + m * a + b2 * (s_c - m * cd)
        if centre is None:
            return gy, dgamma, dbeta
        return gy, gc, dgamma, dbeta

    parents = (y, gamma, beta) if centre is None else (y, centre, gamma, beta)
    return _make(out, parents, bw, "neighborhood_bn_relu_max")


def dropout(x: Tensor, ratio: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1 / (1 - ratio)."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= ratio) / (1.0 - ratio)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def pick(x: Tensor, labels: np.ndarray, axis: int = 1) -> Tensor:
    """Select ``x[..., labels, ...]`` along ``axis`` (e.g. the target log-prob)."""
    axis = _check_axis(axis, x.ndim)
    idx = np.expand_dims(np.asarray(labels, dtype=np.int64), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), bw, "pick")
