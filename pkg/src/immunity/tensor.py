"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Covers exactly the operations the expert networks, heatmap pipeline, and
losses need: elementwise arithmetic with limited broadcasting, reductions,
conv/pool/linear/softmax layers, align-corners bilinear resize, and a
central-difference gradient checker. First-order only: backward functions
never build graph nodes themselves.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation's input shapes are incompatible."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """An n-dimensional float64 array with optional graph linkage.

    A tensor with no parents is a leaf; backward never propagates past
    leaves. Gradients accumulate additively into ``grad`` across repeated
    backward calls until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()  # ((parent, vjp), ...)
        self._op: str | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _reject_item(self)

    def is_leaf(self) -> bool:
        return self._op is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        op = self._op or "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    # arithmetic (see module-level helpers below for layer ops)

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _coerce(other).__truediv__(self)

    def __neg__(self):
        return _unary("neg", self, -self.data, lambda g: -g)

    def log(self) -> "Tensor":
        return _unary("log", self, np.log(self.data), lambda g: g / self.data)

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        return _unary("relu", self, np.maximum(self.data, 0.0), lambda g: g * mask)

    def clamp_min(self, floor: float) -> "Tensor":
        # Subgradient 0 on the clamped (flat) side, matching the relu-at-0 rule.
        mask = self.data > floor
        return _unary("clamp_min", self, np.maximum(self.data, floor), lambda g: g * mask)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        in_shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            return np.broadcast_to(_restore_axes(g, axis, keepdims, in_shape), in_shape)

        return _unary("sum", self, out, vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in _axis_tuple(axis, self.data.ndim)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape
        return _unary("reshape", self, self.data.reshape(shape),
                      lambda g: g.reshape(in_shape))


def _reject_item(t: Tensor):
    raise ShapeError(f"item: tensor has {t.size} elements, expected exactly 1")


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis_tuple(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _restore_axes(g, axis, keepdims, in_shape):
    if axis is None or keepdims:
        return g.reshape([1] * len(in_shape)) if axis is None and not keepdims else g
    for a in sorted(_axis_tuple(axis, len(in_shape))):
        g = np.expand_dims(g, a)
    return g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(op: str, data: np.ndarray, parents: Sequence[tuple]) -> Tensor:
    """Wrap ``data`` in a Tensor, recording graph linkage only when some
    input participates in differentiation."""
    out = Tensor(data)
    live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._op = op
    return out


def _unary(op: str, a: Tensor, data, vjp: Callable) -> Tensor:
    return _make(op, _f64(data), [(a, vjp)])


def _binary(op, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")
    ad, bd = a.data, b.data
    return _make(op, data, [
        (a, lambda g: _unbroadcast(vjp_a(g, ad, bd), ad.shape)),
        (b, lambda g: _unbroadcast(vjp_b(g, ad, bd), bd.shape)),
    ])


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(root: Tensor, stop_at: Sequence[Tensor] = ()) -> None:
    """Populate ``grad`` on every participating tensor reachable from ``root``.

    ``root`` must be scalar. Propagation uses a per-call gradient table, so
    stale ``grad`` values never feed back into the pass; table contents are
    added onto ``grad`` at the end (repeated calls accumulate). Tensors in
    ``stop_at`` receive gradients but their ancestors are not visited.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    frontier = {id(t) for t in stop_at}

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
        if id(node) not in frontier:
            for parent, _ in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    table: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    by_id: dict[int, Tensor] = {id(t): t for t in order}
    for node in reversed(order):
        g = table.get(id(node))
        if g is None or id(node) in frontier:
            continue
        for parent, vjp in node._parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            prev = table.get(id(parent))
            table[id(parent)] = contrib if prev is None else prev + contrib
    for tid, g in table.items():
        t = by_id.get(tid, root if tid == id(root) else None)
        if t is None or not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor. The relative error at each
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    point = _f64(point)
    x = Tensor(point.copy(), requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = np.zeros_like(point) if x.grad is None else x.grad

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(point.copy())).item()
        flat[i] = orig - step
        lo = fn(Tensor(point.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
        if not np.isfinite(numeric.reshape(-1)[i]):
            raise ValueError(f"grad_check: non-finite difference at coordinate {i}")
    if not np.all(np.isfinite(analytic)):
        bad = int(np.argmax(~np.isfinite(analytic.reshape(-1))))
        raise ValueError(f"grad_check: non-finite analytic gradient at coordinate {bad}")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# layer operations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return _coerce(x).relu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _unary("softmax", x, s, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a (batch, in_features) tensor; weight is (in, out)."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be 2-D, got {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data
    return _make("linear", out, [
        (x, lambda g: g @ wd.T),
        (weight, lambda g: xd.T @ g),
        (bias, lambda g: g.sum(axis=0)),
    ])


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch axis."""
    return _coerce(x).reshape(x.shape[0], -1)


def _pool_out_dim(n: int, k: int, s: int, op: str) -> int:
    out = (n - k) // s + 1
    if out < 1:
        raise ShapeError(f"{op}: window {k} stride {s} does not fit dimension {n}")
    return out


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected 4-D (batch, channel, h, w), got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (B, C, H, W); weight: (O, C, kh, kw); bias: (O,).
    """
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {weight.shape}")
    B, C, H, W = x.shape
    O, C2, kh, kw = weight.shape
    if C != C2:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {weight.shape}")
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = H + 2 * p, W + 2 * p
    OH = _pool_out_dim(Hp, kh, s, "conv2d")
    OW = _pool_out_dim(Wp, kw, s, "conv2d")

    cols = np.empty((B, C, kh, kw, OH, OW))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + s * OH:s, v:v + s * OW:s]
    cols2 = cols.reshape(B, C * kh * kw, OH * OW)
    w2 = weight.data.reshape(O, C * kh * kw)
    out = np.matmul(w2, cols2).reshape(B, O, OH, OW) + bias.data.reshape(1, O, 1, 1)

    def vjp_x(g):
        g2 = g.reshape(B, O, OH * OW)
        dcols = np.matmul(w2.T, g2).reshape(B, C, kh, kw, OH, OW)
        dxp = np.zeros((B, C, Hp, Wp))
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u:u + s * OH:s, v:v + s * OW:s] += dcols[:, :, u, v]
        return dxp[:, :, p:p + H, p:p + W] if p else dxp

    def vjp_w(g):
        g2 = g.reshape(B, O, OH * OW)
        return np.einsum("bop,bfp->of", g2, cols2).reshape(O, C, kh, kw)

    return _make("conv2d", out, [
        (x, vjp_x),
        (weight, vjp_w),
        (bias, lambda g: g.sum(axis=(0, 2, 3))),
    ])


def _pool_windows(xd: np.ndarray, k: int, s: int, op: str):
    B, C, H, W = xd.shape
    OH = _pool_out_dim(H, k, s, op)
    OW = _pool_out_dim(W, k, s, op)
    win = np.empty((B, C, k, k, OH, OW))
    for u in range(k):
        for v in range(k):
            win[:, :, u, v] = xd[:, :, u:u + s * OH:s, v:v + s * OW:s]
    return win, OH, OW


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    _require_4d(x, "maxpool2d")
    k, s = int(kernel), int(stride or kernel)
    B, C, H, W = x.shape
    win, OH, OW = _pool_windows(x.data, k, s, "maxpool2d")
    flat = win.reshape(B, C, k * k, OH, OW)
    amax = flat.argmax(axis=2)  # first max on ties, deterministic
    out = np.take_along_axis(flat, amax[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        dx = np.zeros((B, C, H, W))
        bi, ci, oh, ow = np.indices((B, C, OH, OW))
        rows = oh * s + amax // k
        cols = ow * s + amax % k
        np.add.at(dx, (bi, ci, rows, cols), g)
        return dx

    return _make("maxpool2d", out, [(x, vjp)])


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    _require_4d(x, "avgpool2d")
    k, s = int(kernel), int(stride or kernel)
    B, C, H, W = x.shape
    win, OH, OW = _pool_windows(x.data, k, s, "avgpool2d")
    out = win.mean(axis=(2, 3))

    def vjp(g):
        dx = np.zeros((B, C, H, W))
        gk = g / (k * k)
        for u in range(k):
            for v in range(k):
                dx[:, :, u:u + s * OH:s, v:v + s * OW:s] += gk
        return dx

    return _make("avgpool2d", out, [(x, vjp)])


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool: (B, C, H, W) -> (B, C)."""
    _require_4d(x, "spatial_mean")
    return x.mean(axis=(2, 3))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one column per row: out[q] = x[q, index[q]]."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D input, got {x.shape}")
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: index shape {idx.shape} vs input {x.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= x.shape[1]:
        raise IndexError(f"gather_rows: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]
    in_shape = x.shape

    def vjp(g):
        dx = np.zeros(in_shape)
        np.add.at(dx, (rows, idx), g)
        return dx

    return _make("gather_rows", out, [(x, vjp)])


def select_column(x: Tensor, index: int) -> Tensor:
    """One column of a 2-D tensor, kept as (rows, 1) for broadcasting."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"select_column: expected 2-D input, got {x.shape}")
    if not 0 <= index < x.shape[1]:
        raise IndexError(f"select_column: column {index} out of range for {x.shape}")
    out = x.data[:, index:index + 1]
    in_shape = x.shape

    def vjp(g):
        dx = np.zeros(in_shape)
        dx[:, index:index + 1] = g
        return dx

    return _make("select_column", out, [(x, vjp)])


def permute_columns(x: Tensor, perm: Sequence[int]) -> Tensor:
    """Reorder columns: out[:, i] = x[:, perm[i]] (perm must be a bijection)."""
    x = _coerce(x)
    perm = np.asarray(perm, dtype=np.intp)
    n = x.shape[-1]
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError(f"permute_columns: {perm.tolist()} is not a permutation of 0..{n - 1}")
    out = x.data[..., perm]

    def vjp(g):
        dx = np.empty_like(g)
        dx[..., perm] = g
        return dx

    return _make("permute_columns", out, [(x, vjp)])


# ---------------------------------------------------------------------------
# bilinear resize (align-corners)
# ---------------------------------------------------------------------------

def _lerp_indices(n_in: int, n_out: int):
    """Align-corners source indices and fractions for one axis.

    Integer source positions (corners included) get frac 0, so those samples
    copy through bit-exactly.
    """
    if n_out > 1 and n_in > 1:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    else:
        src = np.zeros(n_out)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _lerp_axis(data: np.ndarray, n_out: int, axis: int):
    i0, i1, frac = _lerp_indices(data.shape[axis], n_out)
    x0 = np.take(data, i0, axis=axis)
    x1 = np.take(data, i1, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = n_out
    f = frac.reshape(shape)
    # x0 + f*(x1 - x0) keeps constants and corner samples exact.
    return x0 + f * (x1 - x0), (i0, i1, frac)


def _lerp_axis_vjp(g: np.ndarray, idx, axis: int, in_dim: int) -> np.ndarray:
    i0, i1, frac = idx
    out_shape = list(g.shape)
    out_shape[axis] = in_dim
    dx = np.zeros(out_shape)
    gm = np.moveaxis(g, axis, -1)
    dm = np.moveaxis(dx, axis, -1)
    lead = (slice(None),) * (dm.ndim - 1)
    np.add.at(dm, lead + (i0,), gm * (1.0 - frac))
    np.add.at(dm, lead + (i1,), gm * frac)
    return dx


def bilinear_resize(grid: Tensor, target_h: int, target_w: int) -> Tensor:
    """Align-corners bilinear interpolation over the last two axes.

    Corner samples map exactly onto source corners and constant grids are
    preserved bit-exactly. Accepts a 2-D grid or a batch (..., H, W).
    """
    grid = _coerce(grid)
    if grid.data.ndim < 2:
        raise ShapeError(f"bilinear_resize: need at least 2 dims, got {grid.shape}")
    if target_h < 1 or target_w < 1:
        raise ValueError(f"bilinear_resize: target {target_h}x{target_w} must be positive")
    h_in, w_in = grid.shape[-2], grid.shape[-1]
    if h_in < 1 or w_in < 1:
        raise ShapeError(f"bilinear_resize: empty source grid {grid.shape}")

    rows_out, row_idx = _lerp_axis(grid.data, target_h, grid.data.ndim - 2)
    out, col_idx = _lerp_axis(rows_out, target_w, grid.data.ndim - 1)

    def vjp(g):
        g_rows = _lerp_axis_vjp(g, col_idx, g.ndim - 1, w_in)
        return _lerp_axis_vjp(g_rows, row_idx, g.ndim - 2, h_in)

    return _make("bilinear_resize", out, [(grid, vjp)])
