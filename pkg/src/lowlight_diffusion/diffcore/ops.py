"""Differentiable operations.

Only scalar broadcasting is supported: binary ops take two tensors of equal
shape, or a tensor and a scalar (python number or 0-d tensor). Anything else
must be reshaped explicitly.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from ..errors import DimensionError
from .tensor import Tensor, make_node

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.ndim == 0
    return np.ndim(x) == 0


def _check_binary(a: Tensor, b) -> None:
    if _is_scalar(b) or _is_scalar(a):
        return
    bshape = b.shape if isinstance(b, Tensor) else np.shape(b)
    if a.shape != bshape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {bshape} (only scalar broadcasting)")


def _reduce_like(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum(dtype=np.float64), dtype=t.dtype)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a, b = b, a
    a = as_tensor(a)
    _check_binary(a, b)
    return a, b


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, Tensor):
        def backward(g):
            return _reduce_like(g, a), _reduce_like(g, b)
        return make_node(a.data + b.data, (a, b), backward, "add")

    bv = np.asarray(b, dtype=a.dtype) if np.ndim(b) else b

    def backward(g):
        return (g,)
    return make_node(a.data + bv, (a,), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        return add(a, neg(b) if isinstance(b, Tensor) else -np.asarray(b))
    return add(neg(b), a)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, Tensor):
        def backward(g):
            return _reduce_like(g * b.data, a), _reduce_like(g * a.data, b)
        return make_node(a.data * b.data, (a, b), backward, "mul")

    bv = np.asarray(b, dtype=a.dtype) if np.ndim(b) else b

    def backward(g):
        return (g * bv,)
    return make_node(a.data * bv, (a,), backward, "mul")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)  # subgradient 0 at the origin

    def backward(g):
        return (g * sign,)
    return make_node(np.abs(a.data), (a,), backward, "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)
    return make_node(out, (a,), backward, "exp")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = expit(x)

    def backward(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)
    return make_node(x * s, (a,), backward, "silu")


# -- reductions and shape ops ------------------------------------------------

def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g):
        return (np.full(a.shape, g, dtype=a.dtype),)
    return make_node(total, (a,), backward, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    total = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)
    return make_node(total, (a,), backward, "mean")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )
    return make_node(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]`` along the first axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)
    return make_node(a.data[index], (a,), backward, "take_rows")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with ``bias`` added to every row."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} for weight {weight.shape}")

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)
    return make_node(x.data @ weight.data + bias.data, (x, weight, bias), backward, "linear")


def channel_affine(x, scale, shift) -> Tensor:
    """Feature-wise modulation ``x * (1 + scale) + shift`` for NCHW ``x``.

    ``scale`` and ``shift`` are (N, C) and are applied per sample and channel.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4 or scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise DimensionError(f"channel_affine: x {x.shape}, scale {scale.shape}, shift {shift.shape}")
    s = 1.0 + scale.data[:, :, None, None]

    def backward(g):
        return g * s, (g * x.data).sum(axis=(2, 3)), g.sum(axis=(2, 3))
    out = x.data * s + shift.data[:, :, None, None]
    return make_node(out, (x, scale, shift), backward, "channel_affine")


# -- spatial ops ---------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Columns laid out (C*kh*kw, N*H*W) so every copy moves contiguous rows."""
    N, C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xpt = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))).transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, N, H, W), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + H, j:j + W]
    return cols.reshape(C * kh * kw, N * H * W)


def _col2im(dcols: np.ndarray, N: int, C: int, H: int, W: int, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    d6 = dcols.reshape(C, kh, kw, N, H, W)
    dxp = np.zeros((C, N, H + kh - 1, W + kw - 1), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + H, j:j + W] += d6[:, i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3))


def conv2d(x, kernel, bias) -> Tensor:
    """Same-padded 2-D cross-correlation. x: NCHW, kernel: OIHW, bias: O."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    N, C, H, W = x.shape
    O, I, kh, kw = kernel.shape
    if I != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {I}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel spatial size must be odd, got {kh}x{kw}")
    if bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({O},)")
    cols = _im2col(x.data, kh, kw)
    wmat = kernel.data.reshape(O, -1)
    out = wmat @ cols + bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, N, H, W).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        dk = (g2 @ cols.T).reshape(kernel.shape)
        db = g2.sum(axis=1)
        dx = _col2im(wmat.T @ g2, N, C, H, W, kh, kw) if x.requires_grad else None
        return dx, dk, db
    return make_node(out, (x, kernel, bias), backward, "conv2d")


def avg_pool2(x) -> Tensor:
    """2x2 mean pooling with stride 2 on NCHW input."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)
    return make_node(out, (x,), backward, "avg_pool2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling on NCHW input."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)
    return make_node(out, (x,), backward, "upsample2")
