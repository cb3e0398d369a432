"""Neural primitives composed by the encoders, attention, gating and decoder."""

import logging
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import ShapeError
from app.tensorcore.tensor import Tensor

logger = logging.getLogger(__name__)


def _as_tensor(x: Union[Tensor, np.ndarray], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of a CxHxW input with an OxCxKhxKw kernel.

    Args:
        x: Input feature map (C, H, W)
        weight: Kernel (O, C, Kh, Kw)
        bias: Optional bias (O,)
        stride: Step between output positions (>= 1)
        padding: Zero padding on every side (>= 0)

    Returns:
        Output (O, H', W') with H' = (H + 2*padding - Kh) // stride + 1

    Raises:
        ShapeError: On channel mismatch, an even or non-square kernel or an empty output
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW input and OxCxKxK weight, got {x.shape} and {weight.shape}")
    C, H, W = x.shape
    O, Cw, Kh, Kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if Kh != Kw or Kh % 2 == 0:
        raise ShapeError(f"conv2d needs a square kernel with odd side, got {Kh}x{Kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < Kh or Wp < Kw:
        raise ShapeError(f"conv2d kernel {Kh}x{Kw} larger than padded input {Hp}x{Wp}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (Kh, Kw), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = cols.shape[1], cols.shape[2]
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.tensordot(weight.data, g, axes=([0], [0]))
            dxp = np.zeros_like(xp)
            for i in range(Kh):
                for j in range(Kw):
                    dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            gx = dxp[:, padding:padding + H, padding:padding + W]
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._result(out.astype(x.data.dtype, copy=False), parents, backward)


def bilinear_sample(features: Tensor, grid: Union[Tensor, np.ndarray]) -> Tensor:
    """Sample a CxHxW map at normalized grid positions with border clamping.

    Grid coordinates are (x, y) in [-1, 1]; (-1, -1) is the top-left pixel
    centre and (1, 1) the bottom-right one.

    Args:
        features: Feature map (C, H, W)
        grid: Sampling positions (H', W', 2)

    Returns:
        Sampled map (C, H', W')
    """
    grid = _as_tensor(grid)
    if features.ndim != 3:
        raise ShapeError(f"bilinear_sample expects CxHxW features, got {features.shape}")
    if grid.ndim != 3 or grid.shape[2] != 2:
        raise ShapeError(f"bilinear_sample expects an H'xW'x2 grid, got {grid.shape}")
    C, H, W = features.shape
    Ho, Wo = grid.shape[:2]
    dtype = features.data.dtype

    gx = grid.data[..., 0].astype(np.float64)
    gy = grid.data[..., 1].astype(np.float64)
    px_raw = (gx + 1.0) * 0.5 * (W - 1)
    py_raw = (gy + 1.0) * 0.5 * (H - 1)
    px = np.clip(px_raw, 0, W - 1)
    py = np.clip(py_raw, 0, H - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (px - x0).astype(dtype)
    wy = (py - y0).astype(dtype)

    f = features.data
    v00 = f[:, y0, x0]
    v01 = f[:, y0, x1]
    v10 = f[:, y1, x0]
    v11 = f[:, y1, x1]
    out = (v00 * ((1 - wx) * (1 - wy)) + v01 * (wx * (1 - wy))
           + v10 * ((1 - wx) * wy) + v11 * (wx * wy))

    def backward(g):
        gf = ggrid = None
        if features.requires_grad:
            HW = H * W
            offsets = (np.arange(C) * HW)[:, None]
            total = np.zeros(C * HW, dtype=np.float64)
            for yy, xx, w in (
                (y0, x0, (1 - wx) * (1 - wy)),
                (y0, x1, wx * (1 - wy)),
                (y1, x0, (1 - wx) * wy),
                (y1, x1, wx * wy),
            ):
                idx = (offsets + (yy * W + xx).reshape(1, -1)).reshape(-1)
                total += np.bincount(idx, weights=(g * w).reshape(-1), minlength=C * HW)
            gf = total.reshape(C, H, W).astype(dtype)
        if grid.requires_grad:
            dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * g
            dy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx) * g
            inside_x = (px_raw >= 0) & (px_raw <= W - 1)
            inside_y = (py_raw >= 0) & (py_raw <= H - 1)
            ggrid = np.stack(
                [dx.sum(axis=0) * 0.5 * (W - 1) * inside_x,
                 dy.sum(axis=0) * 0.5 * (H - 1) * inside_y],
                axis=-1,
            )
        return gf, ggrid

    return Tensor._result(out.astype(dtype, copy=False), (features, grid), backward)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if logits.size == 0:
        raise ShapeError("softmax needs at least one element")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (logits,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, stable for large |x|."""
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype, copy=False)
    return Tensor._result(s, (x,), lambda g: (g * s * (1 - s),))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return Tensor._result(np.where(active, x.data, 0).astype(x.data.dtype, copy=False), (x,),
                          lambda g: (g * active,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * sign,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping average pooling of a CxHxW map; remainder rows/cols are dropped."""
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2d expects CxHxW, got {x.shape}")
    C, H, W = x.shape
    Ho, Wo = H // factor, W // factor
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"avg_pool2d factor {factor} too large for {H}x{W}")
    cropped = x.data[:, :Ho * factor, :Wo * factor]
    out = cropped.reshape(C, Ho, factor, Wo, factor).mean(axis=(2, 4))

    def backward(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / (factor * factor)
        full[:, :Ho * factor, :Wo * factor] = spread
        return (full,)

    return Tensor._result(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest expects CxHxW, got {x.shape}")
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)),)

    return Tensor._result(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (channel concatenation for CxHxW maps)."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack shape mismatch: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return Tensor._result(out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))
