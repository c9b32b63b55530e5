"""Dense float64 kernels for (C, H, W) feature maps.

Every function also accepts a leading batch axis, i.e. (N, C, H, W), and
returns a result with the same batching as its input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a rank-3 or rank-4 array, got shape {x.shape}")


def _unbatch(x, single):
    return x[0] if single else x


@dataclass
class FilterBank:
    """Convolution weights of shape (out, in, kh, kw) plus a bias per output.

    ``stride`` is the upsampling factor when the bank is used top-down.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError("bias length must equal out_channels")
        if self.stride not in (1, 2, 4):
            raise ValueError(f"stride must be 1, 2 or 4, got {self.stride}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    def copy(self) -> "FilterBank":
        return FilterBank(self.weights.copy(), self.bias.copy(), self.stride)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def conv2d(x, f: FilterBank, padding: int = 0):
    """Stride-1 cross-correlation with zero padding."""
    xb, single = _as_batch(x)
    if xb.shape[1] != f.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, filter expects {f.in_channels}")
    p = int(padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    oh = xp.shape[2] - f.kernel_h + 1
    ow = xp.shape[3] - f.kernel_w + 1
    if oh < 1 or ow < 1:
        raise ShapeError("kernel larger than padded input")
    win = sliding_window_view(xp, (f.kernel_h, f.kernel_w), axis=(2, 3))
    out = np.tensordot(win, f.weights, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + f.bias[None, :, None, None]
    return _unbatch(np.ascontiguousarray(out), single)


def conv2d_grad(x, f: FilterBank, padding: int, grad_out):
    """Gradients of ``conv2d(x, f, padding)`` w.r.t. weights, bias and input."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    p = int(padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = gb.shape[2], gb.shape[3]
    win = sliding_window_view(xp, (f.kernel_h, f.kernel_w), axis=(2, 3))
    grad_w = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = gb.sum(axis=(0, 2, 3))
    gxp = np.zeros_like(xp)
    for i in range(f.kernel_h):
        for j in range(f.kernel_w):
            contrib = np.tensordot(gb, f.weights[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i:i + oh, j:j + ow] += contrib.transpose(0, 3, 1, 2)
    gx = gxp[:, :, p:p + xb.shape[2], p:p + xb.shape[3]]
    return grad_w, grad_b, _unbatch(np.ascontiguousarray(gx), single)


def _tconv_padding(f: FilterBank):
    ph, pw = f.kernel_h - f.stride, f.kernel_w - f.stride
    if ph < 0 or pw < 0 or ph % 2 or pw % 2:
        raise ShapeError(
            f"kernel {f.kernel_h}x{f.kernel_w} incompatible with stride {f.stride}"
        )
    return ph // 2, pw // 2


def _tconv_full(xb, f: FilterBank):
    n, _, h, w = xb.shape
    s = f.stride
    full = np.zeros((n, f.out_channels, (h - 1) * s + f.kernel_h, (w - 1) * s + f.kernel_w))
    # (n, h, w, out, kh, kw)
    contrib = np.tensordot(xb, f.weights, axes=([1], [1]))
    for i in range(f.kernel_h):
        for j in range(f.kernel_w):
            full[:, :, i:i + s * h:s, j:j + s * w:s] += contrib[..., i, j].transpose(0, 3, 1, 2)
    return full


def transposed_conv2d(x, f: FilterBank):
    """Fractionally strided convolution; output spatial size is input size times stride.

    The full scatter-add result is cropped symmetrically by
    ``(kernel - stride) / 2``. With stride 1 this is ``conv2d`` with spatially
    flipped kernels and the same padding.
    """
    xb, single = _as_batch(x)
    if xb.shape[1] != f.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, filter expects {f.in_channels}")
    ph, pw = _tconv_padding(f)
    full = _tconv_full(xb, f)
    h, w = xb.shape[2] * f.stride, xb.shape[3] * f.stride
    out = full[:, :, ph:ph + h, pw:pw + w] + f.bias[None, :, None, None]
    return _unbatch(np.ascontiguousarray(out), single)


def topdown_conv_grad(upper, f: FilterBank, grad_out):
    """Backpropagate through ``relu(transposed_conv2d(upper, f))``.

    ``grad_out`` is the gradient w.r.t. the ReLU output (before any spatial
    offset; undo an offset with the opposite ``apply_offset`` first). The
    ReLU subgradient at zero is zero.

    Returns
    -------
    grad_weights, grad_bias, grad_upper
    """
    xb, single = _as_batch(upper)
    gb, _ = _as_batch(grad_out)
    if xb.shape[1] != f.in_channels:
        raise ShapeError("upper tensor does not match filter input channels")
    ph, pw = _tconv_padding(f)
    s = f.stride
    n, _, h, w = xb.shape
    if gb.shape != (n, f.out_channels, h * s, w * s):
        raise ShapeError(f"grad_out shape {gb.shape} does not match top-down output")
    pre = transposed_conv2d(xb, f)
    gz = np.where(pre > 0.0, gb, 0.0)
    grad_b = gz.sum(axis=(0, 2, 3))
    gfull = np.zeros((n, f.out_channels, (h - 1) * s + f.kernel_h, (w - 1) * s + f.kernel_w))
    gfull[:, :, ph:ph + h * s, pw:pw + w * s] = gz
    grad_w = np.empty_like(f.weights)
    gx = np.zeros_like(xb)
    for i in range(f.kernel_h):
        for j in range(f.kernel_w):
            gs = gfull[:, :, i:i + s * h:s, j:j + s * w:s]
            grad_w[:, :, i, j] = np.tensordot(gs, xb, axes=([0, 2, 3], [0, 2, 3]))
            gx += np.tensordot(gs, f.weights[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    return grad_w, grad_b, _unbatch(gx, single)


def _pool_view(xb):
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {h}x{w}")
    return xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )


def maxpool2(x):
    """2x2 non-overlapping max pooling."""
    xb, single = _as_batch(x)
    return _unbatch(_pool_view(xb).max(axis=-1), single)


def maxpool2_grad(x, grad_out):
    """Route ``grad_out`` to the first maximal element of each 2x2 window."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    view = _pool_view(xb)
    idx = view.argmax(axis=-1)[..., None]
    g = np.zeros_like(view)
    np.put_along_axis(g, idx, gb[..., None], axis=-1)
    n, c, h, w, _ = g.shape
    g = g.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(xb.shape)
    return _unbatch(g, single)


def apply_offset(x, dy: int, dx: int):
    """Translate every channel by (dy, dx) pixels, filling vacated cells with 0."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    dy, dx = int(dy), int(dx)
    if abs(dy) > h or abs(dx) > w:
        raise ShapeError(f"offset ({dy}, {dx}) exceeds spatial size {h}x{w}")
    out = np.zeros_like(x)
    if abs(dy) == h or abs(dx) == w:
        return out
    out[..., max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = x[
        ..., max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)
    ]
    return out


def apply_offsets(x, offsets):
    """Per-example ``apply_offset`` over a batch; ``offsets`` is a sequence of (dy, dx)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = apply_offset(x[i], dy, dx)
    return out
