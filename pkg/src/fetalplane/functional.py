"""Differentiable neural-network primitives built on :mod:`fetalplane.tensor`.

Images are laid out ``[B, C, H, W]``.  Convolutions gather patches into a
column matrix and reuse ``np.matmul``; the backward pass scatters column
gradients back with strided adds.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _as_tensor

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "batchnorm2d",
    "activation",
    "relu",
    "silu",
    "sigmoid",
    "softmax",
    "global_avg_pool2d",
    "max_pool2d",
    "dropout",
    "linear",
    "upsample_bilinear",
    "bilinear_matrix",
    "same_padding",
    "conv_output_size",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def same_padding(kernel: int, stride: int, size: int) -> tuple[int, int]:
    """(before, after) padding that yields ``ceil(size / stride)`` outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, pad_total: int) -> int:
    return (size + pad_total - kernel) // stride + 1


def _resolve_padding(padding, kh: int, kw: int, stride: int, H: int, W: int):
    if padding == "same":
        return same_padding(kh, stride, H), same_padding(kw, stride, W)
    if padding == "valid":
        return (0, 0), (0, 0)
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    raise ValueError(f"padding must be 'same', 'valid' or an int, got {padding!r}")


def _pad(x: np.ndarray, ph, pw) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), ph, pw))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """2-d cross-correlation, ``w`` shaped ``[C_out, C_in, kh, kw]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    C_out, C_in, kh, kw = w.shape
    if C != C_in:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, weight expects {C_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    ph, pw = _resolve_padding(padding, kh, kw, stride, H, W)
    xd, wd = x.data, w.data

    if kh == 1 and kw == 1 and ph == (0, 0) and pw == (0, 0):
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        Ho, Wo = xs.shape[2:]
        cols = xs.reshape(B, C, Ho * Wo)
        w2 = wd.reshape(C_out, C)
        out = np.matmul(w2, cols)

        def backward(g):
            g = g.reshape(B, C_out, Ho * Wo)
            gw = np.einsum("bop,bcp->oc", g, cols, optimize=True).reshape(wd.shape)
            gcols = np.matmul(w2.T, g).reshape(B, C, Ho, Wo)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gcols
            else:
                gx = gcols
            gb = g.sum(axis=(0, 2)) if bias is not None else None
            return gx, gw, gb

    else:
        xp = _pad(xd, ph, pw)
        Hp, Wp = xp.shape[2:]
        Ho = (Hp - kh) // stride + 1
        Wo = (Wp - kw) // stride + 1
        if Ho < 1 or Wo < 1:
            raise ValueError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # [B, C, kh, kw, Ho, Wo] -> [B, C*kh*kw, Ho*Wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)
        w2 = wd.reshape(C_out, C * kh * kw)
        out = np.matmul(w2, cols)

        def backward(g):
            g = g.reshape(B, C_out, Ho * Wo)
            gw = np.einsum("bop,bkp->ok", g, cols, optimize=True).reshape(wd.shape)
            gcols = np.matmul(w2.T, g).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, ph[0] : ph[0] + H, pw[0] : pw[0] + W]
            gb = g.sum(axis=(0, 2)) if bias is not None else None
            return gx, gw, gb

    out = out.reshape(B, C_out, Ho, Wo)
    parents = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(1, C_out, 1, 1)
        parents = (x, w, bias)
        return Tensor._make(out, parents, backward, "conv2d")
    return Tensor._make(out, parents, lambda g: backward(g)[:2], "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding="same") -> Tensor:
    """Per-channel convolution, ``w`` shaped ``[C, 1, kh, kw]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    B, C, H, W = x.shape
    if w.ndim != 4 or w.shape[0] != C or w.shape[1] != 1:
        raise ValueError(f"depthwise weight must be [{C}, 1, kh, kw], got {w.shape}")
    kh, kw = w.shape[2:]
    ph, pw = _resolve_padding(padding, kh, kw, stride, H, W)
    xp = _pad(x.data, ph, pw)
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    wd = w.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] * wd[:, i, j].reshape(1, C, 1, 1)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, patch, optimize=True)
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * wd[:, i, j].reshape(1, C, 1, 1)
        gx = gxp[:, :, ph[0] : ph[0] + H, pw[0] : pw[0] + W]
        return gx, gw[:, None]

    return Tensor._make(out, (x, w), backward, "depthwise_conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over (B, H, W) per channel.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm parameters must have length {C}")
    xd = x.data
    shape = (1, C, 1, 1)
    g_ = gamma.data.reshape(shape)

    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
        n = xd.size // C

        def backward(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = (g_ * inv.reshape(shape) / n) * (n * g - gb.reshape(shape) - xhat * gg.reshape(shape))
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(running_var.astype(xd.dtype) + eps)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(shape)) * inv.reshape(shape)

        def backward(g):
            return g * g_ * inv.reshape(shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * g_ + beta.data.reshape(shape)
    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    return _as_tensor(x).relu()


def silu(x: Tensor) -> Tensor:
    return _as_tensor(x).silu()


def sigmoid(x: Tensor) -> Tensor:
    return _as_tensor(x).sigmoid()


_ACTIVATIONS = {"relu": relu, "silu": silu, "swish": silu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


def global_avg_pool2d(x: Tensor, keepdims: bool = False) -> Tensor:
    """Mean over H and W; ``[B, C, H, W] -> [B, C]`` (or ``[B, C, 1, 1]``)."""
    return _as_tensor(x).mean(axis=(2, 3), keepdims=keepdims)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    x = _as_tensor(x)
    stride = stride or window
    B, C, H, W = x.shape
    if window > H or window > W:
        raise ValueError(f"pool window {window} exceeds spatial dims {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, window)
        rows = np.arange(Ho).reshape(1, 1, Ho, 1) * stride + di
        cols = np.arange(Wo).reshape(1, 1, 1, Wo) * stride + dj
        bi = np.arange(B).reshape(B, 1, 1, 1)
        ci = np.arange(C).reshape(1, C, 1, 1)
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""
    out = _as_tensor(x) @ weight
    return out + bias if bias is not None else out


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """``[out_size, in_size]`` interpolation weights, half-pixel (align-corners-false) mapping."""
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be positive")
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes (align-corners-false)."""
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = Tensor(bilinear_matrix(h, out_h))
    aw = Tensor(bilinear_matrix(w, out_w).T)
    return ah @ x @ aw
