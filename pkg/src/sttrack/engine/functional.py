"""Fused layer primitives with hand-written adjoints."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _result, reshape

NORM_EPS = 1e-5


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, back, "linear")


def _pad(arr: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return arr
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zeros":
        return np.pad(arr, widths)
    if mode == "circular":
        return np.pad(arr, widths, mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def _fold_circular(gp: np.ndarray, pad: int, h: int, w: int) -> np.ndarray:
    rows = gp[:, :, pad : pad + h, :].copy()
    rows[:, :, h - pad :, :] += gp[:, :, :pad, :]
    rows[:, :, :pad, :] += gp[:, :, pad + h :, :]
    out = rows[:, :, :, pad : pad + w].copy()
    out[:, :, :, w - pad :] += rows[:, :, :, :pad]
    out[:, :, :, :pad] += rows[:, :, :, pad + w :]
    return out


def _col2im(gcols: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Scatter-add (n, c, kh, kw, ho, wo) column gradients back onto the padded input."""
    n, c, kh, kw, ho, wo = gcols.shape
    if stride == 1:
        gp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
        return gp
    # split rows and columns by phase so every add hits a dense block
    hq, wq = -(-hp // stride), -(-wp // stride)
    buf = np.zeros((n, c, stride, stride, hq, wq), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            a, b = i // stride, j // stride
            buf[:, :, i % stride, j % stride, a : a + ho, b : b + wo] += gcols[:, :, i, j]
    gp = buf.transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hq * stride, wq * stride)
    return gp[:, :, :hp, :wp]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """2-D cross-correlation on (N, C, H, W) or (C, H, W) input via im2col."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding, padding_mode)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernels, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid conv2d geometry: stride={stride}, padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if padding_mode == "circular" and padding > min(h, w):
        raise ValueError("circular padding wider than the input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = _pad(x.data, padding, padding_mode)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # columns laid out (n, c*kh*kw, ho*wo) so the product lands directly in NCHW order
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def back(g):
        g3 = np.ascontiguousarray(g).reshape(n, o, ho * wo)
        gw = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(n, c, kh, kw, ho, wo)
            gp = _col2im(gcols, stride, hp, wp)
            if padding == 0:
                gx = gp
            elif padding_mode == "circular":
                gx = _fold_circular(gp, padding, h, w)
            else:
                gx = gp[:, :, padding : padding + h, padding : padding + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, back, "conv2d")


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, axes: tuple) -> np.ndarray:
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return rstd * (g_hat - m1 - xhat * m2)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Normalize each slice along ``axis`` to zero mean, unit variance, then apply gain/bias.

    The variance is floored at ``eps`` so constant slices map to zero.
    """
    axis = axis % x.ndim
    if x.shape[axis] < 1:
        raise ValueError("layer_norm axis has zero extent")
    d = x.data.astype(np.float64)
    mu = d.mean(axis=axis, keepdims=True)
    var = ((d - mu) ** 2).mean(axis=axis, keepdims=True)
    floored = var < eps
    rstd = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = ((d - mu) * rstd).astype(x.dtype)
    rstd = rstd.astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    out = xhat
    if gain is not None:
        out = out * gain.data.reshape(shape)
    if bias is not None:
        out = out + bias.data.reshape(shape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        grads = []
        g_hat = g * gain.data.reshape(shape) if gain is not None else g
        if x.requires_grad:
            gx = _normalize_backward(g_hat, xhat, rstd, (axis,))
            if floored.any():
                # flat slices: rstd is a constant, variance path is cut
                flat_gx = rstd * (g_hat - g_hat.mean(axis=axis, keepdims=True))
                gx = np.where(floored, flat_gx, gx)
            grads.append(gx)
        else:
            grads.append(None)
        if gain is not None:
            grads.append((g * xhat).sum(axis=other).reshape(gain.shape) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=other).reshape(bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    parents = tuple(t for t in (x, gain, bias) if t is not None)
    return _result(out.astype(x.dtype), parents, back, "layer_norm")


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-channel normalization of (N, C, H, W) input.

    In training mode batch statistics are used and the running buffers are
    updated in place. Otherwise the stored statistics are used and nothing
    is written.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects NCHW input, got {x.shape}")
    axes = (0, 2, 3)
    cshape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
        centered = x.data - mu.astype(x.dtype)
        var = np.mean(centered * centered, axis=axes, keepdims=True, dtype=np.float64)
        count = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        rstd = (1.0 / np.sqrt(np.maximum(var, eps))).astype(x.dtype)
        xhat = centered * rstd
    else:
        rstd = (1.0 / np.sqrt(np.maximum(running_var, eps))).astype(x.dtype).reshape(cshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(cshape)) * rstd
    out = xhat * weight.data.reshape(cshape) + bias.data.reshape(cshape)

    def back(g):
        gx = None
        if x.requires_grad:
            g_hat = g * weight.data.reshape(cshape)
            gx = _normalize_backward(g_hat, xhat, rstd, axes) if training else g_hat * rstd
        gw = (g * xhat).sum(axis=axes) if weight.requires_grad else None
        gb = g.sum(axis=axes) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out.astype(x.dtype), (x, weight, bias), back, "batch_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
