"""Spatial kernels: 2-D convolution, pooling, batch normalization.

All inputs are NCHW.  Convolution is cross-correlation (no kernel flip),
lowered to a grouped column matrix so one batched BLAS matmul serves
normal, grouped, and depthwise layers alike.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from . import macs
from .tensor import Tensor, _make_output, active_tape, as_tensor


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
                 ho: int, wo: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, Ho, Wo) view over a padded NCHW array."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, c, kh, kw, ho, wo)
    strides = (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)


def _scatter_windows(grad_win: np.ndarray, padded_shape, kh: int, kw: int,
                     stride: int, dilation: int) -> np.ndarray:
    """Overlap-add window gradients back into a padded-input gradient."""
    _, _, _, _, ho, wo = grad_win.shape
    out = np.zeros(padded_shape, dtype=grad_win.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            out[:, :, hi:hi + ho * stride:stride, wj:wj + wo * stride:stride] += grad_win[:, :, i, j]
    return out


def conv2d(x, weight, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``weight`` has shape (C_out, C_in/groups, kh, kw).  Output spatial size
    follows floor((H + 2p - d*(k-1) - 1)/s) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} / {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if stride < 1 or dilation < 1 or kh < 1 or kw < 1:
        raise ConfigError(f"conv2d needs stride/dilation/kernel >= 1, got s={stride} d={dilation} k=({kh},{kw})")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"conv2d channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(f"conv2d weight expects {c_in_g} input channels per group, input provides {c_in // groups}")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}, kernel ({kh},{kw}), "
                         f"stride {stride}, padding {padding}, dilation {dilation}")

    g, cg, cog = groups, c_in // groups, c_out // groups
    kk = kh * kw
    length = ho * wo
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, g, cg, length)
        xp_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = _window_view(xp, kh, kw, stride, dilation, ho, wo)
        # (N, C, kh, kw, Ho, Wo) -> (N, G, Cg*kk, L); the copy makes the
        # batched matmul below run on contiguous memory
        cols = np.ascontiguousarray(win).reshape(n, g, cg * kk, length)
        xp_shape = xp.shape
    wmat = weight.data.reshape(g, cog, cg * kk)
    out = np.matmul(wmat, cols)                     # (N, G, Cog, L)
    out = out.reshape(n, c_out, ho, wo)
    if macs.counting_active():
        macs.add_macs(n * c_out * ho * wo * cg * kh * kw)

    def bwd(grad):
        gmat = grad.reshape(n, g, cog, length)
        grad_w = np.matmul(gmat, cols.transpose(0, 1, 3, 2)).sum(axis=0)
        grad_w = grad_w.reshape(c_out, cg, kh, kw).astype(weight.dtype, copy=False)
        grad_cols = np.matmul(wmat.transpose(0, 2, 1), gmat)     # (N, G, Cg*kk, L)
        if xp_shape is None:
            gx = grad_cols.reshape(n, c_in, h, w)
        else:
            grad_win = grad_cols.reshape(n, c_in, kh, kw, ho, wo)
            gxp = _scatter_windows(grad_win, xp_shape, kh, kw, stride, dilation)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return np.ascontiguousarray(gx, dtype=x.dtype), grad_w

    return _make_output(np.ascontiguousarray(out), (x, weight), bwd)


def pool2d(x, kind: str, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling; ``avg`` excludes padded zeros from divisors."""
    x = as_tensor(x)
    if kind not in ("max", "avg"):
        raise ConfigError(f"pool2d kind must be 'max' or 'avg', got {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects NCHW, got {x.shape}")
    if k < 1 or stride < 1:
        raise ConfigError(f"pool2d needs k/stride >= 1, got k={k} stride={stride}")
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"pool window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)
    needs_grad = active_tape() is not None and x.requires_grad

    if kind == "max":
        fill = -np.inf if padding else 0.0
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=fill)
        win = _window_view(xp, k, k, stride, 1, ho, wo)
        if not needs_grad:
            return _make_output(np.ascontiguousarray(win.max(axis=(2, 3))), (x,), None)
        # contiguous (N, C, Ho, Wo, k*k) makes the argmax an inner reduction
        winc = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, ho, wo, k * k)
        idx = winc.argmax(axis=-1)
        out = np.take_along_axis(winc, idx[..., None], axis=-1)[..., 0]

        def bwd(grad):
            gwin = np.zeros((n, c, ho, wo, k * k), dtype=x.dtype)
            np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
            gwin = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 4, 5, 2, 3)
            gxp = _scatter_windows(gwin, xp.shape, k, k, stride, 1)
            return (gxp[:, :, padding:padding + h, padding:padding + w].copy(),)

        return _make_output(np.ascontiguousarray(out), (x,), bwd)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _window_view(xp, k, k, stride, 1, ho, wo)
    if padding:
        ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype),
                      ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        counts = _window_view(ones, k, k, stride, 1, ho, wo).sum(axis=(2, 3))
    else:
        counts = np.full((1, 1, ho, wo), float(k * k), dtype=x.dtype)
    out = win.sum(axis=(2, 3)) / counts

    def bwd(grad):
        share = (grad / counts)[:, :, None, None]
        gwin = np.broadcast_to(share, (n, c, k, k, ho, wo)).astype(x.dtype, copy=False)
        gxp = _scatter_windows(gwin, xp.shape, k, k, stride, 1)
        return (gxp[:, :, padding:padding + h, padding:padding + w].copy(),)

    return _make_output(np.ascontiguousarray(out.astype(x.dtype, copy=False)), (x,), bwd)


def batchnorm(x, running_mean: np.ndarray, running_var: np.ndarray,
              gamma=None, beta=None, training: bool = True,
              momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-wise batch normalization over NCHW.

    Training mode normalizes with batch statistics and updates the running
    arrays in place (exponential moving average, unbiased variance); eval
    mode normalizes with the running statistics.  ``gamma``/``beta`` are
    optional affine tensors of shape (C,).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm running stats must have shape ({c},)")
    affine = gamma is not None
    axes = (0, 2, 3)
    m = n * h * w

    if training:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu[None, :, None, None]
        var = np.mean(xc * xc, axis=axes)
        istd = 1.0 / np.sqrt(var + eps)
        xhat = xc * istd[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        istd = 1.0 / np.sqrt(running_var + eps)
        xhat = ((x.data - running_mean[None, :, None, None]) * istd[None, :, None, None]).astype(x.dtype, copy=False)

    if affine:
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        inputs = (x, gamma, beta)
    else:
        out = xhat
        inputs = (x,)

    def bwd(grad):
        gxhat = grad * gamma.data[None, :, None, None] if affine else grad
        if training:
            sum_g = gxhat.sum(axis=axes)
            sum_gx = (gxhat * xhat).sum(axis=axes)
            gx = (istd[None, :, None, None] / m) * (
                m * gxhat - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None]
            )
        else:
            gx = gxhat * istd[None, :, None, None]
        gx = gx.astype(x.dtype, copy=False)
        if affine:
            ggamma = (grad * xhat).sum(axis=axes).astype(x.dtype, copy=False)
            gbeta = grad.sum(axis=axes).astype(x.dtype, copy=False)
            return gx, ggamma, gbeta
        return (gx,)

    return _make_output(np.ascontiguousarray(out.astype(x.dtype, copy=False)), inputs, bwd)
