"""Array-level layer primitives with hand-written backward passes.

All spatial ops use a channels-last (B, W, H, C) layout so the im2col GEMMs
run on contiguous memory.  Every forward returns (out, cache); the matching
backward takes (dout, cache) and returns dx plus parameter gradients.
Convolutions are 3x3 (zero-padded, stride 1 or 2) or 1x1.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

GN_EPS = 1e-5


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _im2col3(x: np.ndarray, stride: int) -> np.ndarray:
    """(B, W, H, C) -> (B, Wo, Ho, 9C) patches of the zero-padded input."""
    b, w, h, c = x.shape
    wo, ho = _conv_out_size(w, stride), _conv_out_size(h, stride)
    xp = np.empty((b, w + 2, h + 2, c), dtype=x.dtype)
    xp[:, 0] = 0
    xp[:, -1] = 0
    xp[:, :, 0] = 0
    xp[:, :, -1] = 0
    xp[:, 1 : w + 1, 1 : h + 1, :] = x
    cols = np.empty((b, wo, ho, 9 * c), dtype=x.dtype)
    for idx in range(9):
        a, bb = divmod(idx, 3)
        cols[..., idx * c : (idx + 1) * c] = xp[
            :, a : a + (wo - 1) * stride + 1 : stride, bb : bb + (ho - 1) * stride + 1 : stride, :
        ]
    return cols


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1):
    """kernel is (3, 3, Cin, Cout) or (1, 1, Cin, Cout)."""
    kw, kh, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ValidationError(f"conv input has {x.shape[-1]} channels, kernel expects {cin}")
    b, w, h, _ = x.shape
    if kw == 1:
        if stride != 1:
            raise ValidationError("1x1 conv only supports stride 1")
        out = x.reshape(-1, cin) @ kernel.reshape(cin, cout) + bias
        return out.reshape(b, w, h, cout), (x.shape, x, stride)
    cols = _im2col3(x, stride)
    out = cols.reshape(-1, 9 * cin) @ kernel.reshape(9 * cin, cout) + bias
    wo, ho = _conv_out_size(w, stride), _conv_out_size(h, stride)
    return out.reshape(b, wo, ho, cout), (x.shape, cols, stride)


def conv2d_backward(dout: np.ndarray, cache, kernel: np.ndarray):
    x_shape, patches, stride = cache
    kw, kh, cin, cout = kernel.shape
    b, w, h, _ = x_shape
    dflat = dout.reshape(-1, cout)
    db = dflat.sum(axis=0)
    if kw == 1:
        dk = (patches.reshape(-1, cin).T @ dflat).reshape(kernel.shape)
        dx = (dflat @ kernel.reshape(cin, cout).T).reshape(x_shape)
        return dx, dk, db
    dk = (patches.reshape(-1, 9 * cin).T @ dflat).reshape(kernel.shape)
    dcols = dflat @ kernel.reshape(9 * cin, cout).T
    wo, ho = dout.shape[1], dout.shape[2]
    dcols = dcols.reshape(b, wo, ho, 9 * cin)
    dxp = np.zeros((b, w + 2, h + 2, cin), dtype=dout.dtype)
    for idx in range(9):
        a, bb = divmod(idx, 3)
        dxp[
            :, a : a + (wo - 1) * stride + 1 : stride, bb : bb + (ho - 1) * stride + 1 : stride, :
        ] += dcols[..., idx * cin : (idx + 1) * cin]
    return dxp[:, 1 : w + 1, 1 : h + 1, :], dk, db


# ---------------------------------------------------------------------------
# group normalization

def norm_groups_for(channels: int, requested: int) -> int:
    g = min(requested, channels)
    if channels % g != 0:
        raise ValidationError(f"{channels} channels not divisible into {g} groups")
    return g


def groupnorm_forward(x: np.ndarray, scale: np.ndarray, offset: np.ndarray, n_groups: int):
    b, w, h, c = x.shape
    g = norm_groups_for(c, n_groups)
    xg = x.reshape(b, w, h, g, c // g)
    mean = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(GN_EPS, dtype=x.dtype))
    xhat = ((xg - mean) * inv_std).reshape(b, w, h, c)
    out = xhat * scale + offset
    return out, (xhat, inv_std, scale, g)


def groupnorm_backward(dout: np.ndarray, cache):
    xhat, inv_std, scale, g = cache
    b, w, h, c = dout.shape
    m = w * h * (c // g)
    dscale = (dout * xhat).sum(axis=(0, 1, 2))
    doffset = dout.sum(axis=(0, 1, 2))
    dxhat = (dout * scale).reshape(b, w, h, g, c // g)
    xhat_g = xhat.reshape(b, w, h, g, c // g)
    sum_dxhat = dxhat.sum(axis=(1, 2, 4), keepdims=True)
    sum_dxhat_x = (dxhat * xhat_g).sum(axis=(1, 2, 4), keepdims=True)
    dx = (inv_std / m) * (m * dxhat - sum_dxhat - xhat_g * sum_dxhat_x)
    return dx.reshape(b, w, h, c), dscale, doffset


# ---------------------------------------------------------------------------
# activations and linear

def silu_forward(x: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def silu_backward(dout: np.ndarray, cache):
    x, sig = cache
    return dout * (sig * (1.0 + x * (1.0 - sig)))


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    return x @ weight + bias, x


def linear_backward(dout: np.ndarray, cache, weight: np.ndarray):
    x = cache
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ weight.T
    return dx, dw, db


# ---------------------------------------------------------------------------
# bilinear 2x upsampling (half-pixel-center convention; edges clamped)

def _upsample_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, 1)
    prev = np.concatenate([x[:, :1], x[:, :-1]], axis=1)
    nxt = np.concatenate([x[:, 1:], x[:, -1:]], axis=1)
    shape = list(x.shape)
    shape[1] *= 2
    out = np.empty(shape, dtype=x.dtype)
    out[:, 0::2] = 0.75 * x + 0.25 * prev
    out[:, 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 1, axis)


def _upsample_axis_backward(dy: np.ndarray, axis: int) -> np.ndarray:
    dy = np.moveaxis(dy, axis, 1)
    de = dy[:, 0::2]
    do = dy[:, 1::2]
    dx = 0.75 * (de + do)
    dx[:, :-1] += 0.25 * de[:, 1:]
    dx[:, 0] += 0.25 * de[:, 0]
    dx[:, 1:] += 0.25 * do[:, :-1]
    dx[:, -1] += 0.25 * do[:, -1]
    return np.moveaxis(dx, 1, axis)


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    """(B, W, H, C) -> (B, 2W, 2H, C), separable bilinear interpolation."""
    return _upsample_axis(_upsample_axis(x, 1), 2)


def upsample2x_backward(dout: np.ndarray) -> np.ndarray:
    return _upsample_axis_backward(_upsample_axis_backward(dout, 2), 1)


# ---------------------------------------------------------------------------
# single-head spatial self-attention

def attention_forward(x: np.ndarray, wq, bq, wk, bk, wv, bv, wo, bo):
    b, w, h, c = x.shape
    n = w * h
    flat = x.reshape(b, n, c)
    q = flat @ wq + bq
    k = flat @ wk + bk
    v = flat @ wv + bv
    logits = (q @ k.transpose(0, 2, 1)) / np.sqrt(np.asarray(c, dtype=x.dtype))
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)
    ctx = attn @ v
    out = ctx @ wo + bo
    return out.reshape(b, w, h, c), (flat, q, k, v, attn, ctx)


def attention_backward(dout: np.ndarray, cache, wq, wk, wv, wo):
    flat, q, k, v, attn, ctx = cache
    b, w, h, c = dout.shape
    dflat_out = dout.reshape(b, -1, c)
    scale = 1.0 / np.sqrt(np.asarray(c, dtype=dout.dtype))

    dwo = np.einsum("bnc,bnd->cd", ctx, dflat_out)
    dbo = dflat_out.sum(axis=(0, 1))
    dctx = dflat_out @ wo.T

    dattn = dctx @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx
    dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (dlogits @ k) * scale
    dk = (dlogits.transpose(0, 2, 1) @ q) * scale

    dwq = np.einsum("bnc,bnd->cd", flat, dq)
    dwk = np.einsum("bnc,bnd->cd", flat, dk)
    dwv = np.einsum("bnc,bnd->cd", flat, dv)
    dbq = dq.sum(axis=(0, 1))
    dbk = dk.sum(axis=(0, 1))
    dbv = dv.sum(axis=(0, 1))
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx.reshape(b, w, h, c), (dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo)
