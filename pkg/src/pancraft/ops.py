"""Neural-net kernels on tensors: convolution, layer norm, softmax, resampling.

Each op is a single tape entry with a hand-written backward pass. Convolution
goes through an explicit im2col buffer and one batched GEMM; the buffer keeps
the (channel, tap) axis in front of the pixel axis so no transpose copies are
needed on either side of the matmul.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np

from .tensor import Tensor, _as_tensor, record


def _check_odd(k: int, what: str) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"{what} must be odd and >= 1, got {k}")


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, hout: int, wout: int) -> np.ndarray:
    """Padded input [B,C,Hp,Wp] -> columns [B, C*kh*kw, hout*wout].

    The tap axis sits between channel and pixel axes so each slice write is
    contiguous on the destination side and the reshape below is free.
    """
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh * kw, hout, wout), dtype=xp.dtype)
    for m in range(kh):
        for n in range(kw):
            cols[:, :, m * kw + n] = xp[:, :, m : m + stride * hout : stride,
                                        n : n + stride * wout : stride]
    return cols.reshape(b, c * kh * kw, hout * wout)


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int,
            hout: int, wout: int) -> np.ndarray:
    """Scatter-add column gradients back onto the input."""
    b, c, h, w = xshape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dwin = dcols.reshape(b, c, kh * kw, hout, wout)
    for m in range(kh):
        for n in range(kw):
            dxp[:, :, m : m + stride * hout : stride, n : n + stride * wout : stride] += dwin[:, :, m * kw + n]
    if pad == 0:
        return dxp
    return dxp[:, :, pad:-pad, pad:-pad]


def conv2d(x, w, b, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-d convolution, x:[B,Cin,H,W] w:[Cout,Cin,kh,kw] b:[Cout].

    `pad=None` means same-padding for stride 1 ((k-1)/2 per side). Output
    extents follow (H + 2*pad - kh)/stride + 1 and must come out integral.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    bs, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    _check_odd(kh, "kernel height")
    _check_odd(kw, "kernel width")
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels but kernel expects {cin_w}")
    if pad is None:
        pad = (kh - 1) // 2
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wd + 2 * pad - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ValueError(
            f"degenerate output extent for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")

    pointwise = kh == kw == 1 and pad == 0 and stride == 1
    if pointwise:
        cols = x.data.reshape(bs, cin, h * wd)
    else:
        cols = _im2col(_pad_hw(x.data, pad), kh, kw, stride, hout, wout)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat[None], cols)
    out += b.data[None, :, None]
    out = out.reshape(bs, cout, hout, wout)
    # the column buffer is rebuilt in backward rather than kept alive; this
    # bounds step memory by one buffer instead of one per recorded conv
    del cols

    from .tensor import active_tape, _tracked

    tape = active_tape()
    need_dx = tape is not None and _tracked(x, tape)

    def back(g):
        if pointwise:
            cols = x.data.reshape(bs, cin, h * wd)
        else:
            cols = _im2col(_pad_hw(x.data, pad), kh, kw, stride, hout, wout)
        gmat = g.reshape(bs, cout, hout * wout)
        db = gmat.sum(axis=(0, 2))
        # batched GEMM on views; tensordot would copy the column buffer
        dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        del cols
        if not need_dx:  # the input is a constant (e.g. the embedding input)
            return None, dw, db
        dcols = np.matmul(wmat.T[None], gmat)
        if pointwise:
            dx = dcols.reshape(x.shape)
        else:
            dx = _col2im(dcols, x.shape, kh, kw, stride, pad, hout, wout)
        return dx, dw, db

    return record(out, (x, w, b), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel's channel vector to zero mean / unit variance.

    x:[B,C,H,W], gamma/beta:[C]; the affine transform is applied channel-wise.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    gc = gamma.data[None, :, None, None]
    out = gc * y + beta.data[None, :, None, None]
    del xc, y, var  # backward rebuilds the normalized map from x, mu, inv

    def back(g):
        y = (x.data - mu) * inv
        dgamma = (g * y).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dy = g * gc
        dx = inv * (dy - dy.mean(axis=1, keepdims=True)
                    - y * (dy * y).mean(axis=1, keepdims=True))
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), back)


def softmax_lastdims(x) -> Tensor:
    """Softmax over the trailing two axes jointly, with max-subtraction.

    -inf scores are allowed (they get weight 0) as long as at least one
    entry per block is finite.
    """
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=(-2, -1), keepdims=True)

    def back(g):
        dot = (g * a).sum(axis=(-2, -1), keepdims=True)
        return (a * (g - dot),)

    return record(a, (x,), back)


def _unfold_taps(arr: np.ndarray, k: int) -> np.ndarray:
    """[..., H, W] -> [k*k, ..., H, W] of zero-padded neighborhoods.

    Tap-first layout keeps every slice write contiguous.
    """
    h, w = arr.shape[-2:]
    p = k // 2
    xp = np.zeros(arr.shape[:-2] + (h + 2 * p, w + 2 * p), dtype=arr.dtype)
    xp[..., p : p + h, p : p + w] = arr
    out = np.empty((k * k,) + arr.shape, dtype=arr.dtype)
    for m in range(k):
        for n in range(k):
            out[m * k + n] = xp[..., m : m + h, n : n + w]
    return out


def _fold_taps(g: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of `_unfold_taps`: scatter-add [k*k, ..., H, W] -> [..., H, W]."""
    h, w = g.shape[-2:]
    p = k // 2
    out = np.zeros(g.shape[1:-2] + (h + 2 * p, w + 2 * p), dtype=g.dtype)
    for m in range(k):
        for n in range(k):
            out[..., m : m + h, n : n + w] += g[m * k + n]
    return out[..., p : p + h, p : p + w] if p else out


def _unfold_raw(arr: np.ndarray, k: int) -> np.ndarray:
    """[..., H, W] -> [..., H, W, k, k] of zero-padded k x k neighborhoods."""
    taps = _unfold_taps(arr, k)
    return np.moveaxis(taps.reshape((k, k) + arr.shape), (0, 1), (-2, -1))


def _fold_raw(g: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of `_unfold_raw`: scatter-add [..., H, W, k, k] -> [..., H, W]."""
    taps = np.moveaxis(g, (-2, -1), (0, 1)).reshape((k * k,) + g.shape[:-2])
    return _fold_taps(taps, k)


def unfold_windows(x, k: int) -> Tensor:
    """Gather the k x k neighborhood of every pixel: [B,C,H,W] -> [B,C,H,W,k,k].

    Out-of-image neighbors are zero-filled; callers that need to exclude them
    apply `neighbor_bias` before a softmax.
    """
    x = _as_tensor(x)
    _check_odd(k, "window size")
    out = _unfold_raw(x.data, k)
    return record(out, (x,), lambda g: (_fold_raw(g, k),))


@lru_cache(maxsize=64)
def _neighbor_bias_cached(h: int, w: int, k: int, dtype_name: str) -> np.ndarray:
    p = k // 2
    ii = np.arange(h)[:, None, None, None]
    jj = np.arange(w)[None, :, None, None]
    mm = np.arange(k)[None, None, :, None] - p
    nn = np.arange(k)[None, None, None, :] - p
    valid = (ii + mm >= 0) & (ii + mm < h) & (jj + nn >= 0) & (jj + nn < w)
    bias = np.where(valid, 0.0, -np.inf).astype(dtype_name)
    bias.setflags(write=False)
    return bias


def neighbor_bias(h: int, w: int, k: int, dtype=np.float32) -> np.ndarray:
    """[H,W,k,k] additive mask: 0 for in-image neighbors, -inf outside."""
    return _neighbor_bias_cached(h, w, k, np.dtype(dtype).name)


# ---------------------------------------------------------------------------
# resampling


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom cubic kernel (a = -0.5)."""
    t = np.abs(t)
    w = np.zeros_like(t)
    m1 = t <= 1
    m2 = (t > 1) & (t < 2)
    w[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    w[m2] = a * (t[m2] ** 3 - 5 * t[m2] ** 2 + 8 * t[m2] - 4)
    return w


@lru_cache(maxsize=128)
def _resize_matrix(n_in: int, n_out: int, method: str, dtype_name: str) -> np.ndarray:
    """[n_out, n_in] row-stochastic-ish interpolation matrix, edge-clamped."""
    support = 1 if method == "bilinear" else 2
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        base = int(np.floor(center))
        taps = np.arange(base - support + 1, base + support + 1)
        t = center - taps
        wgt = np.maximum(0.0, 1.0 - np.abs(t)) if method == "bilinear" else _cubic_weight(t)
        for j, g in zip(taps, wgt):
            mat[o, min(max(j, 0), n_in - 1)] += g
    mat = mat.astype(dtype_name)
    mat.setflags(write=False)
    return mat


def _parse_factor(factor) -> Fraction:
    if isinstance(factor, tuple):
        f = Fraction(factor[0], factor[1])
    else:
        f = Fraction(factor).limit_denominator(4096)
    if f <= 0:
        raise ValueError(f"resample factor must be positive, got {factor}")
    return f


def resample(x, factor, method: str = "bicubic") -> Tensor:
    """Rescale [B,C,H,W] spatially by a rational factor.

    methods: nearest | bilinear | bicubic | avgpool. Down-sampling requires
    H and W divisible by the factor's denominator; avgpool only accepts pure
    1/n factors. All methods are differentiable.
    """
    x = _as_tensor(x)
    f = _parse_factor(factor)
    b, c, h, w = x.shape
    if f.denominator > 1 and (h % f.denominator or w % f.denominator):
        raise ValueError(f"extents {h}x{w} not divisible by denominator {f.denominator}")
    if f == 1:
        return record(x.data.copy(), (x,), lambda g: (g,))
    hout, wout = h * f.numerator // f.denominator, w * f.numerator // f.denominator

    if method == "avgpool":
        if f.numerator != 1:
            raise ValueError(f"avgpool is a pure down-sampler, got factor {f}")
        d = f.denominator
        out = x.data.reshape(b, c, hout, d, wout, d).mean(axis=(3, 5))

        def back(g):
            gg = np.broadcast_to(g[:, :, :, None, :, None] / (d * d),
                                 (b, c, hout, d, wout, d))
            return (gg.reshape(b, c, h, w).astype(g.dtype, copy=True),)

        return record(out, (x,), back)

    if method == "nearest":
        n, d = f.numerator, f.denominator
        out = x.data
        if n > 1:
            out = out.repeat(n, axis=2).repeat(n, axis=3)
        if d > 1:
            out = out[:, :, ::d, ::d]
        out = np.ascontiguousarray(out)

        def back(g):
            gg = g
            if d > 1:
                full = np.zeros((b, c, h * n, w * n), dtype=g.dtype)
                full[:, :, ::d, ::d] = gg
                gg = full
            if n > 1:
                gg = gg.reshape(b, c, h, n, w, n).sum(axis=(3, 5))
            return (gg,)

        return record(out, (x,), back)

    if method in ("bilinear", "bicubic"):
        mh = _resize_matrix(h, hout, method, x.dtype.name)
        mw = _resize_matrix(w, wout, method, x.dtype.name)
        t = np.matmul(x.data, mw.T)
        out = np.matmul(mh[None, None], t)

        def back(g):
            dt = np.matmul(mh.T[None, None], g)
            return (np.matmul(dt, mw),)

        return record(out, (x,), back)

    raise ValueError(f"unknown resample method {method!r}")
