"""Quality metrics for pan-sharpening.

Reduced-resolution (full-reference): ERGAS, SAM, SCC, PSNR, SSIM and the
hypercomplex universal quality index Q2^n. Full-resolution (no-reference):
spectral distortion D_lambda (via Q2^n against the degraded fusion), spatial
distortion D_s (via per-band UQI against the PAN), and their hybrid product
HQNR = (1 - D_lambda)(1 - D_s).

All functions take single images as [C,H,W] arrays (or tensors) in [0,1] and
compute in float64. Metrics that cannot be computed (e.g. an all-zero
reference band for ERGAS) are reported as undefined rather than raising.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .constants import (EPS, PSNR_CAP_DB, Q_BLOCK, RESOLUTION_RATIO,
                        SCC_KERNEL, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW)
from .data import mtf_degrade


@dataclass
class MetricReport:
    """Named metric values for one image (or one image set after aggregation)."""

    values: dict[str, float] = field(default_factory=dict)
    undefined: list[str] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> dict:
        return {"values": dict(self.values), "undefined": list(self.undefined)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def aggregate(reports: list[MetricReport]) -> dict:
    """Mean and std per metric across a set, skipping undefined entries."""
    keys = sorted({k for r in reports for k in r.values})
    out = {}
    for k in keys:
        vals = [r.values[k] for r in reports if k in r.values and np.isfinite(r.values[k])]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                      "count": len(vals)}
    return out


def _image(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a [C,H,W] image, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# full-reference pieces


def _ergas(fused, gt, ratio):
    means = gt.mean(axis=(1, 2))
    if np.any(means == 0):
        return None
    mse = ((fused - gt) ** 2).mean(axis=(1, 2))
    return 100.0 / ratio * math.sqrt(float((mse / means**2).mean()))


def _sam_degrees(fused, gt):
    dot = (fused * gt).sum(axis=0)
    norms = np.sqrt((fused**2).sum(axis=0) * (gt**2).sum(axis=0))
    ok = norms > 0
    if not ok.any():
        return None
    cos = np.clip(dot[ok] / norms[ok], -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def _laplacian(band):
    return (4 * band[1:-1, 1:-1] - band[:-2, 1:-1] - band[2:, 1:-1]
            - band[1:-1, :-2] - band[1:-1, 2:])


def _scc(fused, gt):
    if gt.shape[1] < 3 or gt.shape[2] < 3:
        return None
    corrs = []
    for b in range(gt.shape[0]):
        hf = _laplacian(fused[b]).ravel()
        hg = _laplacian(gt[b]).ravel()
        vf, vg = hf - hf.mean(), hg - hg.mean()
        denom = math.sqrt(float((vf**2).sum() * (vg**2).sum()))
        if denom > 0:
            corrs.append(float((vf * vg).sum()) / denom)
    return float(np.mean(corrs)) if corrs else None


def _psnr(fused, gt):
    vals = []
    for b in range(gt.shape[0]):
        mse = float(((fused[b] - gt[b]) ** 2).mean())
        vals.append(min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / (mse + EPS))))
    return float(np.mean(vals))


def _gauss_window(n, sigma):
    t = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _win_filter(x, g):
    """Separable windowed weighted mean, valid region only."""
    v = sliding_window_view(x, len(g), axis=0)
    v = np.tensordot(v, g, axes=([2], [0]))
    v = sliding_window_view(v, len(g), axis=1)
    return np.tensordot(v, g, axes=([2], [0]))


def _ssim(fused, gt, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    if gt.shape[1] < window or gt.shape[2] < window:
        return None
    g = _gauss_window(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    vals = []
    for b in range(gt.shape[0]):
        x, y = fused[b], gt[b]
        mx, my = _win_filter(x, g), _win_filter(y, g)
        sxx = _win_filter(x * x, g) - mx * mx
        syy = _win_filter(y * y, g) - my * my
        sxy = _win_filter(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx**2 + my**2 + c1) * (sxx + syy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# hypercomplex universal quality index


def _cd_conj(x):
    out = -x.copy()
    out[..., 0] = x[..., 0]
    return out


def _cd_mult(x, y):
    """Cayley-Dickson product on trailing power-of-two axes:
    (a,b)(c,d) = (ac - d*b, da + bc*)."""
    n = x.shape[-1]
    if n == 1:
        return x * y
    h = n // 2
    a, b = x[..., :h], x[..., h:]
    c, d = y[..., :h], y[..., h:]
    return np.concatenate([_cd_mult(a, c) - _cd_mult(_cd_conj(d), b),
                           _cd_mult(d, a) + _cd_mult(b, _cd_conj(c))], axis=-1)


def _pad_pow2(img):
    c = img.shape[0]
    n = 1 << (c - 1).bit_length()
    if n == c:
        return img, False
    pad = np.zeros((n - c,) + img.shape[1:], dtype=img.dtype)
    return np.concatenate([img, pad], axis=0), True


def _blocks(h, w, block):
    if h < block or w < block:
        yield (0, h, 0, w)
        return
    for i in range(0, h - block + 1, block):
        for j in range(0, w - block + 1, block):
            yield (i, i + block, j, j + block)


def _q2n_block(ref, test):
    """Hypercomplex UQI of one block; rows are pixels, columns band components.

    The reference block's band statistics normalize both images (constant
    bands fall back to unit scale); the test image is conjugated so the
    Cayley-Dickson covariance plays the role of sigma_12.
    """
    n = ref.shape[0]
    m = ref.mean(axis=0)
    s = ref.std(axis=0, ddof=1)
    s = np.where(s < 1e-12, 1.0, s)
    zr = (ref - m) / s + 1.0
    zt = (test - m) / s + 1.0
    ztc = _cd_conj(zt)
    mr, mtc = zr.mean(axis=0), ztc.mean(axis=0)
    unbias = n / (n - 1.0)
    var_r = unbias * float((zr**2).sum(axis=-1).mean() - (mr**2).sum())
    var_t = unbias * float((zt**2).sum(axis=-1).mean() - (mtc**2).sum())
    cov = unbias * (_cd_mult(zr, ztc).mean(axis=0) - _cd_mult(mr, mtc))
    mod_r2, mod_t2 = float((mr**2).sum()), float((mtc**2).sum())
    mean_bias = 2.0 * math.sqrt(mod_r2 * mod_t2) / (mod_r2 + mod_t2)
    denom = var_r + var_t
    if denom < 1e-12:
        return mean_bias
    return mean_bias * 2.0 * float(np.sqrt((cov**2).sum())) / denom


def q2n(test, ref, block: int = Q_BLOCK) -> float:
    """Mean hypercomplex UQI over non-overlapping blocks (whole image when
    smaller than one block). Band counts are zero-padded to a power of two."""
    test, ref = _image(test), _image(ref)
    ref_p, _ = _pad_pow2(ref)
    test_p, _ = _pad_pow2(test)
    c, h, w = ref_p.shape
    vals = []
    for (i0, i1, j0, j1) in _blocks(h, w, block):
        r = ref_p[:, i0:i1, j0:j1].reshape(c, -1).T
        t = test_p[:, i0:i1, j0:j1].reshape(c, -1).T
        vals.append(_q2n_block(r, t))
    return float(np.mean(vals))


def uqi(a, b, block: int = Q_BLOCK) -> float:
    """Single-band universal quality index, averaged over aligned blocks."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"uqi expects two equal [H,W] bands, got {a.shape}, {b.shape}")
    vals = []
    for (i0, i1, j0, j1) in _blocks(*a.shape, block):
        x = a[i0:i1, j0:j1].ravel()
        y = b[i0:i1, j0:j1].ravel()
        mx, my = x.mean(), y.mean()
        sxx = x.var(ddof=1)
        syy = y.var(ddof=1)
        sxy = float(((x - mx) * (y - my)).sum()) / (x.size - 1)
        d_var, d_mu = sxx + syy, mx * mx + my * my
        if d_var < 1e-12 and d_mu < 1e-12:
            vals.append(1.0)
        elif d_var < 1e-12:
            vals.append(2.0 * mx * my / d_mu)
        elif d_mu < 1e-12:
            vals.append(2.0 * sxy / d_var)
        else:
            vals.append((4.0 * sxy * mx * my) / (d_var * d_mu))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# public reports


def reduced_metrics(fused, gt, ratio: int = RESOLUTION_RATIO) -> MetricReport:
    """Full-reference suite against a ground truth at the same resolution."""
    fused, gt = _image(fused), _image(gt)
    if fused.shape != gt.shape:
        raise ValueError(f"shape mismatch: fused {fused.shape} vs gt {gt.shape}")
    report = MetricReport()

    def put(name, value):
        if value is None or not np.isfinite(value):
            report.undefined.append(name)
            report.values[name] = float("nan")
        else:
            report.values[name] = float(value)

    put("ergas", _ergas(fused, gt, ratio))
    put("sam", _sam_degrees(fused, gt))
    put("scc", _scc(fused, gt))
    put("psnr", _psnr(fused, gt))
    put("ssim", _ssim(fused, gt))
    put("q2n", q2n(fused, gt))
    return report


def full_res_metrics(fused, ms_lr_orig, pan, ratio: int = RESOLUTION_RATIO) -> MetricReport:
    """No-reference suite from the original inputs.

    D_lambda compares the re-degraded fusion to the original MS with Q2^n;
    D_s compares each fused band's UQI against the PAN with the original MS
    band's UQI against the degraded PAN.
    """
    fused, ms, pan = _image(fused), _image(ms_lr_orig), _image(pan)
    if pan.shape[0] != 1:
        raise ValueError(f"pan must be single-band, got {pan.shape}")
    if fused.shape[1] != ms.shape[1] * ratio or fused.shape[0] != ms.shape[0]:
        raise ValueError(f"fused {fused.shape} inconsistent with ms {ms.shape} at ratio {ratio}")
    if fused.shape[1:] != pan.shape[1:]:
        raise ValueError(f"fused {fused.shape} inconsistent with pan {pan.shape}")
    report = MetricReport()

    fused_deg = mtf_degrade(fused, ratio)
    d_lambda = float(np.clip(1.0 - q2n(fused_deg, ms), 0.0, 1.0))

    pan_deg = mtf_degrade(pan, ratio)[0]
    diffs = [abs(uqi(fused[b], pan[0]) - uqi(ms[b], pan_deg)) for b in range(ms.shape[0])]
    d_s = float(np.clip(np.mean(diffs), 0.0, 1.0))

    report.values["d_lambda"] = d_lambda
    report.values["d_s"] = d_s
    report.values["hqnr"] = (1.0 - d_lambda) * (1.0 - d_s)
    return report
