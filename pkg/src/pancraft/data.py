"""Synthetic scenes, the reduced-resolution degradation protocol, patching,
augmentation, and dataset files.

A scene is a rendered multi-band ground truth plus a panchromatic image built
from a band-weighted sum of the *shifted* ground truth - the shift is the
injected cross-modality misalignment - with extra high-frequency texture that
only the PAN sensor sees. Everything is deterministic from the seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import pct
from .constants import (MAX_SHIFT, MTF_SIGMA, PATCH_MS, PATCH_PAN,
                        RESOLUTION_RATIO)
from .errors import DataError

SCENE_FORMAT = "pancraft-scene-v1"


@dataclass
class Scene:
    """Ground-truth pair: hrms [C,S,S] and pan [1,S,S], values in [0,1]."""

    hrms: np.ndarray
    pan: np.ndarray
    seed: int
    shift: tuple[float, float]  # (dx, dy) in PAN pixels

    @property
    def bands(self) -> int:
        return self.hrms.shape[0]

    @property
    def size(self) -> int:
        return self.hrms.shape[1]


@dataclass
class Triplet:
    """One training sample: pan [1,64,64], ms [C,16,16], ms_hr [C,64,64].

    ms_hr is None for full-resolution samples, where no ground truth exists.
    """

    pan: np.ndarray
    ms: np.ndarray
    ms_hr: np.ndarray | None


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with reflect borders; accumulates in float64."""
    if sigma <= 0:
        return arr.copy()
    radius = max(1, int(math.ceil(3.5 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    out = arr.astype(np.float64)
    for axis in (-2, -1):
        moved = np.moveaxis(out, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(radius, radius)], mode="reflect")
        acc = np.zeros_like(moved)
        for i, k in enumerate(kernel):
            acc += k * padded[..., i : i + moved.shape[-1]]
        out = np.moveaxis(acc, -1, axis)
    return out.astype(arr.dtype)


def mtf_degrade(arr: np.ndarray, ratio: int = RESOLUTION_RATIO, sigma: float = MTF_SIGMA,
                decimate: str = "point") -> np.ndarray:
    """Low-pass then decimate [..., H, W] by `ratio`.

    decimate="point" keeps the top-left-anchored every-ratio-th sample;
    "box" averages ratio x ratio blocks instead.
    """
    h, w = arr.shape[-2:]
    if h % ratio or w % ratio:
        raise DataError(f"extents {h}x{w} not divisible by ratio {ratio}")
    blurred = gaussian_blur(arr, sigma)
    if decimate == "point":
        return np.ascontiguousarray(blurred[..., ::ratio, ::ratio])
    if decimate == "box":
        shape = arr.shape[:-2] + (h // ratio, ratio, w // ratio, ratio)
        return blurred.reshape(shape).mean(axis=(-3, -1)).astype(arr.dtype)
    raise ValueError(f"unknown decimation mode {decimate!r}")


def bilinear_shift(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift content of [H,W] by (dx, dy) pixels with bilinear sampling,
    clamping reads at the borders. Exact identity for a zero shift."""
    if dx == 0.0 and dy == 0.0:
        return img.copy()
    h, w = img.shape
    fy, fx = math.floor(dy), math.floor(dx)
    ry, rx = dy - fy, dx - fx
    ys = np.clip(np.arange(h) - fy, 0, h - 1)
    ys1 = np.clip(ys - 1, 0, h - 1)
    xs = np.clip(np.arange(w) - fx, 0, w - 1)
    xs1 = np.clip(xs - 1, 0, w - 1)
    # out[y, x] = img[y - dy, x - dx], split into integer and fractional parts
    a = img[np.ix_(ys, xs)]
    b = img[np.ix_(ys, xs1)]
    c = img[np.ix_(ys1, xs)]
    d = img[np.ix_(ys1, xs1)]
    return ((1 - ry) * ((1 - rx) * a + rx * b) + ry * ((1 - rx) * c + rx * d)).astype(img.dtype)


def _coverage(dist: np.ndarray, soft: float = 0.75) -> np.ndarray:
    """Signed distance (negative inside) -> anti-aliased alpha in [0,1]."""
    return np.clip(0.5 - dist / soft, 0.0, 1.0)


def _render_shapes(rng: np.random.Generator, bands: int, size: int,
                   n_shapes: int, band_spread: float = 0.12) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((bands, size, size))

    # smooth background: per-band ramps plus one low-frequency wave
    base = rng.uniform(0.25, 0.55)
    for b in range(bands):
        gx, gy = rng.uniform(-0.2, 0.2, size=2)
        amp = rng.uniform(0.02, 0.08)
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[b] = (base + rng.uniform(-0.08, 0.08)
                  + gx * xx / size + gy * yy / size
                  + amp * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase))

    for _ in range(n_shapes):
        kind = rng.integers(3)
        cx, cy = rng.uniform(0.05 * size, 0.95 * size, size=2)
        if kind == 0:  # rotated rectangle
            a, b2 = rng.uniform(0.02 * size, 0.2 * size, size=2)
            theta = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            dist = np.maximum(np.abs(u) - a, np.abs(v) - b2)
        elif kind == 1:  # ellipse
            a, b2 = rng.uniform(0.02 * size, 0.15 * size, size=2)
            r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b2) ** 2)
            dist = (r - 1.0) * min(a, b2)
        else:  # thick line segment
            ex, ey = rng.uniform(0.05 * size, 0.95 * size, size=2)
            half = rng.uniform(0.5, 0.02 * size)
            vx, vy = ex - cx, ey - cy
            norm2 = vx * vx + vy * vy + 1e-9
            t = np.clip(((xx - cx) * vx + (yy - cy) * vy) / norm2, 0.0, 1.0)
            dist = np.hypot(xx - (cx + t * vx), yy - (cy + t * vy)) - half
        alpha = _coverage(dist)
        refl = np.clip(rng.uniform(0.05, 0.95) + rng.normal(0.0, band_spread, size=bands),
                       0.02, 0.98)
        img = img * (1 - alpha) + refl[:, None, None] * alpha
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed: int, bands: int = 4, size: int = 256,
                   misalign: float = MAX_SHIFT, *, texture: float = 0.02,
                   weights: np.ndarray | None = None,
                   n_shapes: int | None = None,
                   band_spread: float = 0.12) -> Scene:
    """Render a deterministic scene; `misalign` bounds |dx|,|dy| in PAN px.

    `weights` overrides the random convex band weights of the PAN mix and
    `texture` scales the PAN-only high-frequency detail (0 disables it); both
    exist so degenerate cases are constructible in tests. `band_spread` is
    the per-shape reflectance deviation across bands: small values give the
    strongly correlated spectra typical of real sensors.
    """
    if size % RESOLUTION_RATIO:
        raise DataError(f"scene size {size} not divisible by {RESOLUTION_RATIO}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 61)) if n_shapes is None else n_shapes
    hrms = _render_shapes(rng, bands, size, n, band_spread)

    dx, dy = (rng.uniform(-misalign, misalign, size=2) if misalign > 0 else (0.0, 0.0))
    if weights is None:
        weights = rng.dirichlet(np.ones(bands))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (bands,):
            raise DataError(f"weights must have shape ({bands},)")
    shifted = np.stack([bilinear_shift(hrms[b], float(dx), float(dy)) for b in range(bands)])
    pan = np.einsum("b,bhw->hw", weights, shifted)
    if texture > 0:
        detail = gaussian_blur(rng.standard_normal((size, size)), 0.7)
        pan = pan + texture * (detail / detail.std())
    pan = np.clip(pan, 0.0, 1.0)
    return Scene(hrms=hrms.astype(np.float32), pan=pan[None].astype(np.float32),
                 seed=int(seed), shift=(float(dx), float(dy)))


def wald_degrade(scene: Scene, patch: int = PATCH_PAN, jitter_rng=None,
                 sigma: float = MTF_SIGMA, decimate: str = "point"):
    """Yield training triplets tiling the scene with stride `patch`.

    Each MS patch is the blur-plus-decimate of its own HR patch, so the
    reduced-resolution relation holds per sample. `jitter_rng` shifts the tile
    origins by random multiples of the resolution ratio (training-time crops).
    """
    size = scene.size
    if size < patch:
        raise DataError(f"scene size {size} smaller than one {patch} patch")
    ratio = RESOLUTION_RATIO
    for top in range(0, size - patch + 1, patch):
        for left in range(0, size - patch + 1, patch):
            y, x = top, left
            if jitter_rng is not None:
                maxy = (size - patch - top) // ratio
                maxx = (size - patch - left) // ratio
                if maxy > 0:
                    y = top + int(jitter_rng.integers(0, maxy + 1)) * ratio
                if maxx > 0:
                    x = left + int(jitter_rng.integers(0, maxx + 1)) * ratio
            hr = np.ascontiguousarray(scene.hrms[:, y : y + patch, x : x + patch])
            pan = np.ascontiguousarray(scene.pan[:, y : y + patch, x : x + patch])
            ms = mtf_degrade(hr, ratio, sigma, decimate)
            yield Triplet(pan=pan, ms=ms, ms_hr=hr)


def full_res_pair(scene: Scene, sigma: float = MTF_SIGMA) -> Triplet:
    """The full-resolution protocol: inputs only, no ground truth."""
    ms = mtf_degrade(scene.hrms, RESOLUTION_RATIO, sigma)
    return Triplet(pan=scene.pan.copy(), ms=ms, ms_hr=None)


# ---------------------------------------------------------------------------
# augmentation


def apply_transform(t: Triplet, flip_h: bool = False, flip_v: bool = False,
                    rot90: int = 0, crop: tuple[int, int] | None = None,
                    patch: int = PATCH_PAN) -> Triplet:
    """Apply one geometric transform identically to all images of a triplet.

    Crop offsets are in PAN pixels and must be multiples of the resolution
    ratio so the MS grid stays aligned.
    """
    ratio = RESOLUTION_RATIO

    def one(arr, scale):
        if arr is None:
            return None
        out = arr
        if crop is not None:
            oy, ox = crop
            if oy % ratio or ox % ratio:
                raise DataError(f"crop offsets {crop} must be multiples of {ratio}")
            p = patch // scale
            out = out[:, oy // scale : oy // scale + p, ox // scale : ox // scale + p]
        if flip_h:
            out = out[:, :, ::-1]
        if flip_v:
            out = out[:, ::-1, :]
        if rot90 % 4:
            out = np.rot90(out, rot90 % 4, axes=(1, 2))
        return np.ascontiguousarray(out)

    return Triplet(pan=one(t.pan, 1), ms=one(t.ms, ratio), ms_hr=one(t.ms_hr, 1))


def augment(t: Triplet, seed: int) -> Triplet:
    """Random flips, 90-degree rotations and (when possible) aligned crops."""
    rng = np.random.default_rng(seed)
    flip_h, flip_v = (bool(b) for b in rng.integers(0, 2, size=2))
    rot = int(rng.integers(0, 4))
    crop = None
    h = t.pan.shape[1]
    if h > PATCH_PAN:
        span = (h - PATCH_PAN) // RESOLUTION_RATIO
        oy, ox = (int(v) * RESOLUTION_RATIO for v in rng.integers(0, span + 1, size=2))
        crop = (oy, ox)
    return apply_transform(t, flip_h, flip_v, rot, crop)


# ---------------------------------------------------------------------------
# dataset files


def save_scene(path, scene: Scene) -> None:
    meta = {"format": SCENE_FORMAT, "seed": scene.seed, "bands": scene.bands,
            "size": scene.size, "dx": scene.shift[0], "dy": scene.shift[1]}
    pct.write_bundle(path, meta, {"hrms": scene.hrms, "pan": scene.pan})


def load_scene(path) -> Scene:
    meta, tensors = pct.read_bundle(path)
    if meta.get("format") != SCENE_FORMAT:
        raise DataError(f"{path}: not a {SCENE_FORMAT} bundle")
    scene = Scene(hrms=tensors["hrms"], pan=tensors["pan"], seed=int(meta["seed"]),
                  shift=(float(meta["dx"]), float(meta["dy"])))
    _validate_scene(scene, path)
    return scene


def _validate_scene(scene: Scene, origin) -> None:
    for name, arr in (("hrms", scene.hrms), ("pan", scene.pan)):
        if not np.isfinite(arr).all():
            raise DataError(f"{origin}: non-finite values in {name}")
        if arr.min() < 0 or arr.max() > 1:
            raise DataError(f"{origin}: {name} values escape [0,1]")


def generate_dataset(out_dir, base_seed: int, n_scenes: int, bands: int = 4,
                     size: int = 256, misalign: float = MAX_SHIFT) -> dict:
    """Write `n_scenes` deterministic scene bundles plus a manifest."""
    scenes_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        seed = base_seed + i
        scene = generate_scene(seed, bands=bands, size=size, misalign=misalign)
        fname = f"{seed}.pct1bundle"
        save_scene(os.path.join(scenes_dir, fname), scene)
        entries.append({"file": f"scenes/{fname}", "seed": seed,
                        "dx": scene.shift[0], "dy": scene.shift[1]})
    manifest = {"format": "pancraft-dataset-v1", "base_seed": base_seed,
                "bands": bands, "size": size, "misalign": misalign,
                "scenes": entries}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_dataset(root) -> list[Scene]:
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"{root}: no manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    return [load_scene(os.path.join(root, e["file"])) for e in manifest["scenes"]]


def export_png(path, img: np.ndarray, rgb_bands: tuple[int, int, int] | None = None) -> None:
    """8-bit visualization with a per-band 1-99 percentile stretch.

    Purely for inspection; metric code never reads these.
    """
    from PIL import Image

    if img.ndim != 3:
        raise DataError(f"expected [C,H,W], got shape {img.shape}")
    if img.shape[0] == 1:
        chans = [img[0]]
    else:
        if rgb_bands is None:
            rgb_bands = (min(2, img.shape[0] - 1), 1, 0)
        chans = [img[b] for b in rgb_bands]
    stretched = []
    for ch in chans:
        lo, hi = np.percentile(ch, [1.0, 99.0])
        span = max(hi - lo, 1e-6)
        stretched.append(np.clip((ch - lo) / span * 255.0, 0, 255).astype(np.uint8))
    arr = stretched[0] if len(stretched) == 1 else np.stack(stretched, axis=-1)
    Image.fromarray(arr).save(path)
