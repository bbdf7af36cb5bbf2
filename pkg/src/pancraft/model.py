"""The pan-sharpening network: residual U-Net with dual-mode routing.

The network body predicts a residual; the output head is zero-initialized so
a fresh model reproduces its residual base exactly - the up-sampled MS input
in MS mode, the low-passed replicated PAN in PAN mode. High-resolution
stages use residual blocks only; deeper stages interleave attention blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops, pct
from .layers import (AttnBlock, AttnConfig, Conv2d, ConvBlock, Mode, ResBlock,
                     DownConv, UpConv)
from .tensor import Tensor, _as_tensor, clamp, concat, default_dtype

CHECKPOINT_FORMAT = "pancraft-checkpoint-v1"


@dataclass(frozen=True)
class Level:
    """One resolution stage: number of residual blocks and whether each is
    followed by an attention block. Scales are successive halvings."""

    n_res: int = 2
    attn: bool = True


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 128
    bands: int = 8
    window: int = 3
    heads: int = 4
    levels: tuple[Level, ...] = (Level(2, False), Level(2, True), Level(2, True), Level(2, True))
    seed: int = 2025
    cm3a: bool = True

    def __post_init__(self):
        if not self.levels:
            raise ValueError("need at least one level")
        if self.levels[0].attn:
            raise ValueError("the full-resolution level must not use attention")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.bands < 1:
            raise ValueError("bands must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [{"n_res": l.n_res, "attn": l.attn} for l in self.levels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {"channels", "bands", "window", "heads", "levels", "seed", "cm3a"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "levels" in d:
            d["levels"] = tuple(Level(int(l["n_res"]), bool(l["attn"])) for l in d["levels"])
        return cls(**d)


def paper_config(bands: int = 8) -> ModelConfig:
    """The full-size layout; lands near the published parameter budget."""
    return ModelConfig(bands=bands)


def desk_config(bands: int = 4, channels: int = 16, seed: int = 2025) -> ModelConfig:
    """Two-level toy layout that trains in minutes on a laptop CPU."""
    return ModelConfig(channels=channels, bands=bands, levels=(Level(1, False), Level(1, True)),
                       seed=seed)


@dataclass
class ModelInputs:
    """Everything one forward pass needs, all at PAN resolution.

    pan_rep is the PAN image replicated across the spectral bands; pan_lr_rep
    is the same after a down-up round trip by the resolution ratio, which is
    the residual base for PAN-mode reconstruction.
    """

    pan: Tensor
    ms_lr: Tensor
    pan_rep: Tensor
    pan_lr_rep: Tensor

    @classmethod
    def build(cls, pan, ms, ratio: int = 4, dtype=None) -> "ModelInputs":
        """From a raw pair: pan [B,1,rH,rW] and low-resolution ms [B,C,H,W]."""
        dtype = dtype or default_dtype()
        pan = Tensor(_as_tensor(pan).data, dtype=dtype)
        ms = Tensor(_as_tensor(ms).data, dtype=dtype)
        if pan.ndim != 4 or ms.ndim != 4 or pan.shape[1] != 1:
            raise ValueError(f"expected pan [B,1,H,W] and ms [B,C,h,w], got {pan.shape}, {ms.shape}")
        if pan.shape[2] != ms.shape[2] * ratio or pan.shape[3] != ms.shape[3] * ratio:
            raise ValueError(f"pan {pan.shape[2:]} is not {ratio}x the ms extents {ms.shape[2:]}")
        bands = ms.shape[1]
        ms_lr = ops.resample(ms, ratio, "bicubic")
        pan_lr = ops.resample(ops.resample(pan, (1, ratio), "avgpool"), ratio, "bicubic")
        rep = lambda t: Tensor(np.repeat(t.data, bands, axis=1))
        return cls(pan=pan, ms_lr=ms_lr, pan_rep=rep(pan), pan_lr_rep=rep(pan_lr))

    @classmethod
    def from_upsampled(cls, pan, ms_lr, ratio: int = 4) -> "ModelInputs":
        """When the MS input is already up-sampled to PAN resolution."""
        pan, ms_lr = _as_tensor(pan), _as_tensor(ms_lr)
        bands = ms_lr.shape[1]
        pan_lr = ops.resample(ops.resample(pan, (1, ratio), "avgpool"), ratio, "bicubic")
        rep = lambda t: Tensor(np.repeat(t.data, bands, axis=1))
        return cls(pan=pan, ms_lr=ms_lr, pan_rep=rep(pan), pan_lr_rep=rep(pan_lr))


class PanSharpener:
    """U-Net with mode-modulated blocks and two residual output bases."""

    def __init__(self, cfg: ModelConfig, dtype=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype or default_dtype()).type
        rng = np.random.default_rng(cfg.seed)
        c, bands = cfg.channels, cfg.bands
        acfg = AttnConfig(cfg.window, cfg.heads)
        dt = self.dtype

        self.embed = Conv2d(1 + bands, c, 3, "embed", rng, dt)
        n = len(cfg.levels)
        self.stages_enc = [self._make_stage(lvl, f"enc{i}", c, bands, acfg, rng)
                           for i, lvl in enumerate(cfg.levels)]
        self.downs = [DownConv(c, f"down{i}", rng, dt) for i in range(n - 1)]
        self.ups = [UpConv(c, f"up{i}", rng, dt) for i in range(n - 1)]
        self.fuses = [Conv2d(2 * c, c, 1, f"fuse{i}", rng, dt) for i in range(n - 1)]
        self.stages_dec = [self._make_stage(cfg.levels[i], f"dec{i}", c, bands, acfg, rng)
                           for i in range(n - 1)]
        self.head = Conv2d(c, bands, 3, "head", rng, dt, zero_init=True)

        self._params = self.embed.params()
        for stage in self.stages_enc:
            for blk in stage:
                self._params += blk.params()
        for grp in (self.downs, self.ups, self.fuses):
            for m in grp:
                self._params += m.params()
        for stage in self.stages_dec:
            for blk in stage:
                self._params += blk.params()
        self._params += self.head.params()
        names = [p.name for p in self._params]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")

    def _make_stage(self, lvl: Level, name: str, c: int, bands: int, acfg: AttnConfig, rng):
        blocks = []
        for j in range(lvl.n_res):
            blocks.append(ResBlock(c, f"{name}.res{j}", rng, self.dtype))
            if lvl.attn:
                if self.cfg.cm3a:
                    blocks.append(AttnBlock(c, bands, acfg, f"{name}.attn{j}", rng, self.dtype))
                else:
                    blocks.append(ConvBlock(c, f"{name}.attn{j}", rng, self.dtype))
        return blocks

    def params(self):
        return list(self._params)

    def named_params(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self._params}

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    def _conditioning(self, inputs: ModelInputs):
        """Per-level average-pooled copies of the original images, cached."""
        cache: dict[int, tuple[Tensor, Tensor]] = {}

        def get(level: int):
            if level not in cache:
                if level == 0:
                    cache[level] = (inputs.ms_lr, inputs.pan_rep)
                else:
                    f = (1, 2 ** level)
                    cache[level] = (ops.resample(inputs.ms_lr, f, "avgpool"),
                                    ops.resample(inputs.pan_rep, f, "avgpool"))
            return cache[level]

        return get

    def _run_stage(self, blocks, x, cond, level, mode):
        for blk in blocks:
            if isinstance(blk, ResBlock):
                x = blk(x, mode)
            else:
                ms_ds, pan_ds = cond(level)
                x = blk(x, ms_ds, pan_ds, mode)
        return x

    def forward(self, inputs: ModelInputs, mode: Mode) -> Tensor:
        """Residual prediction plus the mode's base. In DUAL mode the batch
        carries the duplicated samples: first half MS, second half PAN."""
        h, w = inputs.pan.shape[2:]
        div = 2 ** (len(self.cfg.levels) - 1)
        if h % div or w % div:
            raise ValueError(f"extents {h}x{w} not divisible by {div}")
        if inputs.ms_lr.shape[1] != self.cfg.bands:
            raise ValueError(f"model expects {self.cfg.bands} bands, got {inputs.ms_lr.shape[1]}")
        if mode is Mode.DUAL and inputs.pan.shape[0] % 2:
            raise ValueError("dual-mode forward needs an even (duplicated) batch")
        cond = self._conditioning(inputs)

        x = self.embed(concat([inputs.pan, inputs.ms_lr], axis=1))
        skips = []
        last = len(self.cfg.levels) - 1
        for i, stage in enumerate(self.stages_enc):
            x = self._run_stage(stage, x, cond, i, mode)
            if i < last:
                skips.append(x)
                x = self.downs[i](x)
        for i in reversed(range(last)):
            x = self.ups[i](x)
            x = self.fuses[i](concat([x, skips[i]], axis=1))
            x = self._run_stage(self.stages_dec[i], x, cond, i, mode)
        residual = self.head(x)
        if mode is Mode.MS:
            base = inputs.ms_lr
        elif mode is Mode.PAN:
            base = inputs.pan_lr_rep
        else:
            n = inputs.pan.shape[0] // 2
            base = Tensor(np.concatenate([inputs.ms_lr.data[:n],
                                          inputs.pan_lr_rep.data[n:]]))
        return residual + base

    def infer(self, pan, ms, ratio: int = 4) -> Tensor:
        """Sharpen a raw (pan, low-res ms) pair; always runs in MS mode."""
        inputs = ModelInputs.build(pan, ms, ratio=ratio, dtype=self.dtype)
        return clamp(self.forward(inputs, Mode.MS), 0.0, 1.0)

    # checkpointing ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {"format": CHECKPOINT_FORMAT, "config": self.cfg.to_dict()}
        pct.write_bundle(path, meta, self.named_params())

    @classmethod
    def load(cls, path, dtype=None) -> "PanSharpener":
        meta, tensors = pct.read_bundle(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
        model = cls(ModelConfig.from_dict(meta["config"]), dtype=dtype)
        missing = [p.name for p in model._params if p.name not in tensors]
        if missing:
            raise ValueError(f"{path}: checkpoint is missing parameters {missing[:4]}...")
        for p in model._params:
            arr = tensors[p.name]
            if arr.shape != p.shape:
                raise ValueError(f"{path}: shape mismatch for {p.name}: {arr.shape} vs {p.shape}")
            p.data[...] = arr.astype(model.dtype)
        return model
