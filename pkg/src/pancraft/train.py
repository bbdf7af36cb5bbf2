"""Dual-mode training: duplicated-batch loss, AdamW, warmup+cosine schedule,
checkpointing, and the ablation grid harness.

Each step runs the batch once in MS mode and once in PAN mode (an effective
2x batch), sums the two L1 reconstruction terms, and backpropagates through
the summed loss in a single reverse sweep.
"""

from __future__ import annotations

import csv
import json
import math
import os
import resource
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import pct
from .data import Scene, Triplet, augment, full_res_pair, wald_degrade
from .errors import ConfigError, NumericError
from .layers import Mode
from .metrics import MetricReport, full_res_metrics, reduced_metrics
from .model import ModelConfig, ModelInputs, PanSharpener
from .tensor import Tape, Tensor, absolute, narrow, tmean


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    iters: int = 2000
    warmup: int = 100
    batch: int = 4
    lam: float = 1.0
    seed: int = 2025
    mars_on: bool = True
    cm3a_on: bool = True
    two_stage: bool = False
    augment: bool = True
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.warmup > self.iters:
            raise ConfigError(f"warmup {self.warmup} exceeds iters {self.iters}")
        if self.batch < 1 or self.iters < 1:
            raise ConfigError("batch and iters must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    iter: int
    loss_ms: float
    loss_pan: float
    lr_now: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class AdamW:
    """Adam with decoupled weight decay.

    With a zero gradient the update term vanishes and the parameter contracts
    by exactly (1 - lr * weight_decay) per step.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            decay = self.weight_decay * p.data
            p.data[...] -= (lr * (update + decay)).astype(p.data.dtype, copy=False)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine annealing to zero."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = max(1, cfg.iters - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def mars_loss(pred_ms, gt_ms, pred_pan_rep, gt_pan_rep, lam: float):
    """Mean-absolute reconstruction error of both modes, PAN term weighted.

    Reduction is the mean over all elements so `lam` keeps its meaning
    across band counts and batch sizes.
    """
    if pred_ms.shape != gt_ms.shape:
        raise ValueError(f"MS shapes differ: {pred_ms.shape} vs {gt_ms.shape}")
    if pred_pan_rep.shape != gt_pan_rep.shape:
        raise ValueError(f"PAN shapes differ: {pred_pan_rep.shape} vs {gt_pan_rep.shape}")
    loss = tmean(absolute(pred_ms - gt_ms))
    if lam:
        loss = loss + lam * tmean(absolute(pred_pan_rep - gt_pan_rep))
    return loss


def _stack_batch(triplets: list[Triplet], dtype) -> tuple[ModelInputs, Tensor]:
    pan = np.stack([t.pan for t in triplets]).astype(dtype)
    ms = np.stack([t.ms for t in triplets]).astype(dtype)
    gt = np.stack([t.ms_hr for t in triplets]).astype(dtype)
    return ModelInputs.build(pan, ms, dtype=dtype), Tensor(gt)


def _duplicate(inputs: ModelInputs) -> ModelInputs:
    dup = lambda t: Tensor(np.concatenate([t.data, t.data]))
    return ModelInputs(pan=dup(inputs.pan), ms_lr=dup(inputs.ms_lr),
                       pan_rep=dup(inputs.pan_rep), pan_lr_rep=dup(inputs.pan_lr_rep))


def train_step(model: PanSharpener, triplets: list[Triplet], opt: AdamW,
               cfg: TrainConfig, step: int, modes: str = "both",
               dump_dir=None) -> StepRecord:
    """One optimization step over a batch; `modes` narrows the loss to one
    reconstruction task (used by the two-stage schedule).

    Dual-mode steps duplicate the batch and run both reconstructions in one
    forward (the MS half and the PAN half), then backpropagate the summed
    loss in a single sweep.
    """
    t0 = time.perf_counter()
    inputs, gt_ms = _stack_batch(triplets, model.dtype)
    dual = modes == "both" and cfg.mars_on
    n = inputs.pan.shape[0]

    opt.zero_grad()
    loss_ms = loss_pan = 0.0
    with Tape() as tape:
        if dual:
            out = model.forward(_duplicate(inputs), Mode.DUAL)
            term_ms = tmean(absolute(narrow(out, 0, 0, n) - gt_ms))
            term_pan = tmean(absolute(narrow(out, 0, n, n) - inputs.pan_rep))
            loss_ms, loss_pan = float(term_ms.data), float(term_pan.data)
            total = term_ms + (term_pan if cfg.lam == 1.0 else cfg.lam * term_pan)
        elif modes == "pan":
            pred = model.forward(inputs, Mode.PAN)
            term = tmean(absolute(pred - inputs.pan_rep))
            loss_pan = float(term.data)
            total = term if cfg.lam == 1.0 else cfg.lam * term
        else:
            pred = model.forward(inputs, Mode.MS)
            total = tmean(absolute(pred - gt_ms))
            loss_ms = float(total.data)
        if not (math.isfinite(loss_ms) and math.isfinite(loss_pan)):
            if dump_dir is not None:
                path = os.path.join(dump_dir, f"nan_batch_{step}.pct1bundle")
                pct.write_bundle(path, {"step": step},
                                 {"pan": inputs.pan.data, "ms_lr": inputs.ms_lr.data,
                                  "gt": gt_ms.data})
            raise NumericError(f"non-finite loss at step {step} "
                               f"(ms={loss_ms}, pan={loss_pan})")
        tape.backward(total, release=True)
    opt.step(lr_at(step, cfg))
    wall = (time.perf_counter() - t0) * 1000.0
    return StepRecord(iter=step, loss_ms=loss_ms, loss_pan=loss_pan,
                      lr_now=lr_at(step, cfg), wall_ms=wall)


def _mode_plan(step: int, cfg: TrainConfig) -> str:
    if cfg.two_stage:
        return "pan" if step < cfg.iters // 2 else "ms"
    return "both" if cfg.mars_on else "ms"


def triplet_pool(scenes: list[Scene], jitter_seed: int | None = None) -> list[Triplet]:
    """Flatten scenes into training patches (with origin jitter when seeded)."""
    rng = None if jitter_seed is None else np.random.default_rng(jitter_seed)
    pool = []
    for scene in scenes:
        pool.extend(wald_degrade(scene, jitter_rng=rng))
    return pool


def train_run(model: PanSharpener, pool: list[Triplet], cfg: TrainConfig,
              out_dir=None, log_every: int = 50) -> list[StepRecord]:
    """Full training loop over a triplet pool; writes JSONL logs and
    checkpoints when `out_dir` is given. Deterministic from cfg.seed."""
    if not pool:
        raise ConfigError("empty triplet pool")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params(), weight_decay=cfg.weight_decay)
    records = []
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    try:
        for step in range(cfg.iters):
            idx = rng.choice(len(pool), size=min(cfg.batch, len(pool)), replace=False)
            batch = [pool[i] for i in idx]
            if cfg.augment:
                batch = [augment(t, int(rng.integers(1 << 31))) for t in batch]
            rec = train_step(model, batch, opt, cfg, step,
                             modes=_mode_plan(step, cfg), dump_dir=out_dir)
            records.append(rec)
            if log_f is not None and (step % log_every == 0 or step == cfg.iters - 1):
                log_f.write(rec.to_json() + "\n")
            if out_dir is not None and cfg.checkpoint_every and step > 0 \
                    and step % cfg.checkpoint_every == 0:
                model.save(os.path.join(out_dir, f"ckpt_{step:06d}.ckpt"))
        if out_dir is not None:
            model.save(os.path.join(out_dir, "model.ckpt"))
    finally:
        if log_f is not None:
            log_f.close()
    return records


def evaluate_scenes(model: PanSharpener, scenes: list[Scene]) -> list[MetricReport]:
    """Reduced metrics per training-size patch plus full-resolution metrics
    per scene, merged into one report per scene."""
    reports = []
    for scene in scenes:
        merged = MetricReport()
        reduced = []
        for t in wald_degrade(scene):
            fused = model.infer(t.pan[None], t.ms[None]).data[0]
            reduced.append(reduced_metrics(fused, t.ms_hr))
        for key in reduced[0].values:
            vals = [r.values[key] for r in reduced if np.isfinite(r.values[key])]
            if vals:
                merged.values[key] = float(np.mean(vals))
            else:
                merged.values[key] = float("nan")
                merged.undefined.append(key)
        fr = full_res_pair(scene)
        fused_full = model.infer(fr.pan[None], fr.ms[None]).data[0]
        merged.values.update(full_res_metrics(fused_full, fr.ms, fr.pan).values)
        reports.append(merged)
    return reports


def _pan_half_grad_max(model: PanSharpener) -> float:
    vals = [np.abs(p.grad).max() for p in model.params()
            if p.name.endswith(("gamma_pan", "beta_pan", "alpha_pan_1", "alpha_pan_2"))]
    return float(max(vals)) if vals else 0.0


ABLATION_COLUMNS = ["cm3a", "mars", "hqnr", "ergas", "sam", "psnr",
                    "time_s", "memory_mb", "pan_grad_max"]


def run_ablation(train_scenes: list[Scene], eval_scenes: list[Scene],
                 model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None,
                 grid=((False, False), (True, False), (False, True), (True, True))
                 ) -> list[dict]:
    """Train the on/off grid over (cm3a, mars) on identical data and report
    the standard metric quartet plus cost columns.

    Mode routing is asserted mechanically: after training, one probe step
    must leave nonzero gradients on the PAN-half parameters exactly when the
    dual-mode loss is enabled.
    """
    pool = triplet_pool(train_scenes)
    rows = []
    for cm3a_on, mars_on in grid:
        run_cfg = replace(cfg, cm3a_on=cm3a_on, mars_on=mars_on, two_stage=False)
        model = PanSharpener(replace(model_cfg, cm3a=cm3a_on))
        t0 = time.perf_counter()
        train_run(model, pool, run_cfg, out_dir=None)
        elapsed = time.perf_counter() - t0

        # probe step for the mode-routing property (no weight update)
        opt = AdamW(model.params(), weight_decay=0.0)
        train_step(model, pool[: run_cfg.batch], opt, run_cfg, step=0,
                   modes=_mode_plan(0, run_cfg))
        pan_grad = _pan_half_grad_max(model)
        if mars_on and pan_grad == 0.0:
            raise AssertionError("dual-mode training left PAN-half parameters untouched")
        if not mars_on and pan_grad != 0.0:
            raise AssertionError("single-mode training leaked gradient into PAN half")

        agg = {}
        reports = evaluate_scenes(model, eval_scenes)
        for key in ("hqnr", "ergas", "sam", "psnr"):
            agg[key] = float(np.mean([r.values[key] for r in reports]))
        rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
        rows.append({"cm3a": cm3a_on, "mars": mars_on, **agg,
                     "time_s": elapsed, "memory_mb": rss_mb,
                     "pan_grad_max": pan_grad})

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "ablation.csv")
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in ABLATION_COLUMNS})
        with open(os.path.join(out_dir, "ablation.txt"), "w") as f:
            f.write(format_ablation_table(rows))
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    head = f"{'CM3A':>5} {'MARs':>5} {'HQNR':>8} {'ERGAS':>8} {'SAM':>8} {'PSNR':>8} {'time(s)':>9} {'mem(MB)':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{'x' if r['cm3a'] else '':>5} {'x' if r['mars'] else '':>5} "
                     f"{r['hqnr']:8.4f} {r['ergas']:8.4f} {r['sam']:8.4f} {r['psnr']:8.3f} "
                     f"{r['time_s']:9.2f} {r['memory_mb']:9.1f}")
    return "\n".join(lines) + "\n"
