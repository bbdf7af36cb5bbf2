"""Operator commands: gen-data | train | infer | eval | ablate.

Runs are driven by a JSON config (profile defaults merged with file values,
then flag overrides); every run writes its resolved config next to its
outputs so it can be reproduced exactly. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data, metrics, pct
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, PanSharpener, desk_config, paper_config
from .tensor import limit_threads
from .train import TrainConfig, evaluate_scenes, run_ablation, train_run, triplet_pool

PROFILES = {"desk", "paper"}


def _profile_configs(profile: str, bands: int | None = None):
    if profile == "paper":
        model = paper_config(bands=bands or 8)
        trn = TrainConfig(iters=50_000, batch=48, checkpoint_every=5000)
    else:
        model = desk_config(bands=bands or 4)
        trn = TrainConfig()
    return model, trn


def load_run_config(path: str | None, profile: str, overrides: dict) -> dict:
    """Merge profile defaults, the JSON config file, and flag overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; use desk or paper")
    file_cfg = {}
    if path:
        try:
            with open(path) as f:
                file_cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    known = {"profile", "model", "train", "data"}
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    profile = file_cfg.get("profile", profile)
    model_cfg, train_cfg = _profile_configs(profile, overrides.pop("bands", None))
    model_d = model_cfg.to_dict()
    model_d.update(file_cfg.get("model", {}))
    train_d = train_cfg.to_dict()
    train_d.update(file_cfg.get("train", {}))
    for key, val in overrides.items():
        if val is None:
            continue
        if key == "seed":  # one seed governs init, sampling and augmentation
            train_d[key] = model_d[key] = val
        elif key in train_d:
            train_d[key] = val
        elif key in model_d:
            model_d[key] = val
        else:
            raise ConfigError(f"override {key!r} matches no config field")
    warmup_explicit = ("warmup" in file_cfg.get("train", {})
                       or overrides.get("warmup") is not None)
    if not warmup_explicit and train_d["warmup"] > train_d["iters"]:
        # shrinking iters without touching warmup keeps the 5% default ratio
        train_d["warmup"] = max(0, train_d["iters"] // 20)
    resolved = {"profile": profile,
                "model": ModelConfig.from_dict(model_d).to_dict(),
                "train": TrainConfig.from_dict(train_d).to_dict(),
                "data": file_cfg.get("data")}
    return resolved


def _write_resolved(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, sort_keys=True, indent=2)
        f.write("\n")


def _read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    return pct.read_tensor(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    manifest = data.generate_dataset(args.out, args.seed, args.scenes,
                                     bands=args.cms, size=args.size,
                                     misalign=args.misalign)
    if args.export_png:
        png_dir = os.path.join(args.out, "png")
        os.makedirs(png_dir, exist_ok=True)
        for entry in manifest["scenes"]:
            scene = data.load_scene(os.path.join(args.out, entry["file"]))
            data.export_png(os.path.join(png_dir, f"{entry['seed']}_rgb.png"), scene.hrms)
            data.export_png(os.path.join(png_dir, f"{entry['seed']}_pan.png"), scene.pan)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def _load_checkpoint(path: str) -> PanSharpener:
    import zipfile

    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        return PanSharpener.load(path)
    except (zipfile.BadZipFile, ValueError, KeyError) as e:
        raise DataError(f"corrupt checkpoint {path}: {e}")


def _overrides(args) -> dict:
    keys = ("seed", "iters", "warmup", "batch", "lr", "lam", "bands", "channels", "window")
    ov = {k: getattr(args, k, None) for k in keys}
    if args.mars is not None:
        ov["mars_on"] = args.mars == "on"
    if args.cm3a is not None:
        ov["cm3a_on"] = args.cm3a == "on"
        ov["cm3a"] = args.cm3a == "on"
    if getattr(args, "two_stage", False):
        ov["two_stage"] = True
    return ov


def cmd_train(args) -> int:
    resolved = load_run_config(args.config, args.profile, _overrides(args))
    data_dir = args.data or resolved.get("data")
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set \"data\" in the config")
    resolved["data"] = data_dir
    model_cfg = ModelConfig.from_dict(resolved["model"])
    train_cfg = TrainConfig.from_dict(resolved["train"])
    model_cfg = replace(model_cfg, cm3a=train_cfg.cm3a_on)

    scenes = data.load_dataset(data_dir)
    pool = triplet_pool(scenes)
    if args.resume:
        model = _load_checkpoint(args.resume)
        if model.cfg != model_cfg:
            raise ConfigError("checkpoint architecture disagrees with the resolved config")
    else:
        model = PanSharpener(model_cfg)
    _write_resolved(args.out, resolved)
    records = train_run(model, pool, train_cfg, out_dir=args.out)
    print(f"trained {len(records)} steps; final ms loss {records[-1].loss_ms:.5f}; "
          f"checkpoint at {os.path.join(args.out, 'model.ckpt')}")
    return 0


def _iter_scene_paths(path: str):
    if os.path.isdir(path):
        manifest = os.path.join(path, "manifest.json")
        if not os.path.exists(manifest):
            raise DataError(f"{path}: not a dataset (no manifest.json)")
        with open(manifest) as f:
            for entry in json.load(f)["scenes"]:
                yield os.path.join(path, entry["file"])
    else:
        yield path


def cmd_infer(args) -> int:
    model = _load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    wrote = 0
    for scene_path in _iter_scene_paths(args.infile):
        scene = data.load_scene(scene_path)
        pair = data.full_res_pair(scene)
        fused = model.infer(pair.pan[None], pair.ms[None]).data[0]
        if not np.isfinite(fused).all():
            raise NumericError(f"non-finite values in fused output for {scene_path}")
        stem = os.path.splitext(os.path.basename(scene_path))[0]
        pct.write_tensor(os.path.join(args.out, f"{stem}_fused.pct1"), fused)
        if args.png:
            data.export_png(os.path.join(args.out, f"{stem}_fused.png"), fused)
        wrote += 1
    print(f"fused {wrote} scene(s) into {args.out}")
    return 0


def _pairs(pred: str, ref: str) -> list[tuple[str, str, str]]:
    if os.path.isdir(pred) != os.path.isdir(ref):
        raise DataError("--pred and --ref must both be files or both directories")
    if not os.path.isdir(pred):
        return [(os.path.basename(pred), pred, ref)]
    preds = sorted(f for f in os.listdir(pred) if f.endswith(".pct1"))
    refs = sorted(f for f in os.listdir(ref) if f.endswith(".pct1"))
    if len(preds) != len(refs):
        raise DataError(f"{len(preds)} predictions vs {len(refs)} references")
    return [(p, os.path.join(pred, p), os.path.join(ref, r))
            for p, r in zip(preds, refs)]


def _emit_reports(reports: list[tuple[str, metrics.MetricReport]], out: str | None) -> None:
    agg = metrics.aggregate([r for _, r in reports])
    lines = []
    for name, rep in reports:
        vals = ", ".join(f"{k}={v:.4f}" for k, v in sorted(rep.values.items())
                         if np.isfinite(v))
        lines.append(f"{name}: {vals}")
        if rep.undefined:
            lines.append(f"{name}: undefined: {', '.join(rep.undefined)}")
    for k, st in agg.items():
        lines.append(f"mean {k} = {st['mean']:.4f} +/- {st['std']:.4f} (n={st['count']})")
    print("\n".join(lines))
    if out:
        os.makedirs(out, exist_ok=True)
        keys = sorted({k for _, r in reports for k in r.values})
        with open(os.path.join(out, "per_image.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image"] + keys)
            for name, rep in reports:
                writer.writerow([name] + [rep.values.get(k, float("nan")) for k in keys])
        with open(os.path.join(out, "aggregate.json"), "w") as f:
            json.dump(agg, f, sort_keys=True, indent=2)
            f.write("\n")


def cmd_eval(args) -> int:
    if args.full_res:
        if not (args.ms and args.pan):
            raise ConfigError("--full-res needs --ms and --pan")
        rep = metrics.full_res_metrics(_read_image(args.pred), _read_image(args.ms),
                                       _read_image(args.pan))
        _emit_reports([(os.path.basename(args.pred), rep)], args.out)
        return 0
    if not args.ref:
        raise ConfigError("reduced-resolution eval needs --ref (or use --full-res)")
    reports = []
    for name, ppath, rpath in _pairs(args.pred, args.ref):
        rep = metrics.reduced_metrics(_read_image(ppath), _read_image(rpath))
        reports.append((name, rep))
    _emit_reports(reports, args.out)
    return 0


def cmd_ablate(args) -> int:
    resolved = load_run_config(args.config, args.profile, _overrides(args))
    data_dir = args.data or resolved.get("data")
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set \"data\" in the config")
    scenes = data.load_dataset(data_dir)
    if len(scenes) < 2:
        raise DataError("ablation needs at least 2 scenes (train + held-out)")
    holdout = max(1, args.holdout)
    train_scenes, eval_scenes = scenes[:-holdout], scenes[-holdout:]
    model_cfg = ModelConfig.from_dict(resolved["model"])
    train_cfg = TrainConfig.from_dict(resolved["train"])
    _write_resolved(args.out, resolved)
    grid = []
    for cell in args.grid.split(","):
        flags = cell.strip()
        if flags not in ("00", "10", "01", "11"):
            raise ConfigError(f"bad grid cell {flags!r}; use comma-joined 00/10/01/11")
        grid.append((flags[0] == "1", flags[1] == "1"))
    rows = run_ablation(train_scenes, eval_scenes, model_cfg, train_cfg,
                        out_dir=args.out, grid=tuple(grid))
    from .train import format_ablation_table
    print(format_ablation_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pancraft",
                                description="Pan-sharpening at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a deterministic synthetic dataset")
    g.add_argument("--seed", type=int, default=2025)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--size", type=int, default=256, help="PAN extent per scene")
    g.add_argument("--cms", type=int, default=4, help="spectral band count")
    g.add_argument("--misalign", type=float, default=2.0,
                   help="max PAN-MS shift in PAN pixels")
    g.add_argument("--out", required=True)
    g.add_argument("--export-png", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def add_run_flags(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--profile", default="desk", choices=sorted(PROFILES))
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--warmup", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lam", type=float)
        sp.add_argument("--bands", type=int)
        sp.add_argument("--channels", type=int)
        sp.add_argument("--window", type=int)
        sp.add_argument("--mars", choices=["on", "off"])
        sp.add_argument("--cm3a", choices=["on", "off"])

    t = sub.add_parser("train", help="train a model on a dataset")
    add_run_flags(t)
    t.add_argument("--two-stage", action="store_true", dest="two_stage",
                   help="PAN back-reconstruction pretrain, then MS finetune")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="sharpen scenes with a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="infile", required=True,
                   help="scene bundle or dataset directory")
    i.add_argument("--out", required=True)
    i.add_argument("--png", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions")
    e.add_argument("--pred", required=True, help="fused .pct1 file or directory")
    e.add_argument("--ref", help="ground-truth .pct1 file or directory")
    e.add_argument("--full-res", action="store_true", dest="full_res")
    e.add_argument("--ms", help="original low-res MS (full-res mode)")
    e.add_argument("--pan", help="original PAN (full-res mode)")
    e.add_argument("--out", help="directory for per-image CSV + aggregate JSON")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the component on/off grid")
    add_run_flags(a)
    a.add_argument("--grid", default="00,10,01,11",
                   help="comma-joined cells as <cm3a><mars> bits")
    a.add_argument("--holdout", type=int, default=1,
                   help="scenes reserved for evaluation")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    limit_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
