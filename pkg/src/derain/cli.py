"""Command-line entry points: ``derain synth|train|infer|eval|bench``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Relative output paths are resolved under ``$DERAIN_OUTPUT_ROOT`` when set.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .imio import read_png, write_png
from .metrics import evaluate_pairs, time_inference, write_report
from .network import LossWeights, NetworkConfig, TrainingDiverged
from .pipeline import (DehazeNet, PipelineConfig, PipelineError, RecurrentDerainer,
                       derain_recurrent, run_sequence)
from .synthesis import (ConfigError, DatasetError, SynthesisConfig, build_dataset,
                        config_hash, load_dataset, procedural_backgrounds, replay_manifest,
                        save_dataset)
from .training import CropSampler, Trainer

log = logging.getLogger("derain")

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
ENV_OUTPUT_ROOT = "DERAIN_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def output_path(p):
    p = Path(p)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    return Path(root) / p if root and not p.is_absolute() else p


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read {path}: {err}") from err


def _check_version(cfg, path):
    if cfg.get("schema_version", CONFIG_VERSION) != CONFIG_VERSION:
        raise UsageError(f"{path}: unsupported schema_version {cfg['schema_version']}")


# ---------------------------------------------------------------- synth

def load_backgrounds(source):
    """Backgrounds and their reference names for a manifest ``background_source``."""
    kind = source.get("kind")
    if kind == "procedural":
        n, shape, seed = source["count"], tuple(source.get("shape", (96, 96))), source.get("seed", 0)
        return (procedural_backgrounds(n, shape, seed),
                [f"procedural:{seed}:{i}" for i in range(n)])
    if kind == "directory":
        paths = sorted(Path(source["path"]).glob("*.png"))
        if not paths:
            raise DatasetError(f"no PNG backgrounds in {source['path']}")
        return [read_png(p, channels=3) for p in paths], [p.name for p in paths]
    raise UsageError(f"unknown background source {source!r}")


def cmd_synth(args):
    if args.manifest:
        manifest = read_json(args.manifest)
        source = manifest.get("background_source")
        if source is None:
            raise UsageError("manifest has no background_source; cannot replay")
        backgrounds, _ = load_backgrounds(source)
        examples, fresh = replay_manifest(manifest, backgrounds)
        fresh["background_source"] = source
        split = args.split or manifest.get("split", "train")
        fresh["split"] = split
        out = save_dataset(examples, fresh, output_path(args.out), split)
        print(f"replayed {len(examples)} examples into {out}")
        return EXIT_OK

    if not args.config:
        raise UsageError("synth needs --config or --manifest")
    cfg = read_json(args.config)
    _check_version(cfg, args.config)
    synth = dict(cfg.get("synthesis", {}))
    if args.seed is not None:
        synth["seed"] = args.seed
    mode = args.mode or cfg.get("mode", "light")
    split = args.split or cfg.get("split", "train")
    source = cfg.get("backgrounds", {"kind": "procedural", "count": 5})
    if args.backgrounds:
        source = {"kind": "directory", "path": str(args.backgrounds)}
    backgrounds, refs = load_backgrounds(source)
    examples, manifest = build_dataset(backgrounds, SynthesisConfig.from_dict(synth), mode, refs)
    manifest["background_source"] = source
    manifest["split"] = split
    out = save_dataset(examples, manifest, output_path(args.out), split)
    print(f"wrote {len(examples)} {mode} examples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def experiment_defaults():
    return {
        "schema_version": CONFIG_VERSION,
        "kind": "joint",
        "dataset": None,
        "val_dataset": None,
        "network": NetworkConfig().to_dict(),
        "loss": {"lambda1": 1.0, "lambda2": 0.1},
        "tau": 3,
        "shared": False,
        "optimizer": {"lr": 1e-3, "batch_size": 8, "crop": 64},
        "steps": 2000,
        "checkpoint_every": 500,
        "seed": 0,
        "output_dir": "runs/default",
    }


def build_experiment(cfg):
    import torch

    if cfg["kind"] not in ("joint", "recurrent", "dehaze"):
        raise UsageError(f"unknown kind {cfg['kind']!r}")
    torch.manual_seed(cfg["seed"])
    extra = {"tau": cfg["tau"], "shared": cfg["shared"]} if cfg["kind"] == "recurrent" else {}
    return build_model(cfg["kind"], cfg["network"], **extra)


def _load_splits(base, spec):
    """Examples from one split directory or a list of them (relative to ``base``)."""
    paths = [spec] if isinstance(spec, str) else list(spec)
    examples = []
    for p in paths:
        examples += load_dataset(base / p)[0]
    return examples


def cmd_train(args):
    user = read_json(args.config)
    _check_version(user, args.config)
    cfg = experiment_defaults()
    unknown = set(user) - set(cfg)
    if unknown:
        raise UsageError(f"unknown experiment fields: {sorted(unknown)}")
    cfg.update(user)
    if args.steps is not None:
        cfg["steps"] = args.steps
    if args.out:
        cfg["output_dir"] = str(args.out)
    if not cfg["dataset"]:
        raise UsageError("experiment config needs 'dataset'")
    base = Path(args.config).parent
    out_dir = output_path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash({k: v for k, v in cfg.items() if k != "steps"})

    examples = _load_splits(base, cfg["dataset"])
    val = _load_splits(base, cfg["val_dataset"]) if cfg["val_dataset"] else None
    opt = cfg["optimizer"]
    sampler = CropSampler(examples, crop=opt["crop"], batch_size=opt["batch_size"],
                          seed=cfg["seed"], target="dehaze" if cfg["kind"] == "dehaze" else "derain")
    trainer = Trainer(build_experiment(cfg), sampler, LossWeights(**cfg["loss"]), lr=opt["lr"],
                      out_dir=out_dir, checkpoint_every=cfg["checkpoint_every"],
                      val_examples=val, config_hash=digest)
    if args.resume and (out_dir / "last.pt").exists():
        start = trainer.resume()
        print(f"resuming from step {start}")
    (out_dir / "config.json").write_text(json.dumps({**cfg, "config_hash": digest}, indent=1))
    try:
        trainer.run(cfg["steps"])
    except KeyboardInterrupt:
        if trainer.step:
            trainer.checkpoint()
        print(f"interrupted at step {trainer.step}; rerun with --resume", file=sys.stderr)
        return EXIT_RUNTIME
    final = trainer.last_checkpoint or save_checkpoint(
        out_dir / "last.pt", trainer.model, trainer.optimizer, trainer.step, digest)
    manifest = {"config_hash": digest, "steps": trainer.step, "final_checkpoint": str(final),
                "best_checkpoint": str(out_dir / "best.pt") if val else None}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"trained {trainer.step} steps; final checkpoint {final}")
    return EXIT_OK


# ---------------------------------------------------------------- infer

def montage(images):
    h = max(i.shape[0] for i in images)
    tiles = []
    for img in images:
        img = img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)
        pad = np.ones((h, 4, 3))
        tiles += [np.pad(img, ((0, h - img.shape[0]), (0, 0), (0, 0))), pad]
    return np.concatenate(tiles[:-1], axis=1)


def cmd_infer(args):
    if args.pipeline:
        pcfg = PipelineConfig.from_json(args.pipeline)
    else:
        pcfg = PipelineConfig(derain_checkpoint=args.derain_checkpoint,
                              dehaze_checkpoint=args.dehaze_checkpoint)
    overrides = pcfg.to_dict()
    if args.sequence:
        overrides["stage_sequence"] = [s.strip() for s in args.sequence.split(",") if s.strip()]
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.derain_checkpoint:
        overrides["derain_checkpoint"] = args.derain_checkpoint
    if args.dehaze_checkpoint:
        overrides["dehaze_checkpoint"] = args.dehaze_checkpoint
    pcfg = PipelineConfig(**overrides)
    from .pipeline import load_stage_models

    models = load_stage_models(pcfg)
    out_dir = output_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(pcfg.to_dict())
    failures = 0
    for path in args.inputs:
        path = Path(path)
        try:
            O = read_png(path, channels=3)
            result, trace = run_sequence(O, pcfg, models)
            summary = {"input": str(path), "config_hash": digest, "stages": []}
            prev = O
            for k, rec in enumerate(trace):
                write_png(out_dir / f"{path.stem}_stage{k + 1}_{rec['stage']}.png", rec["image"],
                          pcfg.export_bits)
                summary["stages"].append({
                    "stage": rec["stage"],
                    "mean_abs_change": float(np.mean(np.abs(rec["image"] - prev))),
                })
                prev = rec["image"]
            write_png(out_dir / f"{path.stem}.png", result, pcfg.export_bits)
            if args.montage:
                write_png(out_dir / f"{path.stem}_montage.png",
                          montage([O] + [np.clip(r["image"], 0, 1) for r in trace]), 8)
            (out_dir / f"{path.stem}_trace.json").write_text(json.dumps(summary, indent=1))
        except (OSError, ValueError, RuntimeError) as err:
            failures += 1
            print(f"{path}: {err}", file=sys.stderr)
    print(f"processed {len(args.inputs) - failures}/{len(args.inputs)} images into {out_dir}")
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------- eval

def _index(directory, suffix):
    out = {}
    for p in sorted(Path(directory).glob(f"*{suffix}.png")):
        key = p.name[: len(p.name) - len(f"{suffix}.png")]
        if key:
            out[key] = p
    return out


def cmd_eval(args):
    results = _index(args.results, args.pred_suffix)
    truths = _index(args.truth, args.truth_suffix)
    if not truths:
        raise UsageError(f"no ground-truth files matching *{args.truth_suffix}.png in {args.truth}")
    matched = sorted(set(results) & set(truths))
    unmatched = sorted(set(truths) ^ set(results))
    for key in unmatched:
        side = "result" if key in truths else "ground truth"
        print(f"unmatched id {key}: no {side}", file=sys.stderr)
    pairs = [(k, read_png(results[k], channels=3), read_png(truths[k], channels=3))
             for k in matched]
    method = args.method or Path(args.results).name
    dataset = args.dataset or Path(args.truth).name
    rows = evaluate_pairs(pairs, method, dataset)
    digest = config_hash({"method": method, "dataset": dataset, "pred_suffix": args.pred_suffix,
                          "truth_suffix": args.truth_suffix, "ids": matched})
    for row in rows:
        row["config_hash"] = digest
    csv_path, _ = write_report(rows, output_path(args.out), extra_fields=("config_hash",))
    mean = rows[-1]
    print(f"{method} on {dataset}: {len(matched)} pairs, PSNR {mean['psnr']:.3f} dB, "
          f"SSIM {mean['ssim']:.4f} -> {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def cmd_bench(args):
    import torch

    torch.manual_seed(0)
    net_cfg = NetworkConfig()
    if args.derain_checkpoint:
        recurrent, _ = load_checkpoint(args.derain_checkpoint)
    else:
        recurrent = RecurrentDerainer(net_cfg, tau=args.tau).eval()
    single = recurrent.stage(0) if isinstance(recurrent, RecurrentDerainer) else recurrent
    haze_net = load_checkpoint(args.dehaze_checkpoint)[0] if args.dehaze_checkpoint \
        else DehazeNet(net_cfg).eval()
    full = PipelineConfig(tau=args.tau)
    methods = {
        "single": lambda img: derain_recurrent(img, single, 1),
        "recurrent": lambda img: derain_recurrent(img, recurrent, args.tau),
        "recurrent+dehaze": lambda img: run_sequence(
            img, full, {"derain": recurrent, "dehaze": haze_net}),
    }
    rng = np.random.default_rng(0)
    scales = [int(s) for s in args.scales.split(",")]
    images = [rng.random((s, s, 3)) for s in scales]
    rows = []
    for name, fn in methods.items():
        for scale, stats in time_inference(fn, images, args.warmup, args.repeats).items():
            rows.append({"method": name, "scale": scale, **stats})
            print(f"{name:18s} {scale:>9s} median {stats['median']:.4f} s")
    if args.out:
        out = output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out}.json").write_text(json.dumps(rows, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser():
    p = _Parser(prog="derain", description="Rain removal toolkit; see the subcommands below.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize a paired rain dataset")
    s.add_argument("--config", type=Path)
    s.add_argument("--manifest", type=Path, help="replay an existing manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--mode", choices=("light", "heavy", "haze"))
    s.add_argument("--backgrounds", type=Path, help="directory of background PNGs")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a derain or dehaze network")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run the derain/dehaze pipeline on images")
    i.add_argument("inputs", nargs="+")
    i.add_argument("--pipeline", type=Path)
    i.add_argument("--derain-checkpoint")
    i.add_argument("--dehaze-checkpoint")
    i.add_argument("--sequence", help="comma-separated stages, e.g. derain,dehaze,derain")
    i.add_argument("--tau", type=int)
    i.add_argument("--montage", action="store_true")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM table of results against ground truth")
    e.add_argument("--results", type=Path, required=True)
    e.add_argument("--truth", type=Path, required=True)
    e.add_argument("--pred-suffix", default="")
    e.add_argument("--truth-suffix", default="_B")
    e.add_argument("--method")
    e.add_argument("--dataset")
    e.add_argument("--out", required=True, help="report prefix (.csv and .json are added)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time inference at several image scales")
    b.add_argument("--derain-checkpoint")
    b.add_argument("--dehaze-checkpoint")
    b.add_argument("--tau", type=int, default=3)
    b.add_argument("--scales", default="80,500")
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, PipelineError) as err:
        print(f"derain {args.command}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, TrainingDiverged, OSError, RuntimeError) as err:
        print(f"derain {args.command}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
