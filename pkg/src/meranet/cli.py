"""Batch command-line entry point: ``meranet <subcommand> [flags]``.

Every subcommand prints its effective configuration as one JSON line
first. That line is a valid ``--config`` file reproducing the run.
Exit status: 0 on success, 2 for usage or configuration errors,
1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from .data import DatasetManifest, load_samples, make_synthetic_dataset, preprocess, split_dataset
from .gradcheck import TOLERANCE, block_checks, op_checks
from .model import DEFAULT_CHANNELS, attention_overhead, build_model, count_params, shape_table
from .saliency import export_pgm, grad_cam
from .training import ConfigError, TrainConfig, evaluate, fit, load_checkpoint, predict

log = logging.getLogger("meranet")

SUBCOMMANDS = ("train", "eval", "preprocess", "params", "shapes", "gradcheck", "saliency")

# published totals for the plain and attention variants at the default widths
PUBLISHED_PARAMS = {"resnet3d18": 33_167_811, "meranet18": 33_547_552}

TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))
EXTRA_DEFAULTS = {
    "data": None,
    "out": None,
    "checkpoint": None,
    "layer": None,
    "target_class": None,
    "frame": None,
    "clip": None,
    "split": None,
    "t": 16,
    "size": 112,
    "threads": 1,
    "synthetic": False,
    "per_class": 10,
    "train_frac": None,
    "val_frac": 0.2,
    "verbose": False,
}


def _channels(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    add = common.add_argument
    add("--config", help="JSON file with any of the fields below; flags win")
    add("--data", default=S, help="manifest JSON (or a directory holding manifest.json)")
    add("--out", default=S, help="output directory or file")
    add("--variant", default=S, choices=("meranet18", "resnet3d18"))
    add("--ch-variant", dest="ch_variant", default=S, choices=("SCNN", "SMLP"))
    add("--st-kernel", dest="st_kernel", type=int, default=S, choices=(3, 5, 7))
    add("--r", type=int, default=S, help="channel reduction ratio")
    add("--channels", type=_channels, default=S, help="block widths, e.g. 8,8,16,16,32,32,64,64")
    add("--residual-projection", dest="residual_projection", default=S, choices=("conv", "zero_pad"))
    add("--num-classes", dest="num_classes", type=int, default=S)
    add("--t", type=int, default=S, help="frames per clip")
    add("--size", type=int, default=S, help="spatial side length of a clip")
    add("--seed", type=int, default=S)
    add("--threads", type=int, default=S, help="BLAS threads (default 1, bit-deterministic)")
    add("--epochs", type=int, default=S)
    add("--batch-size", dest="batch_size", type=int, default=S)
    add("--lr", type=float, default=S)
    add("--momentum", type=float, default=S)
    add("--weight-decay", dest="weight_decay", type=float, default=S)
    add("--warmup-epochs", dest="warmup_epochs", type=int, default=S)
    add("--no-augment", dest="augment", action="store_false", default=S)
    add("--checkpoint", default=S, help="checkpoint directory")
    add("--split", default=S, choices=("train", "val", "test"))
    add("--clip", default=S, help="clip id for saliency (default: first clip of the split)")
    add("--layer", default=S, help="feature path such as block4_2/st")
    add("--class", dest="target_class", type=int, default=S, help="target class (default: predicted)")
    add("--frame", type=int, default=S, help="single frame to export (default: all)")
    add("--synthetic", action="store_true", default=S, help="generate the synthetic moving-square set")
    add("--per-class", dest="per_class", type=int, default=S)
    add("--train-frac", dest="train_frac", type=float, default=S)
    add("--val-frac", dest="val_frac", type=float, default=S)
    add("-v", "--verbose", action="store_true", default=S)

    parser = argparse.ArgumentParser(prog="meranet", description="3-D residual attention network toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    helps = {
        "train": "fit a model and write checkpoints plus metrics.csv",
        "eval": "accuracy and confusion matrix of a checkpoint on a split",
        "preprocess": "turn frame folders into normalized clip tensors",
        "params": "per-layer parameter table and variant totals",
        "shapes": "per-stage output extents",
        "gradcheck": "finite-difference check of every op and of whole blocks",
        "saliency": "Grad-CAM maps exported as PGM frames",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {**TrainConfig().to_dict(), **EXTRA_DEFAULTS}
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("config", f"cannot read {args.config}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config", "top level must be a JSON object")
        for k, v in doc.items():
            if k not in cfg:
                raise ConfigError(k, "unknown field")
            cfg[k] = v
    cfg.update(flags)
    for name in ("t", "size", "threads", "per_class"):
        if not isinstance(cfg[name], int) or cfg[name] < 1:
            raise ConfigError(name, "must be an integer >= 1")
    if cfg["frame"] is not None and cfg["frame"] < 0:
        raise ConfigError("frame", "must be >= 0")
    TrainConfig.from_dict({k: cfg[k] for k in TRAIN_FIELDS})
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in TRAIN_FIELDS})


def _need(cfg: dict, name: str) -> str:
    if cfg[name] is None:
        raise ConfigError(name, "required for this subcommand")
    return cfg[name]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return DatasetManifest.load(path)


def _model(cfg: dict):
    tc = train_config(cfg)
    return build_model(
        cfg["variant"], tc.num_classes, tc.ch_variant, tc.st_kernel, tc.seed,
        channels=tc.channels, r=tc.r, residual_projection=tc.residual_projection,
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict) -> int:
    manifest = load_manifest(_need(cfg, "data"))
    out = Path(cfg["out"] or "runs/train")
    tc = train_config(cfg)
    model = load_checkpoint(cfg["checkpoint"])[0] if cfg["checkpoint"] else None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    result = fit(model, manifest, tc, out)
    train_acc = evaluate(result.model, manifest, "train").accuracy
    last = result.history[-1]
    print(f"epochs {len(result.history)}  train_acc {train_acc:.4f}  val_acc {last['val_acc']:.4f}  "
          f"best_val_acc {result.best_val_acc:.4f} (epoch {result.best_epoch})")
    print(f"wrote {out / 'metrics.csv'}, {out / 'best'}, {out / 'final'}")
    return 0


def _default_split(manifest: DatasetManifest) -> str:
    return "test" if manifest.split("test") else "val"


def cmd_eval(cfg: dict) -> int:
    model, header = load_checkpoint(_need(cfg, "checkpoint"))
    manifest = load_manifest(_need(cfg, "data"))
    split = cfg["split"] or _default_split(manifest)
    res = evaluate(model, manifest, split)
    print(f"split {split}  accuracy {res.accuracy:.4f}  loss {res.loss:.6f}")
    for name, acc in zip(manifest.classes, res.per_class):
        print(f"  {name:<16} {acc:.4f}")
    print("confusion (rows: true, columns: predicted)")
    for row in res.confusion:
        print("  " + " ".join(f"{v:4d}" for v in row))
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]) / f"eval_{split}.json"
    if out.suffix != ".json":
        out = out / f"eval_{split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"split": split, "classes": manifest.classes, "epoch": header.get("epoch"), **res.to_dict()}
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_preprocess(cfg: dict) -> int:
    out = Path(_need(cfg, "out"))
    if cfg["synthetic"]:
        raw = make_synthetic_dataset(out / "raw", cfg["per_class"], cfg["seed"], t=cfg["t"], size=cfg["size"])
        train_frac = 1.0 if cfg["train_frac"] is None else cfg["train_frac"]
    else:
        raw = load_manifest(_need(cfg, "data"))
        raw.t, raw.size = cfg["t"], cfg["size"]
        train_frac = cfg["train_frac"]
    if train_frac is not None or not any(c.split for c in raw.clips):
        raw = split_dataset(raw, 0.8 if train_frac is None else train_frac, cfg["val_frac"], cfg["seed"])
    result = preprocess(raw, out)
    counts = {s: len(result.split(s)) for s in ("train", "val", "test")}
    print(f"clips {len(result.clips)}  " + "  ".join(f"{k} {v}" for k, v in counts.items()))
    print(f"mean {[round(v, 6) for v in result.mean]}  std {[round(v, 6) for v in result.std]}")
    print(f"wrote {out / 'manifest.json'}")
    return 0


def cmd_params(cfg: dict) -> int:
    base_cfg = dict(cfg, variant="resnet3d18")
    models = {"resnet3d18": _model(base_cfg), "meranet18": _model(dict(cfg, variant="meranet18"))}
    totals = {k: count_params(m)[0] for k, m in models.items()}
    total, by_layer = count_params(models[cfg["variant"]])
    width = max(len(k) for k in by_layer)
    print(f"{'layer':<{width}}  {'params':>10}")
    for path, n in by_layer.items():
        print(f"{path:<{width}}  {n:>10,}")
    print(f"{'total':<{width}}  {total:>10,}")
    print()

    delta = totals["meranet18"] - totals["resnet3d18"]
    closed = attention_overhead(cfg["channels"], cfg["r"], cfg["st_kernel"])
    default_plan = list(cfg["channels"]) == list(DEFAULT_CHANNELS) and cfg["num_classes"] == 3
    published = dict(PUBLISHED_PARAMS) if default_plan else {}
    if published:
        published["delta"] = published["meranet18"] - published["resnet3d18"]
    print(f"{'variant':<12} {'counted':>12} {'published':>12} {'difference':>12}")
    for name, n in (*totals.items(), ("delta", delta)):
        ref = published.get(name)
        ref_s = f"{ref:>12,}" if ref is not None else f"{'n/a':>12}"
        diff = f"{n - ref:>+12,}" if ref is not None else f"{'n/a':>12}"
        print(f"{name:<12} {n:>12,} {ref_s} {diff}")
    verdict = "equal" if closed == delta else "MISMATCH"
    print(f"closed-form attention overhead (r={cfg['r']}, k={cfg['st_kernel']}): {closed:,}  "
          f"counted delta: {delta:,}  {verdict}")

    print()
    print("attention parameters per block")
    attn = models["meranet18"]
    for b in attn.blocks:
        n_ch = sum(t.size for t in b.ch_attn.tensors().values())
        n_st = sum(t.size for t in b.st_attn.tensors().values())
        print(f"  {b.name:<10} channels {b.out_channels:>4}  channel {n_ch:>7,}  spatio-temporal {n_st:>4}  "
              f"sum {n_ch + n_st:>7,}")
    return 0 if closed == delta else 1


def _fmt_shape(shape) -> str:
    return "x".join(str(v) for v in shape)


def cmd_shapes(cfg: dict) -> int:
    model = _model(cfg)
    extents = (model.in_channels, cfg["t"], cfg["size"], cfg["size"])
    print(f"{'stage':<10} output")
    print(f"{'input':<10} {_fmt_shape(extents)}")
    for name, shape in shape_table(model, extents):
        print(f"{name:<10} {_fmt_shape(shape)}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    failed = 0
    for title, results in (("op", op_checks(cfg["seed"])), ("block", block_checks(cfg["seed"]))):
        print(f"{title} checks (max relative error, tolerance {TOLERANCE:g})")
        for r in results:
            failed += not r.passed
            print(f"  {'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.error:.3e}")
    print("all checks passed" if not failed else f"{failed} checks failed")
    return 0 if not failed else 1


def cmd_saliency(cfg: dict) -> int:
    model, _ = load_checkpoint(_need(cfg, "checkpoint"))
    manifest = load_manifest(_need(cfg, "data"))
    split = cfg["split"] or _default_split(manifest)
    samples = load_samples(manifest, split)
    if cfg["clip"] is not None:
        match = [s for s in samples if s.source == cfg["clip"]]
        if not match:
            raise ConfigError("clip", f"no clip {cfg['clip']!r} in split {split!r}")
        sample = match[0]
    else:
        sample = samples[0]
    target = cfg["target_class"]
    if target is None:
        target = int(predict(model, [sample.tensor])[1][0])
    smap = grad_cam(model, sample.tensor, target, cfg["layer"])
    out = Path(cfg["out"] or "saliency")
    out.mkdir(parents=True, exist_ok=True)
    n_frames = smap.upsampled.shape[0]
    if cfg["frame"] is not None and cfg["frame"] >= n_frames:
        raise ConfigError("frame", f"must be < {n_frames}")
    frames = [cfg["frame"]] if cfg["frame"] is not None else range(n_frames)
    stem = f"{sample.source}_{smap.layer.replace('/', '.')}_c{target}"
    for f in frames:
        path = out / f"{stem}_f{f:02d}.pgm"
        export_pgm(smap, f, path)
        print(f"wrote {path}")
    print(f"clip {sample.source}  label {sample.label}  target {target}  layer {smap.layer}  "
          f"map {_fmt_shape(smap.values.shape)}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "preprocess": cmd_preprocess,
    "params": cmd_params,
    "shapes": cmd_shapes,
    "gradcheck": cmd_gradcheck,
    "saliency": cmd_saliency,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    try:
        cfg = effective_config(args)
    except ConfigError as e:
        print(f"meranet {args.command}: invalid config: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print(json.dumps(cfg, sort_keys=True))
    try:
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"meranet {args.command}: invalid config: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  one-line diagnostic, nonzero exit
        print(f"meranet {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
