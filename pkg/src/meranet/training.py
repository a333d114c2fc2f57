"""Optimization loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tape, backward
from .data import DatasetManifest, augment_hflip, load_samples, read_tensor, write_tensor
from .model import (
    DEFAULT_CHANNELS,
    RESIDUAL_PROJECTIONS,
    VARIANTS,
    ModelGraph,
    forward,
    model_from_config,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_acc")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    def __init__(self, key: str) -> None:
        super().__init__(f"checkpoint payload is missing tensor {key!r}")
        self.key = key


class PayloadMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 0
    seed: int = 0
    variant: str = "meranet18"
    ch_variant: str = "SCNN"
    st_kernel: int = 5
    r: int = 16
    num_classes: int = 3
    channels: list = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    residual_projection: str = "conv"
    augment: bool = True
    schedule: str = "cosine"
    optimizer: str = "sgd_momentum"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, name: str, msg: str) -> None:
            if not ok:
                raise ConfigError(name, msg)

        need(isinstance(self.epochs, int) and self.epochs >= 1, "epochs", "must be an integer >= 1")
        need(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size", "must be an integer >= 1")
        need(self.lr > 0, "lr", "must be positive")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        need(0 <= self.warmup_epochs < self.epochs, "warmup_epochs", "must lie in [0, epochs)")
        need(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        need(self.ch_variant in ("SCNN", "SMLP"), "ch_variant", "must be SCNN or SMLP")
        need(self.st_kernel in (3, 5, 7), "st_kernel", "must be 3, 5 or 7")
        need(self.r >= 1, "r", "must be >= 1")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(len(self.channels) >= 2 and len(self.channels) % 2 == 0, "channels", "needs an even number of widths")
        need(self.residual_projection in RESIDUAL_PROJECTIONS, "residual_projection", f"must be one of {RESIDUAL_PROJECTIONS}")
        need(self.schedule == "cosine", "schedule", "only 'cosine' is supported")
        need(self.optimizer == "sgd_momentum", "optimizer", "only 'sgd_momentum' is supported")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in doc:
            if k not in known:
                raise ConfigError(k, "unknown field")
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError("config", str(e)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> dict:
        return {
            "variant": self.variant,
            "num_classes": self.num_classes,
            "ch_variant": self.ch_variant,
            "st_kernel": self.st_kernel,
            "r": self.r,
            "residual_projection": self.residual_projection,
            "channels": list(self.channels),
            "seed": self.seed,
        }


def cosine_lr(epoch: float, total: int, lr0: float, warmup: int = 0) -> float:
    """Learning rate at ``epoch`` annealed from ``lr0`` to 0 along a half cosine.

    With ``warmup > 0`` the first ``warmup`` epochs ramp linearly from
    ``lr0 / warmup`` up to ``lr0`` and the cosine spans the remainder.
    """
    if epoch < 0 or epoch > total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if warmup and epoch < warmup:
        return lr0 * (epoch + 1) / warmup
    span = total - warmup
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * (epoch - warmup) / span))


class SGDMomentum:
    """``v <- mu * v - lr * (g + wd * theta)``; ``theta <- theta + v``."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()}

    def step(self, grads, lr: float) -> None:
        lr32 = np.float32(lr)
        mu = np.float32(self.momentum)
        for key, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            g = g.astype(np.float32, copy=False)
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            v = mu * self.velocity[key] - lr32 * g
            self.velocity[key] = v
            p.assign(p.data + v)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    confusion: list[list[int]]
    loss: float
    predictions: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: ModelGraph, clips: Sequence[Tensor], batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Logits for each clip in inference mode, batched."""
    out = []
    for lo in range(0, len(clips), batch_size):
        batch = Tensor(np.stack([c.data for c in clips[lo : lo + batch_size]]))
        out.append(forward(model, batch, "infer").data)
    logits = np.concatenate(out)
    return logits, logits.argmax(axis=1)


def evaluate_logits(logits: np.ndarray, labels: Sequence[int], num_classes: int) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = logits.argmax(axis=1)  # ties resolve to the lowest class index
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    rows = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / rows[i]) if rows[i] else float("nan") for i in range(num_classes)]
    loss, _ = ops.softmax_cross_entropy(Tensor(logits), labels)
    return EvalResult(
        accuracy=float((preds == labels).mean()),
        per_class=per_class,
        confusion=confusion.tolist(),
        loss=loss.item(),
        predictions=preds.tolist(),
    )


def evaluate(model: ModelGraph, manifest: DatasetManifest, split: str, batch_size: int = 8) -> EvalResult:
    samples = load_samples(manifest, split)
    logits, _ = predict(model, [s.tensor for s in samples], batch_size)
    return evaluate_logits(logits, [s.label for s in samples], model.num_classes)


# --------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    model: ModelGraph
    history: list[dict]
    best_epoch: int
    best_val_acc: float


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        w.writerow(
            [row["epoch"], repr(float(row["lr"])), repr(float(row["train_loss"])),
             repr(float(row["val_loss"])), repr(float(row["val_acc"]))]
        )
    return buf.getvalue()


def fit(
    model: Optional[ModelGraph],
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir=None,
) -> FitResult:
    """Train with SGD and momentum under a per-epoch cosine schedule.

    Each epoch shuffles the train split with a generator keyed by
    ``(seed, epoch)``; per-clip flips draw from ``(seed, epoch, crc32(clip id))``.
    When ``out_dir`` is set, ``metrics.csv``, ``final/`` and ``best/``
    checkpoints are written there.
    """
    if model is None:
        model = model_from_config(config.model_config())
    train = load_samples(manifest, "train")
    val = load_samples(manifest, "val")
    params = model.parameters()
    opt = SGDMomentum(params, config.momentum, config.weight_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best = (-1.0, math.inf)
    best_epoch = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.warmup_epochs)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        seen = 0
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            clips = []
            for i in idx:
                clip = train[i].tensor
                if config.augment:
                    key = zlib.crc32(train[i].source.encode("utf-8"))
                    clip = augment_hflip(clip, np.random.default_rng([config.seed, epoch, key]))
                clips.append(clip.data)
            batch = Tensor(np.stack(clips))
            labels = [train[i].label for i in idx]
            with Tape() as tape:
                logits = forward(model, batch, "train")
                loss, _ = ops.softmax_cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch + 1}")
            grads = backward(tape, loss)
            opt.step(grads, lr)
            loss_sum += value * len(idx)
            seen += len(idx)

        logits, _ = predict(model, [s.tensor for s in val], config.batch_size)
        res = evaluate_logits(logits, [s.label for s in val], model.num_classes)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "val_loss": res.loss,
            "val_acc": res.accuracy,
        }
        history.append(row)
        log.info("epoch %d lr %.5f train_loss %.4f val_loss %.4f val_acc %.3f", *row.values())
        if (res.accuracy, -res.loss) > (best[0], -best[1]):
            best = (res.accuracy, res.loss)
            best_epoch = epoch + 1
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best", config=config.to_dict(), epoch=epoch + 1, history=history)
        if out_dir is not None:
            (out_dir / "metrics.csv").write_text(history_csv(history))

    if out_dir is not None:
        save_checkpoint(model, out_dir / "final", config=config.to_dict(), epoch=config.epochs, history=history)
    return FitResult(model=model, history=history, best_epoch=best_epoch, best_val_acc=best[0])


# --------------------------------------------------------------------------
# checkpoints


def _tensor_file(key: str) -> str:
    return key.replace("/", ".") + ".mera"


def save_checkpoint(model: ModelGraph, path, *, config: Optional[dict] = None, epoch: int = 0,
                    history: Sequence[dict] = ()) -> None:
    """Directory holding ``header.json`` and one ``MERA`` file per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state()
    tensors = {}
    for key, t in state.items():
        name = _tensor_file(key)
        write_tensor(path / name, t)
        tensors[key] = {"file": name, "shape": list(t.shape)}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config(),
        "config": config,
        "epoch": epoch,
        "history": list(history),
        "tensors": tensors,
    }
    (path / "header.json").write_text(json.dumps(header, indent=2) + "\n")


def read_checkpoint_header(path) -> dict:
    header = json.loads((Path(path) / "header.json").read_text())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {header.get('format_version')!r}, expected {CHECKPOINT_VERSION}"
        )
    return header


def load_checkpoint(path) -> tuple[ModelGraph, dict]:
    path = Path(path)
    header = read_checkpoint_header(path)
    model = model_from_config(header["model"])
    state = model.state()
    listed = header["tensors"]
    if set(listed) != set(state):
        missing = sorted(set(state) - set(listed))
        extra = sorted(set(listed) - set(state))
        if missing:
            raise MissingTensorError(missing[0])
        raise PayloadMismatchError(f"header lists unknown tensors {extra}")
    for key, t in state.items():
        file = path / listed[key]["file"]
        if not file.exists():
            raise MissingTensorError(key)
        loaded = read_tensor(file)
        if loaded.shape != t.shape or list(loaded.shape) != listed[key]["shape"]:
            raise PayloadMismatchError(f"{key}: payload shape {loaded.shape}, expected {t.shape}")
        t.assign(loaded.data)
    return model, header
