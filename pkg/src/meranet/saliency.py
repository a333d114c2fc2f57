"""Grad-CAM saliency over 3-D feature volumes and PGM export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .autodiff import Tape, backward
from .data import netpbm_header, resample_linear
from .model import BLOCK_STAGES, ModelGraph, forward
from .tensor import ShapeError, Tensor

DEFAULT_LAYER = "block4_2/st"

ForwardFn = Callable[[Tensor], tuple[Tensor, dict]]


class UnknownLayerError(KeyError):
    pass


@dataclass
class SaliencyMap:
    values: Tensor  # [T_l, H_l, W_l] at layer resolution
    upsampled: Tensor  # [T, H, W] at clip resolution
    target: int
    layer: str


def layer_paths(model: ModelGraph) -> list[str]:
    return ["stem/out"] + [f"{b.name}/{s}" for b in model.blocks for s in BLOCK_STAGES]


def default_layer(model: ModelGraph) -> str:
    return f"{model.blocks[-1].name}/st"


def grad_cam_with(forward_fn: ForwardFn, clip: Tensor, target: int, layer: str) -> SaliencyMap:
    """Grad-CAM for any forward function returning ``(logits, captured_features)``.

    ``clip`` is a single ``[C, T, H, W]`` sample; the feature named ``layer``
    must be a ``[1, C_l, T_l, H_l, W_l]`` tensor recorded on the tape.
    """
    if clip.ndim != 4:
        raise ShapeError(f"expected one [C, T, H, W] clip, got {clip.shape}")
    # tracking the input keeps every activation on the tape even for frozen weights
    batch = Tensor(clip.data[None], dtype=clip.dtype, requires_grad=True)
    with Tape() as tape:
        logits, feats = forward_fn(batch)
        if layer not in feats:
            raise UnknownLayerError(f"unknown layer path {layer!r}; known: {sorted(feats)}")
        if not 0 <= target < logits.shape[1]:
            raise ValueError(f"target class {target} outside [0, {logits.shape[1]})")
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[0, target] = 1.0
        score = ops.total(ops.broadcast_mul(logits, Tensor(onehot, dtype=logits.dtype)))
    acts = feats[layer]
    grads = backward(tape, score, wrt=[acts])[acts].astype(np.float64)[0]
    a = acts.data.astype(np.float64)[0]
    weights = grads.mean(axis=(1, 2, 3))
    cam = np.maximum(np.tensordot(weights, a, axes=(0, 0)), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    up = np.clip(resample_linear(cam, clip.shape[1:]), 0.0, 1.0)
    return SaliencyMap(Tensor(cam), Tensor(up), target, layer)


def grad_cam(model: ModelGraph, clip: Tensor, target: int, layer: Optional[str] = None) -> SaliencyMap:
    layer = layer or default_layer(model)
    if layer not in layer_paths(model):
        raise UnknownLayerError(f"unknown layer path {layer!r}")

    def fwd(x: Tensor):
        feats: dict = {}
        logits = forward(model, x, "infer", capture=feats)
        return logits, feats

    return grad_cam_with(fwd, clip, target, layer)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes by ``round(255 * v)`` with halves rounded up."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_pgm(smap: SaliencyMap, frame: int, path) -> None:
    vol = smap.upsampled.data
    if not 0 <= frame < vol.shape[0]:
        raise IndexError(f"frame {frame} outside [0, {vol.shape[0]})")
    img = quantize(vol[frame])
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary P5 image as float values in [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, maxval, off = netpbm_header(buf, b"P5")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off)
    return raw.reshape(h, w) / maxval
