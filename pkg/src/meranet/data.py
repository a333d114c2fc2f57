"""Clip preprocessing, dataset manifests, splits and the ``MERA`` tensor container."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

SPLITS = ("train", "val", "test")
DEFAULT_T = 16
DEFAULT_SIZE = 112

# --------------------------------------------------------------------------
# MERA tensor container

MAGIC = b"MERA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


class TensorFileError(ValueError):
    """Base class for malformed ``MERA`` files."""


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedTensorFileError(TensorFileError):
    pass


class TrailingDataError(TensorFileError):
    pass


def encode_tensor(t: Tensor) -> bytes:
    extents = struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, t.ndim) + extents + payload


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 4:
        raise TruncatedTensorFileError("file shorter than the magic bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedTensorFileError("truncated header")
    _, version, rank = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    if rank < 1:
        raise TensorFileError("rank must be >= 1")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise TruncatedTensorFileError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    if min(shape) < 1:
        raise TensorFileError(f"invalid extents {shape}")
    off += 4 * rank
    need = 4 * math.prod(shape)
    have = len(buf) - off
    if have < need:
        raise TruncatedTensorFileError(f"payload has {have} bytes, expected {need}")
    if have > need:
        raise TrailingDataError(f"{have - need} unexpected bytes after payload")
    arr = np.frombuffer(buf, dtype="<f4", count=math.prod(shape), offset=off)
    return Tensor(arr.reshape(shape).astype(np.float32))


def write_tensor(path, t: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------
# netpbm frames


def netpbm_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not buf.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed netpbm header")
        fields.append(int(buf[start:pos]))
    width, height, maxval = fields
    if not 0 < maxval < 256:
        raise ValueError("only 8-bit netpbm files are supported")
    return width, height, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as float32 ``[3, H, W]`` scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, maxval, off = netpbm_header(buf, b"P6")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1) / maxval).astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    """Write ``[3, H, W]`` values in [0, 1] as binary P6."""
    img = np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes())


# --------------------------------------------------------------------------
# clip construction


def extract_clip(length: int, apex: int, t: int = DEFAULT_T) -> list[int]:
    """Frame indices of a ``t``-frame window around ``apex``, edge frames replicated.

    The window holds ``t // 2`` frames before the apex, the apex itself and
    ``ceil(t / 2) - 1`` frames after it.
    """
    if length < 1 or t < 1:
        raise ValueError("frame count and clip length must be >= 1")
    if not 0 <= apex < length:
        raise ValueError(f"apex {apex} outside [0, {length})")
    start = apex - t // 2
    return [min(max(i, 0), length - 1) for i in range(start, start + t)]


def linear_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` weights for 1-D linear interpolation with half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for j in range(n_out):
        src = min(max((j + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[j, lo] += 1.0 - frac
        m[j, hi] += frac
    return m


def resample_linear(values: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Separable (bi/tri)linear resize of the trailing ``len(out_shape)`` axes."""
    out = np.asarray(values, dtype=np.float64)
    lead = out.ndim - len(out_shape)
    for k, n_out in enumerate(out_shape):
        axis = lead + k
        if out.shape[axis] == n_out:
            continue
        m = linear_resample_matrix(out.shape[axis], n_out)
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return out


def resize_bilinear(image: Tensor, out: tuple[int, int] = (DEFAULT_SIZE, DEFAULT_SIZE)) -> Tensor:
    if image.ndim != 3:
        raise ShapeError(f"expected [C, H, W], got {image.shape}")
    return Tensor(resample_linear(image.data, out), dtype=image.dtype)


def normalize_sample(clip: Tensor, mean: Sequence[float], std: Sequence[float]) -> Tensor:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (clip.shape[0],) or std.shape != (clip.shape[0],):
        raise ShapeError("mean/std need one entry per channel")
    if np.any(std <= 0):
        raise ValueError("std entries must be positive")
    bshape = (-1,) + (1,) * (clip.ndim - 1)
    return Tensor((clip.data - mean.reshape(bshape)) / std.reshape(bshape), dtype=clip.dtype)


def hflip(clip: Tensor) -> Tensor:
    return Tensor(clip.data[..., ::-1], dtype=clip.dtype)


def augment_hflip(
    clip: Tensor, rng: np.random.Generator, p: float = 0.5, force: Optional[bool] = None
) -> Tensor:
    """Mirror the width axis with probability ``p``; ``force`` overrides the draw."""
    flip = rng.random() < p if force is None else force
    return hflip(clip) if flip else clip


def channel_stats(clips: Iterable[np.ndarray]) -> tuple[list[float], list[float]]:
    """Per-channel mean and population std over every voxel of ``[C, ...]`` arrays."""
    total = sq = None
    count = 0
    for c in clips:
        flat = np.asarray(c, dtype=np.float64).reshape(c.shape[0], -1)
        s, q = flat.sum(axis=1), (flat**2).sum(axis=1)
        total = s if total is None else total + s
        sq = q if sq is None else sq + q
        count += flat.shape[1]
    if not count:
        raise ValueError("no clips to compute statistics from")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    return mean.tolist(), std.tolist()


# --------------------------------------------------------------------------
# manifest


class ManifestError(ValueError):
    pass


class InsufficientSamplesError(ManifestError):
    pass


@dataclass
class ClipEntry:
    id: str
    frame_dir: str
    frames: list[str]
    label: int
    apex: Optional[int] = None
    split: Optional[str] = None
    tensor: Optional[str] = None


@dataclass
class ClipSample:
    tensor: Tensor
    label: int
    source: str


@dataclass
class DatasetManifest:
    classes: list[str]
    clips: list[ClipEntry]
    mean: Optional[list[float]] = None
    std: Optional[list[float]] = None
    t: int = DEFAULT_T
    size: int = DEFAULT_SIZE
    root: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.classes:
            raise ManifestError("manifest lists no classes")
        seen = set()
        for c in self.clips:
            if c.id in seen:
                raise ManifestError(f"duplicate clip id {c.id!r}")
            seen.add(c.id)
            if not 0 <= c.label < len(self.classes):
                raise ManifestError(f"clip {c.id!r}: label {c.label} outside {len(self.classes)} classes")
            if c.apex is not None and c.frames and not 0 <= c.apex < len(c.frames):
                raise ManifestError(f"clip {c.id!r}: apex {c.apex} outside {len(c.frames)} frames")
            if c.split is not None and c.split not in SPLITS:
                raise ManifestError(f"clip {c.id!r}: split {c.split!r} not in {SPLITS}")
        for name in ("mean", "std"):
            v = getattr(self, name)
            if v is not None and len(v) != 3:
                raise ManifestError(f"{name} must have 3 entries")
        if self.std is not None and min(self.std) <= 0:
            raise ManifestError("std entries must be positive")

    def split(self, tag: str) -> list[ClipEntry]:
        return [c for c in self.clips if c.split == tag]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "clips": [asdict(c) for c in self.clips],
            "mean": self.mean,
            "std": self.std,
            "t": self.t,
            "size": self.size,
        }

    @classmethod
    def from_json(cls, doc: dict, root: Path = Path(".")) -> "DatasetManifest":
        try:
            clips = [ClipEntry(**c) for c in doc["clips"]]
            return cls(
                classes=list(doc["classes"]),
                clips=clips,
                mean=doc.get("mean"),
                std=doc.get("std"),
                t=int(doc.get("t", DEFAULT_T)),
                size=int(doc.get("size", DEFAULT_SIZE)),
                root=Path(root),
            )
        except (KeyError, TypeError) as e:
            raise ManifestError(f"malformed manifest: {e}") from None

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        self.root = path.parent

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), root=path.parent)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_dataset(
    manifest: DatasetManifest, train_frac: float, val_frac_of_train: float, seed: int
) -> DatasetManifest:
    """Stratified train/val/test tags, deterministic in ``seed``.

    Per class, ``round(n * (1 - train_frac))`` clips go to test and
    ``round(pool * val_frac_of_train)`` of the remaining pool to val.
    ``train_frac == 1`` yields no test split.
    """
    if not 0 < train_frac <= 1 or not 0 <= val_frac_of_train < 1:
        raise ValueError("train_frac must lie in (0, 1] and val_frac_of_train in [0, 1)")
    rng = np.random.default_rng(seed)
    clips = [ClipEntry(**asdict(c)) for c in manifest.clips]
    for label in range(len(manifest.classes)):
        members = [i for i, c in enumerate(clips) if c.label == label]
        if not members:
            continue
        if len(members) < 3:
            raise InsufficientSamplesError(
                f"class {manifest.classes[label]!r} has {len(members)} clips; stratification needs >= 3"
            )
        order = [members[i] for i in rng.permutation(len(members))]
        n_test = _round_half_up(len(order) * (1 - train_frac))
        n_val = _round_half_up((len(order) - n_test) * val_frac_of_train)
        for k, idx in enumerate(order):
            clips[idx].split = "test" if k < n_test else "val" if k < n_test + n_val else "train"
    return DatasetManifest(
        classes=list(manifest.classes), clips=clips, mean=manifest.mean, std=manifest.std,
        t=manifest.t, size=manifest.size, root=manifest.root,
    )


# --------------------------------------------------------------------------
# pipeline


def build_clip(entry: ClipEntry, manifest: DatasetManifest) -> np.ndarray:
    """Un-normalized ``[3, T, size, size]`` clip in [0, 1] read from PPM frames."""
    if not entry.frames:
        raise ManifestError(f"clip {entry.id!r} lists no frames")
    apex = entry.apex if entry.apex is not None else len(entry.frames) // 2
    idx = extract_clip(len(entry.frames), apex, manifest.t)
    frame_dir = manifest.resolve(entry.frame_dir)
    cache: dict[int, np.ndarray] = {}
    out = np.empty((3, manifest.t, manifest.size, manifest.size), dtype=np.float32)
    for k, i in enumerate(idx):
        if i not in cache:
            img = read_ppm(frame_dir / entry.frames[i])
            cache[i] = resample_linear(img, (manifest.size, manifest.size)).astype(np.float32)
        out[:, k] = cache[i]
    return out


def preprocess(manifest: DatasetManifest, out_dir) -> DatasetManifest:
    """Write normalized clips and statistics as ``MERA`` files plus a new manifest.

    Statistics come from the train split only (the whole set when no split
    is tagged) unless the manifest already carries them.
    """
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    raw = {c.id: build_clip(c, manifest) for c in manifest.clips}
    mean, std = manifest.mean, manifest.std
    if mean is None or std is None:
        source = [raw[c.id] for c in manifest.split("train")] or list(raw.values())
        mean, std = channel_stats(source)
    clips = []
    for c in manifest.clips:
        rel = f"clips/{c.id}.mera"
        write_tensor(out_dir / rel, normalize_sample(Tensor(raw[c.id]), mean, std))
        entry = ClipEntry(**asdict(c))
        entry.frame_dir = os.path.relpath(manifest.resolve(c.frame_dir), out_dir)
        entry.tensor = rel
        clips.append(entry)
    write_tensor(out_dir / "stats.mera", Tensor(np.array([mean, std], dtype=np.float64)))
    result = DatasetManifest(
        classes=list(manifest.classes), clips=clips, mean=list(mean), std=list(std),
        t=manifest.t, size=manifest.size, root=out_dir,
    )
    result.save(out_dir / "manifest.json")
    return result


def load_samples(manifest: DatasetManifest, split: str) -> list[ClipSample]:
    entries = manifest.split(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    out = []
    for c in entries:
        if c.tensor is None:
            raise ManifestError(f"clip {c.id!r} has not been preprocessed")
        t = read_tensor(manifest.resolve(c.tensor))
        if t.ndim != 4 or t.shape[0] != 3:
            raise ShapeError(f"clip {c.id!r}: expected [3, T, H, W], got {t.shape}")
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"clip {c.id!r} holds non-finite values")
        out.append(ClipSample(t, c.label, c.id))
    return out


# --------------------------------------------------------------------------
# synthetic data


def make_synthetic_dataset(
    out_dir,
    per_class: int = 10,
    seed: int = 0,
    *,
    frame_size: int = 40,
    t: int = DEFAULT_T,
    size: int = DEFAULT_SIZE,
) -> DatasetManifest:
    """Three classes of noisy frame sequences with a moving bright square.

    Class 0 moves the square left to right, class 1 top to bottom and
    class 2 keeps it still while it grows. Frame counts and apex positions
    vary per clip, so edge replication is exercised.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    classes = ["horizontal", "vertical", "growing"]
    clips = []
    s = frame_size
    for label in range(3):
        for k in range(per_class):
            cid = f"{classes[label]}_{k:03d}"
            n_frames = int(rng.integers(max(4, t // 2), t + 8))
            apex = int(rng.integers(0, n_frames))
            frame_dir = out_dir / "frames" / cid
            frame_dir.mkdir(parents=True, exist_ok=True)
            tint = rng.uniform(0.6, 1.0, size=3)
            cy, cx = rng.uniform(0.3, 0.7, size=2) * s
            names = []
            for f in range(n_frames):
                phase = f / max(1, n_frames - 1)
                img = rng.uniform(0.0, 0.25, size=(3, s, s))
                half = s * 0.12
                y, x = cy, cx
                if label == 0:
                    x = (0.15 + 0.7 * phase) * s
                elif label == 1:
                    y = (0.15 + 0.7 * phase) * s
                else:
                    half = s * (0.05 + 0.2 * phase)
                y0, y1 = int(max(0, y - half)), int(min(s, y + half + 1))
                x0, x1 = int(max(0, x - half)), int(min(s, x + half + 1))
                img[:, y0:y1, x0:x1] = tint[:, None, None]
                name = f"{f:04d}.ppm"
                write_ppm(frame_dir / name, img)
                names.append(name)
            clips.append(
                ClipEntry(
                    id=cid, frame_dir=os.path.relpath(frame_dir, out_dir), frames=names,
                    label=label, apex=apex,
                )
            )
    manifest = DatasetManifest(classes=classes, clips=clips, t=t, size=size, root=out_dir)
    manifest.save(out_dir / "raw_manifest.json")
    return manifest
