"""Xavier-uniform initialization and per-layer random streams."""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

from .tensor import Tensor


def xavier_bound(d_in: int, d_out: int) -> float:
    if d_in < 1 or d_out < 1:
        raise ValueError("fan-in and fan-out must be >= 1")
    return math.sqrt(6.0 / (d_in + d_out))


def xavier_init(shape: Sequence[int], d_in: int, d_out: int, rng: np.random.Generator) -> Tensor:
    """Trainable tensor with entries drawn i.i.d. from U[-rv, rv], rv = sqrt(6 / (d_in + d_out))."""
    rv = xavier_bound(d_in, d_out)
    values = rng.random(size=tuple(shape), dtype=np.float32)
    values *= np.float32(2.0 * rv)
    values -= np.float32(rv)
    # float32 rounding can land one ulp outside the bound
    np.clip(values, np.float32(-rv), np.float32(rv), out=values)
    return Tensor(values, requires_grad=True)


def conv_fans(weight_shape: Sequence[int]) -> tuple[int, int]:
    """Fans of an ``[C_out, C_in, kt, kh, kw]`` kernel: channels times receptive-field volume."""
    c_out, c_in, *kernel = weight_shape
    volume = math.prod(kernel)
    return c_in * volume, c_out * volume


def layer_rng(seed: int, path: str) -> np.random.Generator:
    """Independent stream per layer path, so shared layers match across model variants."""
    return np.random.default_rng([int(seed), zlib.crc32(path.encode("utf-8"))])


def conv_weight(shape: Sequence[int], seed: int, path: str) -> Tensor:
    d_in, d_out = conv_fans(shape)
    t = xavier_init(shape, d_in, d_out, layer_rng(seed, path))
    t.name = path
    return t


def linear_weight(shape: Sequence[int], seed: int, path: str) -> Tensor:
    d_out, d_in = shape
    t = xavier_init(shape, d_in, d_out, layer_rng(seed, path))
    t.name = path
    return t


def zeros_param(shape: Sequence[int], path: str) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float32), requires_grad=True, name=path)
