"""Dense row-major float tensors and the parameter records built from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible for an operation."""


class Tensor:
    """Immutable dense array of IEEE-754 floats in row-major order.

    Storage is 32-bit unless ``dtype=np.float64`` is requested explicitly,
    which lets the finite-difference harness run the same kernels without
    float32 round-off swamping the differences.

    ``requires_grad`` marks a trainable parameter; the autodiff tape collects
    gradients for every such tensor it sees.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ) -> None:
        arr = np.asarray(data)
        dtype = np.dtype(DEFAULT_DTYPE if dtype is None else dtype)
        if dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported tensor dtype {dtype}")
        arr = np.array(arr, dtype=dtype, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, dtype) -> "Tensor":
        # internal fast path: ``arr`` is freshly computed and not aliased
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = False
        t.name = None
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], **kw) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=kw.pop("dtype", DEFAULT_DTYPE)), **kw)

    @classmethod
    def ones(cls, shape: Sequence[int], **kw) -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=kw.pop("dtype", DEFAULT_DTYPE)), **kw)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def strides(self) -> tuple[int, ...]:
        """Row-major strides counted in elements."""
        out = []
        acc = 1
        for extent in reversed(self.shape):
            out.append(acc)
            acc *= extent
        return tuple(reversed(out))

    def offset(self, index: Sequence[int]) -> int:
        if len(index) != self.ndim:
            raise IndexError(f"expected {self.ndim} indices, got {len(index)}")
        for i, n in zip(index, self.shape):
            if not 0 <= i < n:
                raise IndexError(f"index {tuple(index)} out of range for {self.shape}")
        return sum(i * s for i, s in zip(index, self.strides))

    def at(self, *index: int) -> float:
        return float(self._data.reshape(-1)[self.offset(index)])

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the underlying data."""
        return self._data.copy()

    def assign(self, values: np.ndarray) -> None:
        """Replace the contents in place. Reserved for optimizer steps and running stats."""
        values = np.asarray(values)
        if values.shape != self.shape:
            raise ShapeError(f"cannot assign {values.shape} into {self.shape}")
        arr = np.array(values, dtype=self.dtype, order="C", copy=True)
        arr.flags.writeable = False
        self._data = arr

    def retype(self, dtype) -> None:
        """Change the storage precision in place, keeping identity."""
        dtype = np.dtype(dtype)
        if dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported tensor dtype {dtype}")
        arr = self._data.astype(dtype)
        arr.flags.writeable = False
        self._data = arr

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}{grad})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, Iterable):
        v = tuple(int(a) for a in v)
        if len(v) != 3:
            raise ShapeError(f"expected three values, got {v}")
        return v
    return (int(v),) * 3


def conv_output_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self) -> None:
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be 5-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs"
            )
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[2:])

    def output_extents(self, extents: Sequence[int]) -> tuple[int, int, int]:
        out = tuple(
            conv_output_extent(n, k, s, p)
            for n, k, s, p in zip(extents, self.kernel, self.stride, self.padding)
        )
        if min(out) < 1:
            raise ShapeError(f"non-positive conv output extent {out} for input {tuple(extents)}")
        return out

    def tensors(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self) -> None:
        c = self.gamma.shape
        if len(c) != 1 or any(t.shape != c for t in (self.beta, self.running_mean, self.running_var)):
            raise ShapeError("gamma, beta and running statistics must share one extent C")
        if self.eps <= 0 or not 0 < self.momentum < 1:
            raise ValueError("eps must be positive and momentum in (0, 1)")
        if np.any(self.running_var.data < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, **kw) -> "BatchNormParams":
        return cls(
            gamma=Tensor.ones((channels,), requires_grad=True),
            beta=Tensor.zeros((channels,), requires_grad=True),
            running_mean=Tensor.zeros((channels,)),
            running_var=Tensor.ones((channels,)),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, Tensor]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got {self.weight.shape}")
        if self.bias is None:
            self.bias = Tensor.zeros((self.weight.shape[0],), requires_grad=True)
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("linear bias must have one entry per output")

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}
