"""Reverse-mode differentiation over a recorded tape of tensor operations.

Operations in :mod:`meranet.ops` append a :class:`Node` to the active tape
whenever one of their inputs is tracked (a parameter, a watched leaf or the
output of an earlier node). :func:`backward` then walks the tape in reverse
and applies the backward rule registered for each node's op kind.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .tensor import Tensor

BackwardRule = Callable[[dict, np.ndarray], Sequence[Optional[np.ndarray]]]

_RULES: dict[str, BackwardRule] = {}
_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "meranet_active_tape", default=None
)


class AutodiffError(RuntimeError):
    pass


class NonScalarRootError(AutodiffError):
    pass


class UnregisteredOpError(AutodiffError):
    pass


def register_rule(op: str) -> Callable[[BackwardRule], BackwardRule]:
    """Register the backward rule for ``op``.

    A rule receives the node's saved values and the upstream gradient and
    returns one gradient (or ``None``) per input, in input order.
    """

    def deco(fn: BackwardRule) -> BackwardRule:
        _RULES[op] = fn
        return fn

    return deco


def registered_ops() -> tuple[str, ...]:
    return tuple(sorted(_RULES))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)

    def input_ids(self, tape: "Tape") -> tuple[Optional[int], ...]:
        return tuple(tape.node_of(t) for t in self.inputs)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded. Tapes nest, the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._producer: dict[int, int] = {}
        self._params: dict[int, Tensor] = {}
        self._watched: dict[int, Tensor] = {}
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        """Track non-parameter leaves so gradients flow to them."""
        for t in tensors:
            self._watched[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        i = id(t)
        return t.requires_grad or i in self._producer or i in self._watched

    def node_of(self, t: Tensor) -> Optional[int]:
        return self._producer.get(id(t))

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, saved: dict) -> None:
        if not any(self.is_tracked(t) for t in inputs):
            return
        for t in inputs:
            if t.requires_grad:
                self._params.setdefault(id(t), t)
        self._producer[id(output)] = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, saved))


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def record(op: str, inputs: Sequence[Tensor], output: Tensor, **saved: Any) -> Tensor:
    tape = _active_tape.get()
    if tape is not None:
        tape.record(op, inputs, output, saved)
    return output


class GradientStore:
    """Gradients keyed by tensor identity."""

    def __init__(self) -> None:
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __setitem__(self, t: Tensor, grad: np.ndarray) -> None:
        self._entries[id(t)] = (t, grad)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._entries[id(t)][1]
        except KeyError:
            raise KeyError(f"no gradient for {t!r}") from None

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, t: Tensor, default=None):
        e = self._entries.get(id(t))
        return default if e is None else e[1]

    def items(self) -> Iterator[tuple[Tensor, np.ndarray]]:
        return iter(self._entries.values())


def backward(tape: Tape, root: Tensor, wrt: Iterable[Tensor] = ()) -> GradientStore:
    """Differentiate the scalar ``root`` through every node on ``tape``.

    The returned store holds one gradient per trainable parameter seen by
    the tape (zeros when the parameter does not influence ``root``), plus
    one per watched leaf and per tensor listed in ``wrt``. The tape is left
    untouched, so calling this twice gives identical results.
    """
    if root.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")
    for node in tape.nodes:
        if node.op not in _RULES:
            raise UnregisteredOpError(f"no backward rule registered for op {node.op!r}")

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = _RULES[node.op](node.saved, g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.is_tracked(inp):
                continue
            if gi.shape != inp.shape:
                raise AutodiffError(
                    f"rule for {node.op!r} returned gradient {gi.shape} for input {inp.shape}"
                )
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi.astype(inp.dtype, copy=False) if prev is None else prev + gi

    store = GradientStore()
    wanted = [*tape.parameters, *tape._watched.values(), *wrt]
    for t in wanted:
        g = grads.get(id(t))
        store[t] = np.zeros(t.shape, dtype=t.dtype) if g is None else g.astype(t.dtype, copy=False)
    return store


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    *,
    return_details: bool = False,
):
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns the largest per-coordinate ``|a - n| / max(1e-8, |a| + |n|)``
    where ``a`` is the analytic and ``n`` the numerical derivative.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = Tensor(x.data, dtype=x.dtype)
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    if y.size != 1:
        raise NonScalarRootError(f"f must return a scalar, got shape {y.shape}")
    analytic = backward(tape, y)[x].astype(np.float64).reshape(-1)

    base = x.data.astype(np.float64).reshape(-1)
    numeric = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        fp = f(Tensor(bumped.reshape(x.shape), dtype=x.dtype)).item()
        bumped[i] = base[i] - eps
        fm = f(Tensor(bumped.reshape(x.shape), dtype=x.dtype)).item()
        numeric[i] = (fp - fm) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    worst = float(err.max()) if err.size else 0.0
    if return_details:
        return worst, analytic.reshape(x.shape), numeric.reshape(x.shape)
    return worst
