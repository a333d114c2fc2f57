"""Finite-difference verification of every differentiable op and of whole blocks.

All checks run in float64 so central differences with a small step are not
dominated by round-off. Each op is reduced to a scalar by a fixed random
weighting of its output, which keeps symmetric inputs from hiding errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import CHANNEL_VARIANTS
from .autodiff import Tape, backward, finite_diff_check, registered_ops
from .model import build_model, forward, ra_block_forward
from .tensor import BatchNormParams, Tensor

TOLERANCE = 5e-3
EPS = 1e-6
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _t(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=F64)


def _weighted(y: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = _t(rng, *y.shape)
    return lambda out: ops.total(ops.broadcast_mul(out, w))


def _check(fn: Callable[[Tensor], Tensor], x: Tensor, rng: np.random.Generator) -> float:
    """Max relative error of ``d(weighted sum of fn(x)) / dx``."""
    score = _weighted(fn(x), rng)
    return finite_diff_check(lambda v: score(fn(v)), x, EPS)


def op_checks(seed: int = 0) -> list[CheckResult]:
    """One or more checks per registered op, one per differentiable input."""
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []

    def add(name: str, fn, x) -> None:
        out.append(CheckResult(name, _check(fn, x, rng)))

    x = _t(rng, 2, 3, 4, 5, 4)
    w = _t(rng, 4, 3, 3, 2, 3, scale=0.3)
    b = _t(rng, 4)
    conv = dict(stride=(1, 2, 1), padding=(1, 0, 1))
    add("conv3d/x", lambda v: ops.conv3d_raw(v, w, b, **conv), x)
    add("conv3d/weight", lambda v: ops.conv3d_raw(x, v, b, **conv), w)
    add("conv3d/bias", lambda v: ops.conv3d_raw(x, w, v, **conv), b)

    r = _t(rng, 2, 3, 4, 3)
    for kind in ("mean", "max", "sum"):
        add(f"reduce/{kind}", lambda v, k=kind: ops.reduce(v, (1, 3), k), r)

    def bn_params(gamma, beta):
        return BatchNormParams(
            gamma, beta,
            running_mean=Tensor(rng.standard_normal(3) * 0.1, dtype=F64),
            running_var=Tensor(rng.uniform(0.5, 2.0, 3), dtype=F64),
        )

    xb = _t(rng, 4, 3, 2, 3, 2)
    gamma, beta = _t(rng, 3), _t(rng, 3)
    for mode in ("train", "infer"):
        p = bn_params(gamma, beta)
        add(f"batch_norm[{mode}]/x", lambda v, m=mode, p=p: ops.batch_norm(v, p, m), xb)
        add(f"batch_norm[{mode}]/gamma",
            lambda v, m=mode, p=p: ops.batch_norm(xb, BatchNormParams(v, beta, p.running_mean, p.running_var), m),
            gamma)
        add(f"batch_norm[{mode}]/beta",
            lambda v, m=mode, p=p: ops.batch_norm(xb, BatchNormParams(gamma, v, p.running_mean, p.running_var), m),
            beta)

    add("relu", ops.relu, _t(rng, 3, 4, 5))
    add("sigmoid", ops.sigmoid, _t(rng, 3, 4, 5, scale=2.0))

    lx, lw, lb = _t(rng, 5, 6), _t(rng, 4, 6), _t(rng, 4)
    add("linear/x", lambda v: ops.linear(v, lw, lb), lx)
    add("linear/weight", lambda v: ops.linear(lx, v, lb), lw)
    add("linear/bias", lambda v: ops.linear(lx, lw, v), lb)

    labels = [0, 2, 1, 2, 3]
    out.append(CheckResult(
        "softmax_cross_entropy",
        finite_diff_check(lambda v: ops.softmax_cross_entropy(v, labels)[0], _t(rng, 5, 4), EPS),
    ))

    a, s = _t(rng, 2, 3, 4, 1), _t(rng, 2, 1, 4, 5)
    add("broadcast_mul/a", lambda v: ops.broadcast_mul(v, s), a)
    add("broadcast_mul/b", lambda v: ops.broadcast_mul(a, v), s)
    add("add/a", lambda v: ops.add(v, s), a)
    add("add/b", lambda v: ops.add(a, v), s)

    c1, c2 = _t(rng, 2, 3, 4), _t(rng, 2, 1, 4)
    add("concat/first", lambda v: ops.concat([v, c2], 1), c1)
    add("concat/second", lambda v: ops.concat([c1, v], 1), c2)
    add("reshape", lambda v: ops.reshape(v, (6, 4)), _t(rng, 2, 3, 4))
    add("zero_pad_shortcut", lambda v: ops.zero_pad_shortcut(v, 5, (2, 2, 1)), _t(rng, 2, 3, 3, 4, 2))
    return out


def _promote(holder) -> None:
    """Switch every parameter and running statistic of a block or model to float64."""
    state = holder.state() if hasattr(holder, "state") else {**holder.tensors(), **holder.buffers()}
    for t in state.values():
        t.retype(F64)


def sampled_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], rng, samples: int) -> dict[str, float]:
    """Compare tape gradients of each tensor with central differences on sampled coordinates.

    ``params`` may include non-parameter leaves; they are watched on the tape.
    """
    with Tape() as tape:
        tape.watch(*params.values())
        loss = loss_fn()
    grads = backward(tape, loss)
    errors = {}
    for path, p in params.items():
        analytic = grads[p].reshape(-1)
        base = p.data.reshape(-1).copy()
        picks = rng.choice(base.size, size=min(samples, base.size), replace=False)
        worst = 0.0
        for i in picks:
            bumped = base.copy()
            bumped[i] += EPS
            p.assign(bumped.reshape(p.shape))
            fp = loss_fn().item()
            bumped[i] -= 2 * EPS
            p.assign(bumped.reshape(p.shape))
            fm = loss_fn().item()
            p.assign(base.reshape(p.shape))
            n = (fp - fm) / (2 * EPS)
            a = float(analytic[i])
            worst = max(worst, abs(a - n) / max(1e-8, abs(a) + abs(n)))
        errors[path] = worst
    return errors


def block_checks(seed: int = 0, channels: int = 8, extents=(4, 6, 6), r: int = 4, kernel: int = 3,
                 samples: int = 12) -> list[CheckResult]:
    """Input and parameter gradients of full residual attention blocks in train mode.

    Covers both channel-attention variants, the identity shortcut and the
    strided projection shortcut. The first block gets a dense sweep over
    every input coordinate; the rest sample ``samples`` coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []
    x = _t(rng, 2, channels, *extents)
    for variant in CHANNEL_VARIANTS:
        model = build_model(
            "meranet18", ch_variant=variant, st_kernel=kernel, seed=seed, r=r,
            channels=(channels, channels, 2 * channels, 2 * channels),
        )
        for block in model.blocks[:1] + model.blocks[2:3]:
            _promote(block)
            label = f"{block.name}[{variant}]"
            fn = lambda v, b=block: ra_block_forward(v, b, "train")
            score = _weighted(fn(x), rng)
            if not out:
                err = finite_diff_check(lambda v: score(fn(v)), x, EPS)
            else:
                err = sampled_check(lambda: score(fn(x)), {"input": x}, rng, 4 * samples)["input"]
            out.append(CheckResult(f"{label}/input", err))
            errs = sampled_check(lambda: score(fn(x)), block.tensors(), rng, samples)
            out.append(CheckResult(f"{label}/params", max(errs.values())))
    return out


def model_check(seed: int = 0, channels=(8, 8, 16, 16), extents=(8, 16, 16), r: int = 4,
                samples: int = 6) -> list[CheckResult]:
    """Sampled input and parameter gradients of a tiny full network in train mode."""
    rng = np.random.default_rng(seed)
    model = build_model("meranet18", seed=seed, channels=channels, r=r, st_kernel=3)
    _promote(model)
    x = _t(rng, 2, model.in_channels, *extents)
    labels = [0, 2]
    loss = lambda: ops.softmax_cross_entropy(forward(model, x, "train"), labels)[0]
    errs = sampled_check(loss, {"input": x, **model.parameters()}, rng, samples)
    params_err = max(v for k, v in errs.items() if k != "input")
    return [CheckResult("model/input", errs["input"]), CheckResult("model/params", params_err)]


def covered_ops(results: list[CheckResult]) -> set[str]:
    names = {r.name.split("/")[0].split("[")[0] for r in results}
    return names & set(registered_ops())
