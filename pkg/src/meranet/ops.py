"""Differentiable tensor operations.

Every public function here takes and returns :class:`~meranet.tensor.Tensor`
values, computes in float64 internally, and records itself on the active
:class:`~meranet.autodiff.Tape` together with what its backward rule needs.
Outputs take the widest input dtype, so float32 in gives float32 out.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .autodiff import active_tape, record, register_rule
from .tensor import BatchNormParams, ConvParams, ShapeError, Tensor, conv_output_extent

# caps the float64 im2col buffer built per chunk of kernel taps
_COLS_BUDGET_BYTES = 64 * 2**20
_COLS_MAX_ROWS = 512


def _out_dtype(*ts: Tensor) -> np.dtype:
    return np.result_type(*(t.dtype for t in ts))


def _wrap(arr: np.ndarray, *ts: Tensor) -> Tensor:
    return Tensor._wrap(arr, _out_dtype(*ts))


# --------------------------------------------------------------------------
# conv3d


def _tap_chunks(kernel, channels: int, positions: int):
    taps = list(itertools.product(*(range(k) for k in kernel)))
    per_chunk = max(1, _COLS_MAX_ROWS // channels)
    per_chunk = min(per_chunk, max(1, _COLS_BUDGET_BYTES // (8 * channels * positions)))
    return [taps[i : i + per_chunk] for i in range(0, len(taps), per_chunk)]


def _tap_slice(tap, stride, out_ext) -> tuple[slice, ...]:
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(tap, stride, out_ext))


def _padded_channel_major(x: np.ndarray, padding) -> np.ndarray:
    n, c, t, h, w = x.shape
    pt, ph, pw = padding
    xp = np.zeros((c, n, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3, 4)
    return xp


def _gather(xp: np.ndarray, chunk, stride, out_ext) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((len(chunk), c) + xp.shape[1:2] + tuple(out_ext), dtype=np.float64)
    for g, tap in enumerate(chunk):
        cols[g] = xp[(slice(None), slice(None)) + _tap_slice(tap, stride, out_ext)]
    return cols.reshape(len(chunk) * c, -1)


def _chunk_weights(w: np.ndarray, chunk) -> np.ndarray:
    # (O, C, kt, kh, kw) -> (O, len(chunk) * C), tap-major to match _gather
    idx = tuple(np.array(a) for a in zip(*chunk))
    return w[(slice(None), slice(None)) + idx].transpose(0, 2, 1).reshape(w.shape[0], -1)


def conv3d(x: Tensor, params: ConvParams) -> Tensor:
    """3-D cross-correlation with zero padding over an ``[N, C, T, H, W]`` batch."""
    return conv3d_raw(x, params.weight, params.bias, params.stride, params.padding)


def conv3d_raw(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
) -> Tensor:
    stride = tuple(stride)
    padding = tuple(padding)
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects a 5-D input, got {x.shape}")
    if weight.ndim != 5 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1:2]}"
        )
    kernel = weight.shape[2:]
    out_ext = tuple(
        conv_output_extent(n, k, s, p) for n, k, s, p in zip(x.shape[2:], kernel, stride, padding)
    )
    if min(out_ext) < 1:
        raise ShapeError(f"non-positive conv output extent {out_ext} for input {x.shape}")

    inputs = [x, weight] + ([bias] if bias is not None else [])
    n, c = x.shape[:2]
    o = weight.shape[0]
    xp = _padded_channel_major(x.data, padding)
    w64 = weight.data.astype(np.float64)
    positions = n * int(np.prod(out_ext))
    out = np.zeros((o, positions), dtype=np.float64)
    for chunk in _tap_chunks(kernel, c, positions):
        out += _chunk_weights(w64, chunk) @ _gather(xp, chunk, stride, out_ext)
    out = out.reshape((o, n) + out_ext).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.astype(np.float64).reshape(1, o, 1, 1, 1)
    y = _wrap(out, *inputs)
    tape = active_tape()
    return record(
        "conv3d", inputs, y,
        x=x.data, w=weight.data, has_bias=bias is not None,
        stride=stride, padding=padding, out_ext=out_ext,
        # raw input batches need no gradient, which halves the stem's backward cost
        need_x=tape is not None and tape.is_tracked(x),
    )


@register_rule("conv3d")
def _conv3d_backward(s: dict, g: np.ndarray):
    x, w, stride, padding, out_ext = s["x"], s["w"], s["stride"], s["padding"], s["out_ext"]
    n, c, t, h, wd = x.shape
    o = w.shape[0]
    g2 = g.astype(np.float64).transpose(1, 0, 2, 3, 4).reshape(o, -1)
    need_x = s["need_x"]
    xp = _padded_channel_major(x, padding)
    gxp = np.zeros_like(xp) if need_x else None
    w64 = w.astype(np.float64)
    gw = np.zeros(w.shape, dtype=np.float64)
    for chunk in _tap_chunks(w.shape[2:], c, g2.shape[1]):
        cols = _gather(xp, chunk, stride, out_ext)
        gw_chunk = (g2 @ cols.T).reshape(o, len(chunk), c)
        for gi, tap in enumerate(chunk):
            gw[:, :, tap[0], tap[1], tap[2]] = gw_chunk[:, gi, :]
        if need_x:
            gcols = (_chunk_weights(w64, chunk).T @ g2).reshape((len(chunk), c, n) + tuple(out_ext))
            for gi, tap in enumerate(chunk):
                gxp[(slice(None), slice(None)) + _tap_slice(tap, stride, out_ext)] += gcols[gi]
    gx = None
    if need_x:
        pt, ph, pw = padding
        gx = gxp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3, 4)
    grads = [gx, gw]
    if s["has_bias"]:
        grads.append(g.astype(np.float64).sum(axis=(0, 2, 3, 4)))
    return grads


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    if not axes:
        raise ValueError("reduce needs at least one axis")
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(x: Tensor, axes, kind: str = "mean") -> Tensor:
    """Reduce over ``axes`` keeping them as extent-1 axes.

    ``kind`` is ``"mean"``, ``"max"`` or ``"sum"``. Max routes its gradient
    to the first maximal element in row-major order.
    """
    axes = _norm_axes(axes, x.ndim)
    d = x.data.astype(np.float64)
    if kind == "mean":
        out = d.mean(axis=axes, keepdims=True)
        saved = {}
    elif kind == "sum":
        out = d.sum(axis=axes, keepdims=True)
        saved = {}
    elif kind == "max":
        kept = [a for a in range(x.ndim) if a not in axes]
        moved = np.transpose(d, kept + list(axes))
        flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)
        out = out.reshape(tuple(1 if a in axes else x.shape[a] for a in range(x.ndim)))
        saved = {"arg": arg, "kept": kept}
    else:
        raise ValueError(f"unknown reduction kind {kind!r}")
    y = _wrap(out, x)
    return record("reduce", [x], y, kind=kind, axes=axes, shape=x.shape, **saved)


@register_rule("reduce")
def _reduce_backward(s: dict, g: np.ndarray):
    shape, axes, kind = s["shape"], s["axes"], s["kind"]
    g = g.astype(np.float64)
    if kind == "sum":
        return [np.broadcast_to(g, shape).copy()]
    if kind == "mean":
        count = int(np.prod([shape[a] for a in axes]))
        return [np.broadcast_to(g / count, shape).copy()]
    kept = s["kept"]
    arg = s["arg"]
    moved_shape = tuple(shape[a] for a in kept) + tuple(shape[a] for a in axes)
    flat = np.zeros(arg.shape + (int(np.prod([shape[a] for a in axes])),))
    gk = g.reshape(arg.shape)
    np.put_along_axis(flat, arg[..., None], gk[..., None], axis=-1)
    moved = flat.reshape(moved_shape)
    order = kept + list(axes)
    return [np.transpose(moved, np.argsort(order))]


# --------------------------------------------------------------------------
# batch normalization


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = "infer") -> Tensor:
    """Per-channel normalization of an ``[N, C, ...]`` tensor.

    In ``train`` mode the batch statistics over every non-channel axis are
    used and the running statistics are updated in place.
    """
    if x.ndim < 2 or x.shape[1] != params.channels:
        raise ShapeError(f"input channels {x.shape[1:2]} do not match BN extent {params.channels}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    d = x.data.astype(np.float64)
    gamma = params.gamma.data.astype(np.float64)
    beta = params.beta.data.astype(np.float64)
    if mode == "train":
        count = d.size // params.channels
        mean = d.mean(axis=axes)
        var = d.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        m = params.momentum
        params.running_mean.assign((1 - m) * params.running_mean.data + m * mean)
        params.running_var.assign((1 - m) * params.running_var.data + m * unbiased)
    else:
        mean = params.running_mean.data.astype(np.float64)
        var = params.running_var.data.astype(np.float64)
    invstd = 1.0 / np.sqrt(var + params.eps)
    xhat = (d - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    y = _wrap(out, x)
    return record(
        "batch_norm", [x, params.gamma, params.beta], y,
        xhat=xhat, invstd=invstd, gamma=gamma, mode=mode, axes=axes, bshape=bshape,
    )


@register_rule("batch_norm")
def _batch_norm_backward(s: dict, g: np.ndarray):
    g = g.astype(np.float64)
    xhat, invstd, gamma, axes, bshape = s["xhat"], s["invstd"], s["gamma"], s["axes"], s["bshape"]
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    scale = (gamma * invstd).reshape(bshape)
    if s["mode"] == "infer":
        return [g * scale, dgamma, dbeta]
    count = g.size // gamma.size
    dx = scale / count * (
        count * g - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape)
    )
    return [dx, dgamma, dbeta]


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu`` or ``sigmoid``.

    Sigmoid output is clamped one ulp inside (0, 1) for the tensor's dtype
    so the open interval holds even where the exact value rounds to 0 or 1.
    """
    d = x.data.astype(np.float64)
    if kind == "relu":
        out = np.maximum(d, 0.0)
        y = _wrap(out, x)
        return record("relu", [x], y, mask=d > 0)
    if kind == "sigmoid":
        out = expit(d)
        lo = np.finfo(x.dtype).tiny
        hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
        out = np.clip(out, lo, hi)
        y = _wrap(out, x)
        return record("sigmoid", [x], y, out=y.data.astype(np.float64))
    raise ValueError(f"unknown activation {kind!r}")


@register_rule("relu")
def _relu_backward(s: dict, g: np.ndarray):
    return [np.where(s["mask"], g, 0.0)]


@register_rule("sigmoid")
def _sigmoid_backward(s: dict, g: np.ndarray):
    out = s["out"]
    return [g * out * (1.0 - out)]


# --------------------------------------------------------------------------
# linear and loss


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data.astype(np.float64) @ weight.data.astype(np.float64).T
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data.astype(np.float64)
        inputs.append(bias)
    y = _wrap(out, *inputs)
    return record("linear", inputs, y, x=x.data, w=weight.data, has_bias=bias is not None)


@register_rule("linear")
def _linear_backward(s: dict, g: np.ndarray):
    g = g.astype(np.float64)
    grads = [g @ s["w"].astype(np.float64), g.T @ s["x"].astype(np.float64)]
    if s["has_bias"]:
        grads.append(g.sum(axis=0))
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Mean categorical cross entropy. Returns ``(loss, probs)``; only ``loss`` is differentiable."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    y = _wrap(np.array([loss]), logits)
    record("softmax_cross_entropy", [logits], y, probs=probs, labels=labels)
    return y, _wrap(probs, logits)


@register_rule("softmax_cross_entropy")
def _sce_backward(s: dict, g: np.ndarray):
    probs, labels = s["probs"], s["labels"]
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return [d * (float(g.reshape(-1)[0]) / len(labels))]


# --------------------------------------------------------------------------
# broadcasting arithmetic and structural ops


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x != y and 1 not in (x, y):
            raise ShapeError(f"incompatible extents {a} vs {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    y = _wrap(ad * bd, a, b)
    return record("broadcast_mul", [a, b], y, a=a.data, b=b.data)


@register_rule("broadcast_mul")
def _mul_backward(s: dict, g: np.ndarray):
    a, b = s["a"].astype(np.float64), s["b"].astype(np.float64)
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    y = _wrap(a.data.astype(np.float64) + b.data.astype(np.float64), a, b)
    return record("add", [a, b], y, a_shape=a.shape, b_shape=b.shape)


@register_rule("add")
def _add_backward(s: dict, g: np.ndarray):
    return [_unbroadcast(g, s["a_shape"]), _unbroadcast(g, s["b_shape"])]


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    y = _wrap(np.concatenate([t.data.astype(np.float64) for t in tensors], axis=axis), *tensors)
    return record("concat", tensors, y, axis=axis, sizes=[t.shape[axis] for t in tensors])


@register_rule("concat")
def _concat_backward(s: dict, g: np.ndarray):
    cuts = np.cumsum(s["sizes"])[:-1]
    return np.split(g, cuts, axis=s["axis"])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(v) for v in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    y = _wrap(x.data.reshape(shape), x)
    return record("reshape", [x], y, shape=x.shape)


@register_rule("reshape")
def _reshape_backward(s: dict, g: np.ndarray):
    return [g.reshape(s["shape"])]


def zero_pad_shortcut(x: Tensor, out_channels: int, stride: Sequence[int]) -> Tensor:
    """Parameter-free shortcut: strided subsampling plus zero channels appended."""
    n, c = x.shape[:2]
    if out_channels < c:
        raise ShapeError(f"cannot zero-pad {c} channels down to {out_channels}")
    sl = tuple(slice(None, None, s) for s in stride)
    sub = x.data[(slice(None), slice(None)) + sl]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=np.float64)
    out[:, :c] = sub
    y = _wrap(out, x)
    return record("zero_pad_shortcut", [x], y, shape=x.shape, sl=sl)


@register_rule("zero_pad_shortcut")
def _zero_pad_backward(s: dict, g: np.ndarray):
    shape = s["shape"]
    gx = np.zeros(shape, dtype=np.float64)
    gx[(slice(None), slice(None)) + s["sl"]] = g[:, : shape[1]]
    return [gx]


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis, then flatten to ``[N, C]``."""
    pooled = reduce(x, tuple(range(2, x.ndim)), "mean")
    return reshape(pooled, x.shape[:2])


def total(x: Tensor) -> Tensor:
    """Sum of every element as a one-element tensor."""
    return reshape(reduce(x, tuple(range(x.ndim)), "sum"), (1,))


def mean_all(x: Tensor) -> Tensor:
    return reshape(reduce(x, tuple(range(x.ndim)), "mean"), (1,))
