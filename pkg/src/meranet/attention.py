"""Channel and spatio-temporal attention over ``[N, C, T, H, W]`` feature volumes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import ops
from .init import conv_weight, linear_weight, zeros_param
from .tensor import ConvParams, ShapeError, Tensor

log = logging.getLogger(__name__)

CHANNEL_VARIANTS = ("SCNN", "SMLP")
ST_KERNELS = (3, 5, 7)


@dataclass
class STAttentionParams:
    conv: ConvParams

    def __post_init__(self) -> None:
        kt, kh, kw = self.conv.kernel
        if not kt == kh == kw or kt % 2 == 0:
            raise ShapeError(f"spatio-temporal kernel must be cubic and odd, got {self.conv.kernel}")
        if self.conv.in_channels != 2 or self.conv.out_channels != 1:
            raise ShapeError("spatio-temporal conv maps 2 pooled channels to 1 map")
        same = (kt - 1) // 2
        if self.conv.stride != (1, 1, 1) or self.conv.padding != (same,) * 3:
            raise ShapeError("spatio-temporal conv must use stride 1 and same padding")

    @property
    def kernel_size(self) -> int:
        return self.conv.kernel[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f"conv/{k}": v for k, v in self.conv.tensors().items()}


@dataclass
class ChannelAttentionParams:
    """Shared squeeze/excite sub-network.

    ``SCNN`` stores 1x1x1 convolution kernels ``[C/r, C, 1, 1, 1]`` and
    ``[C, C/r, 1, 1, 1]``; ``SMLP`` stores dense matrices ``[C/r, C]`` and
    ``[C, C/r]``. Both carry biases.
    """

    variant: str
    squeeze_w: Tensor
    squeeze_b: Tensor
    excite_w: Tensor
    excite_b: Tensor
    r: int = 16

    def __post_init__(self) -> None:
        if self.variant not in CHANNEL_VARIANTS:
            raise ValueError(f"unknown channel-attention variant {self.variant!r}")
        ndim = 5 if self.variant == "SCNN" else 2
        if self.squeeze_w.ndim != ndim or self.excite_w.ndim != ndim:
            raise ShapeError(f"{self.variant} weights must be {ndim}-D")
        hidden, channels = self.squeeze_w.shape[:2]
        if self.excite_w.shape[:2] != (channels, hidden):
            raise ShapeError("excite weight must map the squeezed extent back to C")
        if self.squeeze_b.shape != (hidden,) or self.excite_b.shape != (channels,):
            raise ShapeError("bias extents do not match squeeze/excite weights")

    @property
    def channels(self) -> int:
        return self.squeeze_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.squeeze_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "squeeze/weight": self.squeeze_w,
            "squeeze/bias": self.squeeze_b,
            "excite/weight": self.excite_w,
            "excite/bias": self.excite_b,
        }


def squeeze_extent(channels: int, r: int) -> int:
    if r < 1:
        raise ValueError("reduction ratio must be >= 1")
    if channels < r:
        log.warning("channel attention: %d channels < r=%d, squeeze extent clamped to 1", channels, r)
        return 1
    if channels % r:
        raise ShapeError(f"{channels} channels not divisible by reduction ratio {r}")
    return channels // r


def init_st_attention(kernel: int, seed: int, path: str) -> STAttentionParams:
    if kernel not in ST_KERNELS:
        raise ValueError(f"spatio-temporal kernel must be one of {ST_KERNELS}, got {kernel}")
    shape = (1, 2, kernel, kernel, kernel)
    return STAttentionParams(
        ConvParams(
            weight=conv_weight(shape, seed, f"{path}/conv/weight"),
            bias=zeros_param((1,), f"{path}/conv/bias"),
            stride=1,
            padding=(kernel - 1) // 2,
        )
    )


def init_channel_attention(channels: int, r: int, variant: str, seed: int, path: str) -> ChannelAttentionParams:
    if variant not in CHANNEL_VARIANTS:
        raise ValueError(f"unknown channel-attention variant {variant!r}")
    hidden = squeeze_extent(channels, r)
    if variant == "SCNN":
        sq = conv_weight((hidden, channels, 1, 1, 1), seed, f"{path}/squeeze/weight")
        ex = conv_weight((channels, hidden, 1, 1, 1), seed, f"{path}/excite/weight")
    else:
        sq = linear_weight((hidden, channels), seed, f"{path}/squeeze/weight")
        ex = linear_weight((channels, hidden), seed, f"{path}/excite/weight")
    return ChannelAttentionParams(
        variant=variant,
        squeeze_w=sq,
        squeeze_b=zeros_param((hidden,), f"{path}/squeeze/bias"),
        excite_w=ex,
        excite_b=zeros_param((channels,), f"{path}/excite/bias"),
        r=r,
    )


def st_attention_map(F: Tensor, params: STAttentionParams) -> Tensor:
    """Sigmoid of a cubic conv over the channel-wise mean and max of ``F``."""
    if F.ndim != 5:
        raise ShapeError(f"expected [N, C, T, H, W], got {F.shape}")
    avg = ops.reduce(F, 1, "mean")
    mx = ops.reduce(F, 1, "max")
    descriptor = ops.concat([avg, mx], axis=1)
    return ops.sigmoid(ops.conv3d(descriptor, params.conv))


def apply_spatiotemporal(F: Tensor, A_st: Tensor) -> Tensor:
    if A_st.ndim != F.ndim or A_st.shape[1] != 1 or A_st.shape[2:] != F.shape[2:] or A_st.shape[0] != F.shape[0]:
        raise ShapeError(f"spatio-temporal map {A_st.shape} does not fit features {F.shape}")
    return ops.broadcast_mul(F, A_st)


def _shared_net(desc: Tensor, params: ChannelAttentionParams) -> Tensor:
    if params.variant == "SCNN":
        h = ops.relu(ops.conv3d_raw(desc, params.squeeze_w, params.squeeze_b))
        return ops.conv3d_raw(h, params.excite_w, params.excite_b)
    n, c = desc.shape[:2]
    flat = ops.reshape(desc, (n, c))
    h = ops.relu(ops.linear(flat, params.squeeze_w, params.squeeze_b))
    return ops.reshape(ops.linear(h, params.excite_w, params.excite_b), (n, c, 1, 1, 1))


def channel_attention_map(Fp: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel weights in (0, 1), shape ``[N, C, 1, 1, 1]``.

    The global average and global max descriptors pass through the same
    squeeze/excite weights and the two results are summed before the sigmoid.
    """
    if Fp.ndim != 5:
        raise ShapeError(f"expected [N, C, T, H, W], got {Fp.shape}")
    if Fp.shape[1] != params.channels:
        raise ShapeError(f"features have {Fp.shape[1]} channels, attention expects {params.channels}")
    avg = ops.reduce(Fp, (2, 3, 4), "mean")
    mx = ops.reduce(Fp, (2, 3, 4), "max")
    return ops.sigmoid(ops.add(_shared_net(avg, params), _shared_net(mx, params)))


def apply_channel(Fp: Tensor, A_ch: Tensor) -> Tensor:
    if A_ch.shape != Fp.shape[:2] + (1,) * (Fp.ndim - 2):
        raise ShapeError(f"channel map {A_ch.shape} does not fit features {Fp.shape}")
    return ops.broadcast_mul(Fp, A_ch)
