"""MERANet-18 and the 3D-ResNet-18 baseline built from residual attention blocks.

Layer paths follow ``stem/...``, ``block{stage}_{index}/...`` and
``head/...``. Feature volumes captured during :func:`forward` are keyed
``stem/out``, ``block{i}_{j}/{conv,ch,st,out}``, ``pool`` and ``logits``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .attention import (
    CHANNEL_VARIANTS,
    ChannelAttentionParams,
    STAttentionParams,
    apply_channel,
    apply_spatiotemporal,
    channel_attention_map,
    init_channel_attention,
    init_st_attention,
    st_attention_map,
)
from .init import conv_weight, linear_weight, zeros_param
from .tensor import BatchNormParams, ConvParams, LinearParams, ShapeError, Tensor

VARIANTS = ("meranet18", "resnet3d18")
RESIDUAL_PROJECTIONS = ("conv", "zero_pad")
DEFAULT_CHANNELS = (64, 64, 128, 128, 256, 256, 512, 512)
REDUCED_CHANNELS = (8, 8, 16, 16, 32, 32, 64, 64)
STEM_KERNEL = (3, 7, 7)
STEM_STRIDE = (1, 2, 2)
STEM_PADDING = (1, 3, 3)
BLOCK_STAGES = ("conv", "ch", "st", "out")


class NonFiniteActivationError(FloatingPointError):
    """Forward pass produced NaN or infinite values."""


@dataclass
class Downsample:
    """Shortcut projection used when a block changes extents.

    ``kind == "conv"`` is a 1x1x1 strided conv followed by BN; ``"zero_pad"``
    subsamples and appends zero channels without parameters.
    """

    kind: str
    out_channels: int
    stride: tuple[int, int, int]
    conv: Optional[ConvParams] = None
    bn: Optional[BatchNormParams] = None

    def tensors(self) -> dict[str, Tensor]:
        if self.kind != "conv":
            return {}
        return {
            **{f"conv/{k}": v for k, v in self.conv.tensors().items()},
            **{f"bn/{k}": v for k, v in self.bn.tensors().items()},
        }

    def buffers(self) -> dict[str, Tensor]:
        return {f"bn/{k}": v for k, v in self.bn.buffers().items()} if self.kind == "conv" else {}


@dataclass
class RABlockParams:
    name: str
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    ch_attn: Optional[ChannelAttentionParams] = None
    st_attn: Optional[STAttentionParams] = None
    downsample: Optional[Downsample] = None

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in ("conv1", "bn1", "conv2", "bn2"):
            for k, v in getattr(self, part).tensors().items():
                out[f"{part}/{k}"] = v
        if self.ch_attn is not None:
            out.update({f"ch_attn/{k}": v for k, v in self.ch_attn.tensors().items()})
        if self.st_attn is not None:
            out.update({f"st_attn/{k}": v for k, v in self.st_attn.tensors().items()})
        if self.downsample is not None:
            out.update({f"downsample/{k}": v for k, v in self.downsample.tensors().items()})
        return out

    def buffers(self) -> dict[str, Tensor]:
        out = {f"bn1/{k}": v for k, v in self.bn1.buffers().items()}
        out.update({f"bn2/{k}": v for k, v in self.bn2.buffers().items()})
        if self.downsample is not None:
            out.update({f"downsample/{k}": v for k, v in self.downsample.buffers().items()})
        return out


@dataclass
class ModelGraph:
    variant: str
    num_classes: int
    stem_conv: ConvParams
    stem_bn: BatchNormParams
    blocks: list[RABlockParams]
    head: LinearParams
    ch_variant: str = "SCNN"
    st_kernel: int = 5
    r: int = 16
    residual_projection: str = "conv"
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    seed: int = 0
    in_channels: int = 3

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors keyed by canonical layer path, in build order."""
        out = {f"stem/conv/{k}": v for k, v in self.stem_conv.tensors().items()}
        out.update({f"stem/bn/{k}": v for k, v in self.stem_bn.tensors().items()})
        for b in self.blocks:
            out.update({f"{b.name}/{k}": v for k, v in b.tensors().items()})
        out.update({f"head/{k}": v for k, v in self.head.tensors().items()})
        return out

    def buffers(self) -> dict[str, Tensor]:
        """BN running statistics keyed by layer path."""
        out = {f"stem/bn/{k}": v for k, v in self.stem_bn.buffers().items()}
        for b in self.blocks:
            out.update({f"{b.name}/{k}": v for k, v in b.buffers().items()})
        return out

    def state(self) -> dict[str, Tensor]:
        return {**self.parameters(), **self.buffers()}

    def block(self, name: str) -> RABlockParams:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(f"no block named {name!r}")

    def config(self) -> dict:
        return {
            "variant": self.variant,
            "num_classes": self.num_classes,
            "ch_variant": self.ch_variant,
            "st_kernel": self.st_kernel,
            "r": self.r,
            "residual_projection": self.residual_projection,
            "channels": list(self.channels),
            "seed": self.seed,
            "in_channels": self.in_channels,
        }


def block_names(n_blocks: int) -> list[str]:
    return [f"block{i // 2 + 1}_{i % 2 + 1}" for i in range(n_blocks)]


def _bn(channels: int, path: str) -> BatchNormParams:
    bn = BatchNormParams.identity(channels)
    bn.gamma.name = f"{path}/gamma"
    bn.beta.name = f"{path}/beta"
    return bn


def build_model(
    variant: str = "meranet18",
    num_classes: int = 3,
    ch_variant: str = "SCNN",
    st_kernel: int = 5,
    seed: int = 0,
    *,
    channels: Sequence[int] = DEFAULT_CHANNELS,
    r: int = 16,
    residual_projection: str = "conv",
    in_channels: int = 3,
) -> ModelGraph:
    """Assemble and Xavier-initialize a network.

    Each layer draws from its own stream keyed by ``(seed, path)``, so the
    layers both variants share start from identical values.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if ch_variant not in CHANNEL_VARIANTS:
        raise ValueError(f"ch_variant must be one of {CHANNEL_VARIANTS}, got {ch_variant!r}")
    if residual_projection not in RESIDUAL_PROJECTIONS:
        raise ValueError(f"residual_projection must be one of {RESIDUAL_PROJECTIONS}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    channels = tuple(int(c) for c in channels)
    if not channels or len(channels) % 2 or min(channels) < 1:
        raise ValueError("channel plan must hold an even number of positive widths")
    attention = variant == "meranet18"
    if attention and st_kernel not in (3, 5, 7):
        raise ValueError("st_kernel must be 3, 5 or 7")

    stem_conv = ConvParams(
        weight=conv_weight((channels[0], in_channels) + STEM_KERNEL, seed, "stem/conv/weight"),
        stride=STEM_STRIDE,
        padding=STEM_PADDING,
    )
    blocks = []
    c_in = channels[0]
    for i, (name, c_out) in enumerate(zip(block_names(len(channels)), channels)):
        stride = 2 if i > 0 and i % 2 == 0 else 1
        conv1 = ConvParams(conv_weight((c_out, c_in, 3, 3, 3), seed, f"{name}/conv1/weight"), None, stride, 1)
        conv2 = ConvParams(conv_weight((c_out, c_out, 3, 3, 3), seed, f"{name}/conv2/weight"), None, 1, 1)
        ds = None
        if stride != 1 or c_in != c_out:
            ds = Downsample(residual_projection, c_out, (stride,) * 3)
            if residual_projection == "conv":
                ds.conv = ConvParams(
                    conv_weight((c_out, c_in, 1, 1, 1), seed, f"{name}/downsample/conv/weight"),
                    None, stride, 0,
                )
                ds.bn = _bn(c_out, f"{name}/downsample/bn")
        blocks.append(
            RABlockParams(
                name=name,
                conv1=conv1,
                bn1=_bn(c_out, f"{name}/bn1"),
                conv2=conv2,
                bn2=_bn(c_out, f"{name}/bn2"),
                ch_attn=init_channel_attention(c_out, r, ch_variant, seed, f"{name}/ch_attn") if attention else None,
                st_attn=init_st_attention(st_kernel, seed, f"{name}/st_attn") if attention else None,
                downsample=ds,
            )
        )
        c_in = c_out
    head = LinearParams(
        weight=linear_weight((num_classes, channels[-1]), seed, "head/weight"),
        bias=zeros_param((num_classes,), "head/bias"),
    )
    return ModelGraph(
        variant=variant,
        num_classes=num_classes,
        stem_conv=stem_conv,
        stem_bn=_bn(channels[0], "stem/bn"),
        blocks=blocks,
        head=head,
        ch_variant=ch_variant,
        st_kernel=st_kernel,
        r=r,
        residual_projection=residual_projection,
        channels=channels,
        seed=seed,
        in_channels=in_channels,
    )


def model_from_config(cfg: dict) -> ModelGraph:
    return build_model(
        cfg["variant"], cfg["num_classes"], cfg["ch_variant"], cfg["st_kernel"], cfg["seed"],
        channels=cfg["channels"], r=cfg["r"],
        residual_projection=cfg["residual_projection"], in_channels=cfg.get("in_channels", 3),
    )


# --------------------------------------------------------------------------
# forward


def downsample(I: Tensor, params: Optional[Downsample], mode: str = "infer") -> Tensor:
    """Shortcut path: identity without params, projection otherwise."""
    if params is None:
        return I
    if params.kind == "zero_pad":
        return ops.zero_pad_shortcut(I, params.out_channels, params.stride)
    return ops.batch_norm(ops.conv3d(I, params.conv), params.bn, mode)


def ra_block_forward(
    I: Tensor,
    params: RABlockParams,
    mode: str = "infer",
    *,
    attention_bypass: bool = False,
    capture: Optional[dict] = None,
) -> Tensor:
    """conv-BN-ReLU-conv-BN, channel then spatio-temporal recalibration, shortcut add, ReLU."""
    if I.ndim != 5 or I.shape[1] != params.in_channels:
        raise ShapeError(f"{params.name}: input {I.shape} incompatible with {params.in_channels} channels")
    h = ops.relu(ops.batch_norm(ops.conv3d(I, params.conv1), params.bn1, mode))
    i_conv = ops.batch_norm(ops.conv3d(h, params.conv2), params.bn2, mode)
    i_ch = i_st = i_conv
    if params.ch_attn is not None:
        if attention_bypass:
            a_ch = Tensor.ones(i_conv.shape[:2] + (1, 1, 1), dtype=i_conv.dtype)
        else:
            a_ch = channel_attention_map(i_conv, params.ch_attn)
        i_ch = apply_channel(i_conv, a_ch)
    if params.st_attn is not None:
        if attention_bypass:
            a_st = Tensor.ones((i_ch.shape[0], 1) + i_ch.shape[2:], dtype=i_ch.dtype)
        else:
            a_st = st_attention_map(i_ch, params.st_attn)
        i_st = apply_spatiotemporal(i_ch, a_st)
    shortcut = downsample(I, params.downsample, mode)
    if shortcut.shape != i_st.shape:
        raise ShapeError(f"{params.name}: shortcut {shortcut.shape} does not match main path {i_st.shape}")
    out = ops.relu(ops.add(i_st, shortcut))
    if capture is not None:
        for stage, t in zip(BLOCK_STAGES, (i_conv, i_ch, i_st, out)):
            capture[f"{params.name}/{stage}"] = t
    return out


def forward(
    model: ModelGraph,
    batch: Tensor,
    mode: str = "infer",
    *,
    attention_bypass: bool = False,
    capture: Optional[dict] = None,
) -> Tensor:
    """Logits ``[N, num_classes]`` for a ``[N, C, T, H, W]`` clip batch."""
    if batch.ndim != 5 or batch.shape[1] != model.in_channels:
        raise ShapeError(f"expected [N, {model.in_channels}, T, H, W], got {batch.shape}")
    x = ops.relu(ops.batch_norm(ops.conv3d(batch, model.stem_conv), model.stem_bn, mode))
    if capture is not None:
        capture["stem/out"] = x
    for block in model.blocks:
        x = ra_block_forward(x, block, mode, attention_bypass=attention_bypass, capture=capture)
    pooled = ops.global_avg_pool(x)
    logits = ops.linear(pooled, model.head.weight, model.head.bias)
    if capture is not None:
        capture["pool"] = pooled
        capture["logits"] = logits
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteActivationError("non-finite logits: training has likely diverged")
    return logits


# --------------------------------------------------------------------------
# auditing


def count_params(model: ModelGraph) -> tuple[int, dict[str, int]]:
    """Trainable element counts; BN running statistics are excluded."""
    by_layer = {path: t.size for path, t in model.parameters().items()}
    return sum(by_layer.values()), by_layer


def shape_table(model: ModelGraph, input_extents: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output extents propagated symbolically from ``(C, T, H, W)``."""
    c, *ext = (int(v) for v in input_extents)
    if c != model.in_channels or len(ext) != 3:
        raise ShapeError(f"expected ({model.in_channels}, T, H, W), got {tuple(input_extents)}")
    if min(ext) < 1:
        raise ShapeError(f"infeasible input extents {tuple(input_extents)}")
    ext = model.stem_conv.output_extents(ext)
    rows = [("stem", (model.stem_conv.out_channels, *ext))]
    for b in model.blocks:
        main = b.conv2.output_extents(b.conv1.output_extents(ext))
        if b.downsample is None:
            short = tuple(ext)
        elif b.downsample.kind == "conv":
            short = b.downsample.conv.output_extents(ext)
        else:
            short = tuple(-(-n // s) for n, s in zip(ext, b.downsample.stride))
        if short != main:
            raise ShapeError(f"{b.name}: shortcut extents {short} do not match main path {main}")
        ext = main
        rows.append((b.name, (b.out_channels, *ext)))
    width = model.blocks[-1].out_channels
    rows.append(("pooling", (width, 1, 1, 1)))
    rows.append(("flatten", (width,)))
    rows.append(("dense", (model.num_classes,)))
    return rows


def observed_shapes(capture: dict, model: ModelGraph) -> list[tuple[str, tuple[int, ...]]]:
    """Rows in :func:`shape_table` order built from a forward-pass capture (batch axis dropped)."""
    rows = [("stem", capture["stem/out"].shape[1:])]
    rows += [(b.name, capture[f"{b.name}/out"].shape[1:]) for b in model.blocks]
    pooled = capture["pool"].shape[1:]
    rows.append(("pooling", pooled + (1, 1, 1)))
    rows.append(("flatten", pooled))
    rows.append(("dense", capture["logits"].shape[1:]))
    return rows


def attention_overhead(channels: Sequence[int], r: int, kernel: int) -> int:
    """Closed-form count of attention parameters added per block, summed."""
    total = 0
    for c in channels:
        hidden = max(1, c // r)
        total += 2 * c * hidden + hidden + c  # squeeze + excite weights, both biases
        total += 2 * kernel**3 + 1  # 2 -> 1 cubic conv with bias
    return total
