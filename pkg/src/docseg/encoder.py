"""Convolutional pyramid encoder with per-level attention refinement.

Produces four feature levels at strides {32, 16, 8, 4} (coarsest first) and
fuses them top-down into a single high-resolution mask feature at stride 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch.nn.functional as F
from torch import Tensor, nn

from .layers import (
    FeedForwardBlock,
    SelfAttentionBlock,
    merge_windows,
    partition_windows,
    sincos_position_2d,
    window_side,
)

STRIDES = (32, 16, 8, 4)  # coarsest first; this is the order the decoder consumes


@dataclass
class MultiScaleFeatures:
    """Four flattened feature maps, coarsest first, all with C channels."""

    levels: list[Tensor]  # each (B, H_l * W_l, C)
    spatial_shapes: list[tuple[int, int]]

    def __post_init__(self):
        if len(self.levels) != 4 or len(self.spatial_shapes) != 4:
            raise ValueError("expected exactly 4 feature levels")
        widths = {lv.shape[-1] for lv in self.levels}
        if len(widths) != 1:
            raise ValueError(f"levels disagree on channel width: {widths}")
        for lv, (h, w) in zip(self.levels, self.spatial_shapes):
            if lv.shape[-2] != h * w:
                raise ValueError(f"level of length {lv.shape[-2]} does not match shape {(h, w)}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]


@dataclass
class MaskFeature:
    """High-resolution per-pixel feature at the finest stride."""

    values: Tensor  # (B, H * W, C)
    spatial_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.spatial_shape
        if self.values.shape[-2] != h * w:
            raise ValueError(f"values length {self.values.shape[-2]} != {h}*{w}")


class _ConvStage(nn.Module):
    """Stride-2 conv + group norm + GELU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
        # >= 2 channels per group so 1x1 coarse maps still normalize
        self.norm = nn.GroupNorm(max(1, min(8, out_ch // 2)), out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.norm(self.conv(x)))


class _LevelRefiner(nn.Module):
    """One self-attention + FFN block applied within spatial windows.

    Levels larger than 32x32 tokens are split into the largest evenly
    dividing windows to bound the attention footprint; smaller levels get
    full attention. Positions use the global token coordinates.
    """

    def __init__(self, dim: int, num_heads: int, window_cap: int = 32):
        super().__init__()
        self.attn = SelfAttentionBlock(dim, num_heads)
        self.ffn = FeedForwardBlock(dim, 4 * dim)
        self.window_cap = window_cap

    def forward(self, x: Tensor, shape: tuple[int, int]) -> Tensor:
        b = x.shape[0]
        h, w = shape
        pos = sincos_position_2d(h, w, x.shape[-1], device=x.device, dtype=x.dtype)
        wh = window_side(h, self.window_cap)
        ww = window_side(w, self.window_cap)
        if (wh, ww) == (h, w):
            x = self.attn(x, pos=pos.unsqueeze(0))
        else:
            pos_w = partition_windows(pos.unsqueeze(0), h, w, wh, ww)  # (n_windows, wl, C)
            x_w = partition_windows(x, h, w, wh, ww)  # (B * n_windows, wl, C), batch-major
            x_w = self.attn(x_w, pos=pos_w.repeat(b, 1, 1))
            x = merge_windows(x_w, b, h, w, wh, ww)
        return self.ffn(x)


class PyramidEncoder(nn.Module):
    """encode(): image -> MultiScaleFeatures at strides {32, 16, 8, 4}."""

    def __init__(self, channels: int = 64, num_heads: int = 8):
        super().__init__()
        c = channels
        self.channels = c
        self.stem = nn.Sequential(_ConvStage(3, c // 2), _ConvStage(c // 2, c))  # to stride 4
        self.down8 = _ConvStage(c, c)
        self.down16 = _ConvStage(c, c)
        self.down32 = _ConvStage(c, c)
        self.refiners = nn.ModuleList(_LevelRefiner(c, num_heads) for _ in STRIDES)

    def forward(self, images: Tensor) -> MultiScaleFeatures:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(
                f"input {h}x{w} must have sides divisible by 32; pad the image before encoding"
            )
        f4 = self.stem(images)
        f8 = self.down8(f4)
        f16 = self.down16(f8)
        f32 = self.down32(f16)
        maps = [f32, f16, f8, f4]  # coarsest first
        levels = []
        shapes = []
        for refine, fmap in zip(self.refiners, maps):
            hh, ww = fmap.shape[-2:]
            tokens = fmap.flatten(2).transpose(1, 2)  # (B, HW, C)
            levels.append(refine(tokens, (hh, ww)))
            shapes.append((hh, ww))
        return MultiScaleFeatures(levels=levels, spatial_shapes=shapes)

    encode = forward


class MaskFeatureFuser(nn.Module):
    """Top-down pyramid fusion into a single stride-4 mask feature.

    Each coarser level is bilinearly upsampled x2 and added onto the
    laterally projected next-finer level; a 3x3 conv cleans up the result.
    """

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        self.laterals = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in STRIDES)
        # replicate padding keeps constant inputs constant at the borders
        self.out_conv = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate")

    def forward(self, features: MultiScaleFeatures) -> MaskFeature:
        if features.channels != self.channels:
            raise ValueError(f"feature width {features.channels} != fuser width {self.channels}")
        maps = []
        for level, (h, w) in zip(features.levels, features.spatial_shapes):
            b = level.shape[0]
            maps.append(level.transpose(1, 2).reshape(b, self.channels, h, w))
        y = self.laterals[0](maps[0])
        for lateral, fmap in zip(list(self.laterals)[1:], maps[1:]):
            up = F.interpolate(y, size=fmap.shape[-2:], mode="bilinear", align_corners=False)
            y = lateral(fmap) + up
        y = self.out_conv(y)
        h, w = y.shape[-2:]
        return MaskFeature(values=y.flatten(2).transpose(1, 2), spatial_shape=(h, w))

    fuse = forward
