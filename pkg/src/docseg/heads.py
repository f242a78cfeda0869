"""Prediction heads: masks and classes are similarity products with no
learned transform of their own; box regression is residual in logit space.

Mask logits are kept pre-sigmoid for the loss path; the probability views
are exposed as properties.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .layers import MLP, inverse_sigmoid


@dataclass
class PredictionSet:
    """Per-layer outputs. Leading batch dimensions are allowed."""

    semantic_logits: Tensor  # (..., M, H*W)
    instance_logits: Tensor  # (..., N, H*W)
    class_logits: Tensor  # (..., N, M+1); last column is no-object
    boxes: Tensor  # (..., N, 4), (cx, cy, w, h) in (0, 1)
    spatial_shape: tuple[int, int]

    @property
    def semantic_masks(self) -> Tensor:
        return torch.sigmoid(self.semantic_logits)

    @property
    def instance_masks(self) -> Tensor:
        return torch.sigmoid(self.instance_logits)

    @property
    def class_probs(self) -> Tensor:
        return torch.softmax(self.class_logits, dim=-1)

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1] - 1

    def instance_scores(self) -> Tensor:
        """Max class probability excluding the no-object column."""
        return self.class_probs[..., :-1].max(dim=-1).values


def mask_logits(queries: Tensor, mask_feature: Tensor) -> Tensor:
    """(..., Q, C) x (..., HW, C) -> (..., Q, HW) similarity logits."""
    return queries @ mask_feature.transpose(-1, -2)


def predict_semantic(semantic_queries: Tensor, mask_feature: Tensor) -> Tensor:
    """Semantic masks: sigmoid of query / pixel-feature dot products."""
    return torch.sigmoid(mask_logits(semantic_queries, mask_feature))


def predict_instance(instance_queries: Tensor, mask_feature: Tensor) -> Tensor:
    """Instance masks; same kernel as predict_semantic with N rows."""
    return torch.sigmoid(mask_logits(instance_queries, mask_feature))


def class_logits(instance_queries: Tensor, prototypes: Tensor) -> Tensor:
    """(..., N, C) x (..., M+1, C) -> (..., N, M+1) similarity logits."""
    return instance_queries @ prototypes.transpose(-1, -2)


def classify(instance_queries: Tensor, prototypes_with_noobj: Tensor) -> Tensor:
    """Row-wise softmax over prototype similarities (incl. no-object)."""
    return torch.softmax(class_logits(instance_queries, prototypes_with_noobj), dim=-1)


_BOX_OPEN_EPS = 1e-6  # keeps outputs strictly inside (0, 1) despite sigmoid saturation


def apply_box_residual(previous_boxes: Tensor, residual: Tensor, eps: float = 1e-4) -> Tensor:
    """Add a residual in inverse-sigmoid space; output stays in (0, 1)."""
    out = torch.sigmoid(inverse_sigmoid(previous_boxes, eps=eps) + residual)
    return out.clamp(min=_BOX_OPEN_EPS, max=1.0 - _BOX_OPEN_EPS)


class BoxHead(nn.Module):
    """Box regression: absolute at the first call, residual afterwards."""

    def __init__(self, channels: int):
        super().__init__()
        self.mlp = MLP(channels, channels, 4, num_layers=3)

    def forward(self, instance_queries: Tensor, previous_boxes: Tensor | None = None) -> Tensor:
        raw = self.mlp(instance_queries)
        if previous_boxes is None:
            return torch.sigmoid(raw).clamp(min=_BOX_OPEN_EPS, max=1.0 - _BOX_OPEN_EPS)
        return apply_box_residual(previous_boxes, raw)


def predict_boxes(
    head: BoxHead, instance_queries: Tensor, previous_boxes: Tensor | None, layer_index: int
) -> Tensor:
    if layer_index > 0 and previous_boxes is None:
        raise ValueError(f"layer {layer_index} needs previous boxes for residual regression")
    return head(instance_queries, previous_boxes if layer_index > 0 else None)
