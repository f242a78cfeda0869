"""Stacked dual-query decoder.

Each layer runs, in order: a joint self-attention + FFN over the
concatenated semantic and instance queries, two independent multi-scale
decoders (one per query kind) that cross-attend to the feature levels
coarsest to finest under mask guidance, a second joint self-attention +
FFN, and finally the prediction heads. Low-scoring instance queries are
pruned before each layer: they are frozen pass-throughs, excluded from
attention, but keep their output slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import MaskFeature, MultiScaleFeatures
from .heads import BoxHead, PredictionSet, class_logits, mask_logits
from .layers import (
    MLP,
    CrossAttentionBlock,
    FeedForwardBlock,
    SelfAttentionBlock,
    sincos_position_2d,
)

NUM_LEVELS = 4  # one multi-scale decoder sublayer per feature level


@dataclass
class DecoderConfig:
    num_layers: int = 4  # stacked decoder layers
    num_heads: int = 8
    max_threshold: float = 0.01  # top of the per-layer selection schedule
    query_selection: bool = True
    query_interaction: bool = True  # ablation hook: joint attention on/off
    ffn_ratio: int = 4

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("need at least one decoder layer")
        if not (0.0 <= self.max_threshold < 1.0):
            raise ValueError("max_threshold must be in [0, 1)")


def selection_threshold(k: int, num_layers: int, max_threshold: float) -> float:
    """Score threshold before layer k (1-based): max / 2^(K - k)."""
    if not 1 <= k <= num_layers:
        raise ValueError(f"layer index {k} outside [1, {num_layers}]")
    return max_threshold / 2 ** (num_layers - k)


def select_instance_queries(scores: Tensor, k: int, config: DecoderConfig) -> Tensor:
    """Boolean keep-mask over instance queries for layer k.

    Scores above the layer threshold survive; a zero threshold keeps
    everything (the comparison relaxes to >=), as does disabling selection.
    """
    if not config.query_selection:
        return torch.ones_like(scores, dtype=torch.bool)
    t = selection_threshold(k, config.num_layers, config.max_threshold)
    if t == 0.0:
        return scores >= 0.0
    return scores > t


def attention_keep_masks(
    mask_probs: Tensor, source_shape: tuple[int, int], target_shapes: list[tuple[int, int]]
) -> list[Tensor]:
    """Downsample predicted masks into per-level attention keep-masks.

    mask_probs: (B, Q, H*W) probabilities at source_shape. For each target
    shape the keep-mask is probability >= 0.5; any query with an empty mask
    at a scale attends everywhere at that scale.
    """
    b, q, _ = mask_probs.shape
    maps = mask_probs.view(b, q, *source_shape)
    out = []
    for h, w in target_shapes:
        if (h, w) == tuple(source_shape):
            resized = maps
        else:
            resized = F.interpolate(maps, size=(h, w), mode="bilinear", align_corners=False)
        keep = (resized >= 0.5).flatten(2)
        empty = ~keep.any(dim=-1, keepdim=True)
        keep = keep | empty
        out.append(keep)
    return out


class PredictionHeads(nn.Module):
    """Shared per-layer heads: mask embeddings, prototype classifier, boxes."""

    def __init__(self, channels: int):
        super().__init__()
        self.semantic_norm = nn.LayerNorm(channels)
        self.instance_norm = nn.LayerNorm(channels)
        self.mask_embed = MLP(channels, channels, channels, num_layers=3)
        self.class_embed = nn.Linear(channels, channels)
        self.proto_embed = nn.Linear(channels, channels)
        self.no_object = nn.Parameter(torch.zeros(channels))
        self.box_head = BoxHead(channels)

    def forward(
        self,
        semantic: Tensor,  # (B, M, C)
        instance: Tensor,  # (B, N, C)
        mask_feature: MaskFeature,
        previous_boxes: Tensor | None,
    ) -> PredictionSet:
        qs = self.semantic_norm(semantic)
        qi = self.instance_norm(instance)
        sem_logits = mask_logits(self.mask_embed(qs), mask_feature.values)
        inst_logits = mask_logits(self.mask_embed(qi), mask_feature.values)
        noobj = self.no_object.expand(qs.shape[0], 1, -1)
        protos = torch.cat([self.proto_embed(qs), noobj], dim=1)
        cls = class_logits(self.class_embed(qi), protos)
        boxes = self.box_head(qi, previous_boxes)
        return PredictionSet(
            semantic_logits=sem_logits,
            instance_logits=inst_logits,
            class_logits=cls,
            boxes=boxes,
            spatial_shape=mask_feature.spatial_shape,
        )


class _MultiScaleDecoder(nn.Module):
    """One stream's coarse-to-fine stack: per level, 2x MHSA + MHCA + FFN."""

    def __init__(self, channels: int, num_heads: int, ffn_ratio: int):
        super().__init__()
        self.sa1 = nn.ModuleList(SelfAttentionBlock(channels, num_heads) for _ in range(NUM_LEVELS))
        self.sa2 = nn.ModuleList(SelfAttentionBlock(channels, num_heads) for _ in range(NUM_LEVELS))
        self.ca = nn.ModuleList(CrossAttentionBlock(channels, num_heads) for _ in range(NUM_LEVELS))
        self.ffn = nn.ModuleList(
            FeedForwardBlock(channels, ffn_ratio * channels) for _ in range(NUM_LEVELS)
        )

    def forward(self, x, pos, levels, level_pos, keep_masks, self_keep=None, gate=None):
        for l in range(NUM_LEVELS):
            x = _gated(x, self.sa1[l](x, pos=pos, keep_mask=_maybe(self_keep)), gate)
            x = _gated(x, self.sa2[l](x, pos=pos, keep_mask=_maybe(self_keep)), gate)
            x = _gated(
                x,
                self.ca[l](
                    x,
                    levels[l],
                    query_pos=pos,
                    memory_pos=level_pos[l],
                    keep_mask=_maybe(keep_masks[l]),
                ),
                gate,
            )
            x = _gated(x, self.ffn[l](x), gate)
        return x


def _maybe(mask: Tensor | None) -> Tensor | None:
    """Pass None when a keep-mask is fully open so kernels stay identical."""
    if mask is None or bool(mask.all()):
        return None
    return mask


def _gated(before: Tensor, after: Tensor, gate: Tensor | None) -> Tensor:
    """Freeze rows where gate is 0; identity when every row is live."""
    if gate is None:
        return after
    return before + gate * (after - before)


@dataclass
class LayerState:
    """Queries flowing between decoder layers, plus the guidance source."""

    semantic: Tensor  # (B, M, C)
    instance: Tensor  # (B, N, C)
    semantic_pos: Tensor
    instance_pos: Tensor
    active: Tensor  # (B, N) bool: queries live in the upcoming layer
    predictions: PredictionSet  # previous layer's outputs

    def active_ids(self, batch: int = 0) -> list[int]:
        return torch.nonzero(self.active[batch], as_tuple=False).flatten().tolist()


@dataclass
class DecoderOutputs:
    predictions: list[PredictionSet]  # length K+1; index 0 = pre-decoder heads
    active: list[Tensor]  # per prediction set, (B, N) bool
    thresholds: list[float] = field(default_factory=list)  # T_k for k = 1..K


class _DecoderLayer(nn.Module):
    def __init__(self, channels: int, num_heads: int, ffn_ratio: int):
        super().__init__()
        self.joint_sa_in = SelfAttentionBlock(channels, num_heads)
        self.joint_ffn_in = FeedForwardBlock(channels, ffn_ratio * channels)
        self.semantic_msd = _MultiScaleDecoder(channels, num_heads, ffn_ratio)
        self.instance_msd = _MultiScaleDecoder(channels, num_heads, ffn_ratio)
        self.joint_sa_out = SelfAttentionBlock(channels, num_heads)
        self.joint_ffn_out = FeedForwardBlock(channels, ffn_ratio * channels)


class DualQueryDecoder(nn.Module):
    def __init__(self, channels: int, config: DecoderConfig | None = None):
        super().__init__()
        self.config = config or DecoderConfig()
        self.channels = channels
        self.layers = nn.ModuleList(
            _DecoderLayer(channels, self.config.num_heads, self.config.ffn_ratio)
            for _ in range(self.config.num_layers)
        )
        self.heads = PredictionHeads(channels)
        self.level_embed = nn.Parameter(0.02 * torch.randn(NUM_LEVELS, channels))

    # -- helpers ----------------------------------------------------------

    def _level_positions(self, features: MultiScaleFeatures) -> list[Tensor]:
        out = []
        for l, (h, w) in enumerate(features.spatial_shapes):
            pos = sincos_position_2d(
                h, w, self.channels, device=self.level_embed.device, dtype=self.level_embed.dtype
            )
            out.append((pos + self.level_embed[l]).unsqueeze(0))
        return out

    def _joint_blocks(self, sa, ffn, state: LayerState) -> LayerState:
        m = state.semantic.shape[1]
        x = torch.cat([state.semantic, state.instance], dim=1)
        pos = torch.cat([state.semantic_pos, state.instance_pos], dim=1)
        # pruned instance queries are invisible as keys and stay frozen as rows
        key_live = torch.cat(
            [torch.ones_like(state.active[:, :1]).expand(-1, m), state.active], dim=1
        )
        keep = key_live.unsqueeze(1).expand(-1, x.shape[1], -1)
        gate = None
        if not bool(state.active.all()):
            gate = key_live.unsqueeze(-1).to(x.dtype)
        x = _gated(x, sa(x, pos=pos, keep_mask=_maybe(keep)), gate)
        x = _gated(x, ffn(x), gate)
        return LayerState(
            semantic=x[:, :m],
            instance=x[:, m:],
            semantic_pos=state.semantic_pos,
            instance_pos=state.instance_pos,
            active=state.active,
            predictions=state.predictions,
        )

    def layer(
        self,
        state: LayerState,
        features: MultiScaleFeatures,
        mask_feature: MaskFeature,
        k: int,
        min_active: int = 0,
    ) -> tuple[LayerState, PredictionSet, float]:
        """Run decoder layer k (1-based). Returns (state, predictions, T_k)."""
        cfg = self.config
        blocks: _DecoderLayer = self.layers[k - 1]
        t_k = selection_threshold(k, cfg.num_layers, cfg.max_threshold)

        scores = state.predictions.instance_scores()  # (B, N)
        active = select_instance_queries(scores, k, cfg)
        if min_active > 0:
            short = active.sum(dim=1) < min_active
            if bool(short.any()):
                top = scores.topk(min(min_active, scores.shape[1]), dim=1).indices
                forced = torch.zeros_like(active)
                forced.scatter_(1, top, True)
                active = torch.where(short.unsqueeze(1), active | forced, active)
        state = LayerState(
            semantic=state.semantic,
            instance=state.instance,
            semantic_pos=state.semantic_pos,
            instance_pos=state.instance_pos,
            active=active,
            predictions=state.predictions,
        )

        if cfg.query_interaction:
            state = self._joint_blocks(blocks.joint_sa_in, blocks.joint_ffn_in, state)

        level_pos = self._level_positions(features)
        prev = state.predictions
        sem_keep = attention_keep_masks(
            prev.semantic_masks, prev.spatial_shape, features.spatial_shapes
        )
        inst_keep = attention_keep_masks(
            prev.instance_masks, prev.spatial_shape, features.spatial_shapes
        )

        semantic = blocks.semantic_msd(
            state.semantic, state.semantic_pos, features.levels, level_pos, sem_keep
        )

        gate = None
        self_keep = None
        if not bool(active.all()):
            gate = active.unsqueeze(-1).to(state.instance.dtype)
            n = active.shape[1]
            self_keep = active.unsqueeze(1).expand(-1, n, -1)
            if bool((~active).all(dim=1).any()):
                # no live queries in some batch element: nothing to attend to
                self_keep = self_keep | (~active.any(dim=1))[:, None, None]
        instance = blocks.instance_msd(
            state.instance,
            state.instance_pos,
            features.levels,
            level_pos,
            inst_keep,
            self_keep=self_keep,
            gate=gate,
        )

        state = LayerState(
            semantic=semantic,
            instance=instance,
            semantic_pos=state.semantic_pos,
            instance_pos=state.instance_pos,
            active=active,
            predictions=prev,
        )
        if cfg.query_interaction:
            state = self._joint_blocks(blocks.joint_sa_out, blocks.joint_ffn_out, state)

        preds = self.heads(
            state.semantic, state.instance, mask_feature, previous_boxes=prev.boxes
        )
        if not bool(active.all()):
            frozen_boxes = torch.where(active.unsqueeze(-1), preds.boxes, prev.boxes)
            preds = PredictionSet(
                semantic_logits=preds.semantic_logits,
                instance_logits=preds.instance_logits,
                class_logits=preds.class_logits,
                boxes=frozen_boxes,
                spatial_shape=preds.spatial_shape,
            )
        state = LayerState(
            semantic=state.semantic,
            instance=state.instance,
            semantic_pos=state.semantic_pos,
            instance_pos=state.instance_pos,
            active=active,
            predictions=preds,
        )
        return state, preds, t_k

    def forward(
        self,
        features: MultiScaleFeatures,
        mask_feature: MaskFeature,
        semantic: Tensor,
        instance: Tensor,
        semantic_pos: Tensor,
        instance_pos: Tensor,
        min_active: int = 0,
    ) -> DecoderOutputs:
        b, n = instance.shape[:2]
        all_active = torch.ones(b, n, dtype=torch.bool, device=instance.device)
        preds0 = self.heads(semantic, instance, mask_feature, previous_boxes=None)
        state = LayerState(
            semantic=semantic,
            instance=instance,
            semantic_pos=semantic_pos,
            instance_pos=instance_pos,
            active=all_active,
            predictions=preds0,
        )
        predictions = [preds0]
        active = [all_active]
        thresholds = []
        for k in range(1, self.config.num_layers + 1):
            state, preds, t_k = self.layer(state, features, mask_feature, k, min_active=min_active)
            predictions.append(preds)
            active.append(state.active)
            thresholds.append(t_k)
        return DecoderOutputs(predictions=predictions, active=active, thresholds=thresholds)
