"""Bipartite matching and the four training losses.

Mask terms combine focal and dice; boxes combine smooth L1 and distance
IoU; classification is cross entropy against class prototypes with a
down-weighted no-object label. The matching cost mirrors the loss terms
with the same weights. Auxiliary supervision applies the whole thing to
every decoder layer plus the pre-decoder predictions, re-matching each
layer independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .datamodel import SegSample
from .heads import PredictionSet


@dataclass
class LossWeights:
    focal: float = 10.0  # mask focal term
    dice: float = 1.0  # mask dice term
    smooth_l1: float = 1.0  # box L1 term
    diou: float = 1.0  # box distance-IoU term
    semantic: float = 5.0  # weight of the semantic loss in the total
    instance: float = 5.0  # weight of the instance loss in the total
    box: float = 1.0  # weight of the box loss in the total
    cls: float = 1.0  # weight of the classification loss in the total
    no_object: float = 0.1  # CE down-weight for unmatched queries
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query_id, gt_id), sorted by gt_id
    unmatched_queries: list[int]
    cost: float = 0.0

    def query_ids(self) -> list[int]:
        return [q for q, _ in self.pairs]

    def gt_ids(self) -> list[int]:
        return [g for _, g in self.pairs]


# ---------------------------------------------------------------------------
# Loss kernels (prediction and target on the same raster)
# ---------------------------------------------------------------------------


def focal_terms(logits: Tensor, targets: Tensor, alpha: float, gamma: float) -> Tensor:
    """Elementwise focal loss on sigmoid logits against binary targets."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def focal_loss(logits: Tensor, targets: Tensor, weights: LossWeights) -> Tensor:
    """Per-row mean focal loss: (R, P) -> (R,)."""
    return focal_terms(logits, targets, weights.focal_alpha, weights.focal_gamma).mean(-1)


def dice_loss(logits: Tensor, targets: Tensor, weights: LossWeights) -> Tensor:
    """Per-row smoothed dice loss: (R, P) -> (R,)."""
    p = torch.sigmoid(logits)
    eps = weights.dice_eps
    num = 2 * (p * targets).sum(-1) + eps
    den = p.sum(-1) + targets.sum(-1) + eps
    return 1 - num / den


def loss_semantic(
    semantic_logits: Tensor, semantic_targets: Tensor, weights: LossWeights
) -> tuple[Tensor, dict]:
    """Mask loss averaged over classes; targets are binary per class."""
    focal = focal_loss(semantic_logits, semantic_targets, weights)
    dice = dice_loss(semantic_logits, semantic_targets, weights)
    total = (weights.focal * focal + weights.dice * dice).mean()
    return total, {"focal": focal.mean().item(), "dice": dice.mean().item()}


def loss_instance(
    matched_logits: Tensor, matched_targets: Tensor, weights: LossWeights
) -> tuple[Tensor, dict]:
    """Mask loss averaged over matched pairs; empty matches contribute 0."""
    if matched_logits.shape[0] == 0:
        zero = matched_logits.sum() * 0.0
        return zero, {"focal": 0.0, "dice": 0.0}
    return loss_semantic(matched_logits, matched_targets, weights)


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    diff = (pred - target).abs()
    return torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta)


def diou_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - DIoU for (cx, cy, w, h) boxes; elementwise over the last axis."""
    p = box_cxcywh_to_xyxy(pred)
    t = box_cxcywh_to_xyxy(target)
    lt = torch.maximum(p[..., :2], t[..., :2])
    rb = torch.minimum(p[..., 2:], t[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_t = (t[..., 2] - t[..., 0]) * (t[..., 3] - t[..., 1])
    union = area_p + area_t - inter
    iou = inter / union.clamp(min=1e-12)
    rho2 = ((pred[..., 0] - target[..., 0]) ** 2) + ((pred[..., 1] - target[..., 1]) ** 2)
    enc_lt = torch.minimum(p[..., :2], t[..., :2])
    enc_rb = torch.maximum(p[..., 2:], t[..., 2:])
    c2 = ((enc_rb - enc_lt) ** 2).sum(-1).clamp(min=1e-12)
    return 1 - (iou - rho2 / c2)


def loss_box(matched_boxes: Tensor, gt_boxes: Tensor, weights: LossWeights) -> tuple[Tensor, dict]:
    if matched_boxes.shape[0] == 0:
        zero = matched_boxes.sum() * 0.0
        return zero, {"smooth_l1": 0.0, "diou": 0.0}
    sl1 = smooth_l1(matched_boxes, gt_boxes).sum(-1)
    diou = diou_loss(matched_boxes, gt_boxes)
    total = (weights.smooth_l1 * sl1 + weights.diou * diou).mean()
    return total, {"smooth_l1": sl1.mean().item(), "diou": diou.mean().item()}


def loss_class(
    class_logits: Tensor,
    match: MatchResult,
    gt_classes: Tensor,
    weights: LossWeights,
    rows: Tensor | None = None,
) -> Tensor:
    """Cross entropy with matched labels; no-object rows are down-weighted.

    rows restricts supervision to a subset of queries (pruned queries are
    excluded from the loss of their layer).
    """
    n, m_plus_1 = class_logits.shape
    no_object = m_plus_1 - 1
    labels = torch.full((n,), no_object, dtype=torch.long, device=class_logits.device)
    if match.pairs:
        q = torch.tensor(match.query_ids(), dtype=torch.long, device=class_logits.device)
        g = torch.tensor(match.gt_ids(), dtype=torch.long, device=class_logits.device)
        labels[q] = gt_classes[g]
    weight = torch.ones(m_plus_1, dtype=class_logits.dtype, device=class_logits.device)
    weight[no_object] = weights.no_object
    if rows is not None:
        class_logits = class_logits[rows]
        labels = labels[rows]
    return F.cross_entropy(class_logits, labels, weight=weight)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def pairwise_focal_cost(logits: Tensor, targets: Tensor, weights: LossWeights) -> Tensor:
    """(N, P) predictions x (G, P) binary targets -> (N, G) mean focal cost."""
    alpha, gamma = weights.focal_alpha, weights.focal_gamma
    p = torch.sigmoid(logits)
    pos = alpha * (1 - p) ** gamma * (-F.logsigmoid(logits))
    neg = (1 - alpha) * p**gamma * (-F.logsigmoid(-logits))
    return (pos @ targets.T + neg @ (1 - targets).T) / logits.shape[-1]


def pairwise_dice_cost(logits: Tensor, targets: Tensor, weights: LossWeights) -> Tensor:
    p = torch.sigmoid(logits)
    eps = weights.dice_eps
    num = 2 * (p @ targets.T) + eps
    den = p.sum(-1, keepdim=True) + targets.sum(-1)[None, :] + eps
    return 1 - num / den


def pairwise_box_cost(boxes: Tensor, gt_boxes: Tensor, weights: LossWeights) -> Tensor:
    n, g = boxes.shape[0], gt_boxes.shape[0]
    b = boxes[:, None, :].expand(n, g, 4)
    t = gt_boxes[None, :, :].expand(n, g, 4)
    return weights.smooth_l1 * smooth_l1(b, t).sum(-1) + weights.diou * diou_loss(b, t)


def match_cost_matrix(
    mask_logits: Tensor,  # (N, P)
    class_probs: Tensor,  # (N, M+1)
    boxes: Tensor,  # (N, 4)
    gt_masks: Tensor,  # (G, P) binary
    gt_classes: Tensor,  # (G,)
    gt_boxes: Tensor,  # (G, 4)
    weights: LossWeights,
) -> Tensor:
    cost = weights.cls * (-class_probs[:, gt_classes])
    cost = cost + weights.focal * pairwise_focal_cost(mask_logits, gt_masks, weights)
    cost = cost + weights.dice * pairwise_dice_cost(mask_logits, gt_masks, weights)
    cost = cost + pairwise_box_cost(boxes, gt_boxes, weights)
    return cost


def _canonicalize_ties(cost: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> list[tuple[int, int]]:
    """Resolve exact-tie ambiguity toward the lexicographically smallest
    assignment for duplicated cost rows and columns.

    Queries with bit-identical cost rows are interchangeable: the matched
    slots move to the lowest query ids, paired with ascending gt ids. The
    same canonicalization applies to duplicated gt columns.
    """
    assignment = dict(zip(rows.tolist(), cols.tolist()))

    row_groups: dict[bytes, list[int]] = {}
    for q in range(cost.shape[0]):
        row_groups.setdefault(cost[q].tobytes(), []).append(q)
    for group in row_groups.values():
        matched = sorted((q for q in group if q in assignment))
        gts = sorted(assignment[q] for q in matched)
        for q in matched:
            del assignment[q]
        for q, g in zip(sorted(group)[: len(gts)], gts):
            assignment[q] = g

    col_groups: dict[bytes, list[int]] = {}
    for g in range(cost.shape[1]):
        col_groups.setdefault(cost[:, g].tobytes(), []).append(g)
    by_gt = {g: q for q, g in assignment.items()}
    for group in col_groups.values():
        queries = sorted(by_gt[g] for g in group)
        for q, g in zip(queries, sorted(group)):
            by_gt[g] = q
    return sorted(((q, g) for g, q in by_gt.items()), key=lambda p: p[1])


def match(
    predictions: PredictionSet,
    gt_masks: Tensor,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    weights: LossWeights,
    rows: Tensor | None = None,
) -> MatchResult:
    """Optimal one-to-one assignment of queries to ground-truth instances.

    Prediction masks and gt_masks must live on the same point set. rows
    optionally restricts the assignable queries (query selection).
    """
    mask_logits = predictions.instance_logits
    class_probs = predictions.class_probs
    boxes = predictions.boxes
    if mask_logits.dim() != 2:
        raise ValueError("match() expects an unbatched PredictionSet")
    n = mask_logits.shape[0]
    candidates = torch.arange(n) if rows is None else torch.nonzero(rows).flatten()
    g = gt_masks.shape[0]
    if g == 0:
        return MatchResult(pairs=[], unmatched_queries=candidates.tolist(), cost=0.0)
    if g > candidates.numel():
        raise ValueError(f"{g} ground-truth instances but only {candidates.numel()} queries")
    with torch.no_grad():
        cost = match_cost_matrix(
            mask_logits[candidates],
            class_probs[candidates],
            boxes[candidates],
            gt_masks,
            gt_classes,
            gt_boxes,
            weights,
        )
        cost_np = cost.double().cpu().numpy()
    rows_idx, cols_idx = linear_sum_assignment(cost_np)
    pairs_local = _canonicalize_ties(cost_np, rows_idx, cols_idx)
    pairs = [(int(candidates[q]), int(g_)) for q, g_ in pairs_local]
    total = float(sum(cost_np[q, g_] for q, g_ in pairs_local))
    matched_q = {q for q, _ in pairs}
    unmatched = [int(q) for q in candidates.tolist() if q not in matched_q]
    return MatchResult(pairs=pairs, unmatched_queries=unmatched, cost=total)


# ---------------------------------------------------------------------------
# Point sampling (large rasters) and per-sample targets
# ---------------------------------------------------------------------------


def point_sample(maps: Tensor, coords: Tensor, mode: str = "bilinear") -> Tensor:
    """Sample (R, H, W) maps at normalized (x, y) coords in [0, 1].

    coords is (P, 2) shared across rows or (R, P, 2) per row; returns (R, P).
    """
    r = maps.shape[0]
    if coords.dim() == 2:
        coords = coords.unsqueeze(0).expand(r, -1, -1)
    grid = coords.to(maps.dtype) * 2 - 1
    out = F.grid_sample(
        maps.unsqueeze(1),
        grid.unsqueeze(2),
        mode=mode,
        align_corners=False,
        padding_mode="border",
    )
    return out[:, 0, :, 0]


def uncertainty_point_coords(
    logit_maps: Tensor,
    num_points: int,
    rng: torch.Generator,
    oversample: int = 3,
    importance_ratio: float = 0.75,
) -> Tensor:
    """Coords biased toward the mask boundary (smallest |logit|)."""
    r = logit_maps.shape[0]
    with torch.no_grad():
        cand = torch.rand(r, num_points * oversample, 2, generator=rng)
        vals = point_sample(logit_maps, cand)
        k_imp = int(num_points * importance_ratio)
        idx = (-vals.abs()).topk(k_imp, dim=1).indices
        imp = torch.gather(cand, 1, idx.unsqueeze(-1).expand(-1, -1, 2))
        rnd = torch.rand(r, num_points - k_imp, 2, generator=rng)
    return torch.cat([imp, rnd], dim=1)


@dataclass
class SampleTargets:
    """Ground truth for one sample, as tensors at image resolution."""

    masks: Tensor  # (G, H, W) float 0/1
    classes: Tensor  # (G,) long
    boxes: Tensor  # (G, 4)
    semantic_onehot: Tensor  # (M, H, W) float 0/1
    image_shape: tuple[int, int]


def targets_from_sample(sample: SegSample, dtype=torch.float32) -> SampleTargets:
    h, w = sample.image.shape[:2]
    m = sample.dataset.num_classes
    g = len(sample.instances)
    masks = torch.zeros(g, h, w, dtype=dtype)
    classes = torch.zeros(g, dtype=torch.long)
    boxes = torch.zeros(g, 4, dtype=dtype)
    for i, inst in enumerate(sample.instances):
        masks[i] = torch.from_numpy(inst.mask.astype(np.float32)).to(dtype)
        classes[i] = inst.class_index
        boxes[i] = torch.from_numpy(inst.bbox.astype(np.float64)).to(dtype)
    labels = torch.from_numpy(sample.semantic.labels.astype(np.int64))
    onehot = F.one_hot(labels.clamp(max=m), num_classes=m + 1)[..., :m]
    semantic = onehot.permute(2, 0, 1).to(dtype)
    return SampleTargets(
        masks=masks, classes=classes, boxes=boxes, semantic_onehot=semantic, image_shape=(h, w)
    )


# ---------------------------------------------------------------------------
# Total objective over all layers
# ---------------------------------------------------------------------------

DENSE_LIMIT = 128 * 128  # rasters at most this big use dense mask losses


def _as_maps(logits: Tensor, shape: tuple[int, int]) -> Tensor:
    return logits.view(logits.shape[0], *shape)


def _layer_loss(
    pred: PredictionSet,
    targets: SampleTargets,
    weights: LossWeights,
    rows: Tensor | None,
    rng: torch.Generator,
    num_points: int,
) -> tuple[Tensor, dict]:
    h, w = targets.image_shape
    dense = h * w <= DENSE_LIMIT
    m = targets.semantic_onehot.shape[0]
    dev = pred.instance_logits.device

    # --- align prediction and target rasters
    pred_sem_maps = _as_maps(pred.semantic_logits, pred.spatial_shape)
    pred_inst_maps = _as_maps(pred.instance_logits, pred.spatial_shape)
    if dense:
        sem_logits = F.interpolate(
            pred_sem_maps.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
        )[0].flatten(1)
        sem_targets = targets.semantic_onehot.flatten(1).to(sem_logits.dtype)
        inst_logits_full = F.interpolate(
            pred_inst_maps.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
        )[0].flatten(1)
        gt_masks_full = targets.masks.flatten(1).to(inst_logits_full.dtype)
    else:
        coords = torch.rand(num_points, 2, generator=rng)
        sem_coords = uncertainty_point_coords(pred_sem_maps.detach(), num_points, rng)
        sem_logits = point_sample(pred_sem_maps, sem_coords)
        sem_targets = point_sample(targets.semantic_onehot, sem_coords, mode="nearest").to(
            sem_logits.dtype
        )
        inst_logits_full = point_sample(pred_inst_maps, coords)
        gt_masks_full = (
            point_sample(targets.masks, coords, mode="nearest").to(inst_logits_full.dtype)
            if targets.masks.shape[0]
            else targets.masks.flatten(1)
        )

    # --- matching on the aligned rasters
    aligned = PredictionSet(
        semantic_logits=sem_logits,
        instance_logits=inst_logits_full,
        class_logits=pred.class_logits,
        boxes=pred.boxes,
        spatial_shape=pred.spatial_shape,
    )
    result = match(aligned, gt_masks_full, targets.classes, targets.boxes.to(dev), weights, rows)

    l_sem, sem_parts = loss_semantic(sem_logits, sem_targets, weights)

    if result.pairs:
        q_idx = torch.tensor(result.query_ids(), dtype=torch.long)
        g_idx = torch.tensor(result.gt_ids(), dtype=torch.long)
        if dense:
            matched_logits = inst_logits_full[q_idx]
            matched_targets = gt_masks_full[g_idx]
        else:
            pair_coords = uncertainty_point_coords(
                pred_inst_maps[q_idx].detach(), num_points, rng
            )
            matched_logits = point_sample(pred_inst_maps[q_idx], pair_coords)
            matched_targets = point_sample(
                targets.masks[g_idx], pair_coords, mode="nearest"
            ).to(matched_logits.dtype)
        l_inst, inst_parts = loss_instance(matched_logits, matched_targets, weights)
        l_box, box_parts = loss_box(
            pred.boxes[q_idx], targets.boxes[g_idx].to(pred.boxes.dtype), weights
        )
    else:
        l_inst, inst_parts = loss_instance(
            pred.instance_logits[:0], pred.instance_logits[:0], weights
        )
        l_box, box_parts = loss_box(pred.boxes[:0], pred.boxes[:0], weights)

    l_cls = loss_class(pred.class_logits, result, targets.classes, weights, rows=rows)

    total = (
        weights.semantic * l_sem
        + weights.instance * l_inst
        + weights.box * l_box
        + weights.cls * l_cls
    )
    report = {
        "semantic": float(l_sem.detach()),
        "instance": float(l_inst.detach()),
        "box": float(l_box.detach()),
        "class": float(l_cls.detach()),
        "matched": len(result.pairs),
        **{f"semantic_{k}": v for k, v in sem_parts.items()},
        **{f"instance_{k}": v for k, v in inst_parts.items()},
        **{f"box_{k}": v for k, v in box_parts.items()},
    }
    return total, report


def total_loss(
    layer_predictions: list[PredictionSet],
    targets: SampleTargets,
    weights: LossWeights | None = None,
    active: list[Tensor] | None = None,
    rng: torch.Generator | None = None,
    num_points: int = 4096,
) -> tuple[Tensor, dict]:
    """Sum of the weighted losses over all prediction layers.

    Matching is recomputed per layer. active optionally carries per-layer
    query keep-masks; pruned queries are excluded from matching and from
    the classification loss of that layer.
    """
    weights = weights or LossWeights()
    rng = rng or torch.Generator().manual_seed(0)
    total = None
    layers = []
    for i, pred in enumerate(layer_predictions):
        rows = None
        if active is not None and active[i] is not None and not bool(active[i].all()):
            rows = active[i]
        l, report = _layer_loss(pred, targets, weights, rows, rng, num_points)
        total = l if total is None else total + l
        layers.append(report)
    summary = {
        key: sum(layer[key] for layer in layers)
        for key in ("semantic", "instance", "box", "class")
    }
    summary["total"] = float(total.detach())
    return total, {"layers": layers, **summary}
