"""Whole-image and sliding-window prediction with cross-source merging.

The whole-image pass squashes the page to one square input and catches
large regions; the tiled pass keeps more resolution for small objects.
Detections touching interior tile borders get their confidence halved
before a mask-level NMS removes duplicates across sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import tight_bbox
from .heads import PredictionSet
from .metrics import mask_iou, box_iou_xyxy, cxcywh_to_xyxy


@dataclass
class InferenceConfig:
    whole_size: int = 256  # square side of the whole-image pass
    patch_size: int = 256
    patch_short_side: int = 320
    overlap: int = 64  # patch_size - stride
    boundary_margin: int = 8  # px; "touching" an interior tile border
    boundary_factor: float = 0.5
    score_floor: float = 0.3
    nms_iou: float = 0.5
    mask_threshold: float = 0.5
    use_patches: bool = False
    nms_on_boxes: bool = False


@dataclass
class DetectedInstance:
    class_index: int
    score: float
    mask: np.ndarray  # bool, full-image coordinates
    bbox: np.ndarray  # (cx, cy, w, h) normalized
    source: str = "whole"  # "whole" or "patch(i,j)"

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class TileGrid:
    patch_size: int
    stride: int
    offsets: list[tuple[int, int]] = field(default_factory=list)  # (x, y)


def build_tile_grid(image_hw: tuple[int, int], patch_size: int, overlap: int) -> TileGrid:
    """Offsets covering the image; the last tile clamps to the far edge."""
    h, w = image_hw
    stride = patch_size - overlap
    if stride <= 0:
        raise ValueError(f"overlap {overlap} must be smaller than patch {patch_size}")

    def starts(extent):
        if extent <= patch_size:
            return [0]
        xs = list(range(0, extent - patch_size, stride))
        xs.append(extent - patch_size)
        return sorted(set(xs))

    offsets = [(x, y) for y in starts(h) for x in starts(w)]
    return TileGrid(patch_size=patch_size, stride=stride, offsets=offsets)


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1).unsqueeze(0)


def _resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = _to_tensor(image)
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    out = F.interpolate(t, size=size, mode="nearest")
    return out[0, 0].numpy() > 0.5


def _final_predictions(model, image_chw: torch.Tensor, class_names: list[str]) -> PredictionSet:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outputs = model(image_chw, class_names)
    finally:
        if was_training:
            model.train()
    pred = outputs.predictions[-1]
    return PredictionSet(
        semantic_logits=pred.semantic_logits[0],
        instance_logits=pred.instance_logits[0],
        class_logits=pred.class_logits[0],
        boxes=pred.boxes[0],
        spatial_shape=pred.spatial_shape,
    )


def _extract_instances(
    pred: PredictionSet, frame_hw: tuple[int, int], cfg: InferenceConfig, source: str
) -> list[DetectedInstance]:
    probs = pred.class_probs
    scores, classes = probs[:, :-1].max(dim=-1)
    maps = pred.instance_logits.view(-1, *pred.spatial_shape)
    upsampled = F.interpolate(
        maps.unsqueeze(0), size=frame_hw, mode="bilinear", align_corners=False
    )[0]
    out = []
    for i in range(maps.shape[0]):
        score = float(scores[i])
        if score < cfg.score_floor:
            continue
        mask = (torch.sigmoid(upsampled[i]) >= cfg.mask_threshold).numpy()
        if not mask.any():
            continue
        out.append(
            DetectedInstance(
                class_index=int(classes[i]),
                score=score,
                mask=mask,
                bbox=pred.boxes[i].numpy().astype(np.float64),
                source=source,
            )
        )
    return out


def semantic_labels(pred: PredictionSet, frame_hw: tuple[int, int], num_classes: int) -> np.ndarray:
    """Per-pixel argmax over semantic masks; background where all < 0.5."""
    maps = pred.semantic_logits.view(num_classes, *pred.spatial_shape)
    up = F.interpolate(maps.unsqueeze(0), size=frame_hw, mode="bilinear", align_corners=False)[0]
    probs = torch.sigmoid(up)
    best, labels = probs.max(dim=0)
    labels = labels.numpy().astype(np.int32)
    labels[best.numpy() < 0.5] = num_classes
    return labels


def predict_whole(
    model, image: np.ndarray, class_names: list[str], cfg: InferenceConfig | None = None
) -> tuple[list[DetectedInstance], np.ndarray]:
    """Detections in original-image coordinates plus the semantic map.

    The semantic map is returned at the resized (whole_size square) frame.
    """
    cfg = cfg or InferenceConfig()
    if len(class_names) == 0:
        raise ValueError("class_names is empty")
    h, w = image.shape[:2]
    size = (cfg.whole_size, cfg.whole_size)
    resized = image if (h, w) == size else _resize_image(image, size)
    pred = _final_predictions(model, _to_tensor(resized), class_names)
    instances = _extract_instances(pred, size, cfg, source="whole")
    for inst in instances:
        inst.mask = _resize_mask(inst.mask, (h, w))
    instances = [i for i in instances if i.mask.any()]
    for inst in instances:
        inst.bbox = tight_bbox(inst.mask)
    semantic = semantic_labels(pred, size, len(class_names))
    return instances, semantic


def _touches_interior_border(
    mask: np.ndarray, offset: tuple[int, int], patch: int, frame_hw: tuple[int, int], margin: int
) -> bool:
    x0, y0 = offset
    h, w = frame_hw
    sub = mask[y0 : y0 + patch, x0 : x0 + patch]
    if not sub.any():
        return False
    ys, xs = np.nonzero(sub)
    if y0 > 0 and ys.min() < margin:
        return True
    if x0 > 0 and xs.min() < margin:
        return True
    if y0 + patch < h and ys.max() >= patch - margin:
        return True
    if x0 + patch < w and xs.max() >= patch - margin:
        return True
    return False


def predict_patches(
    model,
    image: np.ndarray,
    class_names: list[str],
    grid: TileGrid | None = None,
    cfg: InferenceConfig | None = None,
) -> list[DetectedInstance]:
    """Sliding-window detections mapped back to original coordinates."""
    cfg = cfg or InferenceConfig()
    if len(class_names) == 0:
        raise ValueError("class_names is empty")
    h, w = image.shape[:2]
    scale = cfg.patch_short_side / min(h, w)
    hs, ws = int(round(h * scale)), int(round(w * scale))
    if cfg.patch_size > min(hs, ws):
        # patch would not fit; fall back to the whole-image path
        instances, _ = predict_whole(model, image, class_names, cfg)
        return instances
    scaled = image if (hs, ws) == (h, w) else _resize_image(image, (hs, ws))
    if grid is None:
        grid = build_tile_grid((hs, ws), cfg.patch_size, cfg.overlap)

    out: list[DetectedInstance] = []
    p = grid.patch_size
    for x0, y0 in grid.offsets:
        crop = scaled[y0 : y0 + p, x0 : x0 + p]
        pred = _final_predictions(model, _to_tensor(crop), class_names)
        for inst in _extract_instances(pred, (p, p), cfg, source=f"patch({x0},{y0})"):
            full = np.zeros((hs, ws), dtype=bool)
            full[y0 : y0 + p, x0 : x0 + p] = inst.mask
            if _touches_interior_border(full, (x0, y0), p, (hs, ws), cfg.boundary_margin):
                inst.score *= cfg.boundary_factor
            inst.mask = _resize_mask(full, (h, w))
            if not inst.mask.any():
                continue
            inst.bbox = tight_bbox(inst.mask)
            out.append(inst)
    return out


def merge_and_nms(
    whole: list[DetectedInstance],
    patches: list[DetectedInstance],
    iou_threshold: float = 0.5,
    on_boxes: bool = False,
) -> list[DetectedInstance]:
    """Greedy per-class NMS across sources; whole-image detections win ties."""
    pool = list(whole) + list(patches)
    kept: list[DetectedInstance] = []
    by_class: dict[int, list[DetectedInstance]] = {}
    for det in pool:
        by_class.setdefault(det.class_index, []).append(det)
    for c in sorted(by_class):
        dets = sorted(
            by_class[c], key=lambda d: (-d.score, 0 if d.source == "whole" else 1, -d.area)
        )
        survivors: list[DetectedInstance] = []
        for det in dets:
            duplicate = False
            for s in survivors:
                if on_boxes:
                    iou = box_iou_xyxy(cxcywh_to_xyxy(det.bbox), cxcywh_to_xyxy(s.bbox))
                else:
                    iou = mask_iou(det.mask, s.mask)
                if iou > iou_threshold:
                    duplicate = True
                    break
            if not duplicate:
                survivors.append(det)
        kept.extend(survivors)
    return kept


def predict(
    model, image: np.ndarray, class_names: list[str], cfg: InferenceConfig | None = None
) -> tuple[list[DetectedInstance], np.ndarray]:
    """Full pipeline: whole pass, optional tiled pass, merge, NMS."""
    cfg = cfg or InferenceConfig()
    whole, semantic = predict_whole(model, image, class_names, cfg)
    patches = (
        predict_patches(model, image, class_names, None, cfg) if cfg.use_patches else []
    )
    merged = merge_and_nms(whole, patches, cfg.nms_iou, on_boxes=cfg.nms_on_boxes)
    return merged, semantic
