"""Evaluation metrics: mIoU, mask/box average precision, and mean F-score.

AP follows the COCO protocol: greedy score-descending matching per image
and class (each ground truth used once, best IoU wins), 101-point
interpolated precision-recall integration, averaged over the IoU
thresholds 0.5:0.05:0.95 and then over the classes present in the ground
truth. The F-score metric reuses the same matches at a fixed score floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union > 0 else 0.0


def box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[2], b[2])
    y1 = min(a[3], b[3])
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def cxcywh_to_xyxy(box) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dtype=np.float64)


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int):
    """Per-class IoU and their mean; background label == num_classes is
    excluded, as are classes absent from both rasters."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    per_class = {}
    for c in range(num_classes):
        p = pred_labels == c
        g = gt_labels == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        per_class[c] = float(np.logical_and(p, g).sum() / union)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


class SemanticAccumulator:
    """Aggregates intersections and unions across a whole split."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def add_image(self, pred_labels: np.ndarray, gt_labels: np.ndarray) -> None:
        if pred_labels.shape != gt_labels.shape:
            raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
        for c in range(self.num_classes):
            p = pred_labels == c
            g = gt_labels == c
            self.inter[c] += np.logical_and(p, g).sum()
            self.union[c] += np.logical_or(p, g).sum()

    def result(self):
        per_class = {
            c: float(self.inter[c] / self.union[c])
            for c in range(self.num_classes)
            if self.union[c] > 0
        }
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return per_class, mean


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from per-detection TP flags."""
    if num_gt == 0:
        return 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope, then sample the 101 recall points
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / len(RECALL_POINTS))


class DetectionEvaluator:
    """Greedy-matched detection scoring over images, per class.

    mode selects mask IoU or box IoU. Detections need class_index, score
    and (mask | bbox); ground truths need class_index and the same geometry.
    """

    def __init__(self, num_classes: int, mode: str = "mask", thresholds=IOU_THRESHOLDS):
        if mode not in ("mask", "box"):
            raise ValueError(f"unknown mode '{mode}'")
        self.num_classes = num_classes
        self.mode = mode
        self.thresholds = tuple(thresholds)
        self.records: dict[int, list[tuple[float, np.ndarray]]] = {c: [] for c in range(num_classes)}
        self.num_gt = np.zeros(num_classes, dtype=np.int64)

    def _iou(self, det, gt) -> float:
        if self.mode == "mask":
            return mask_iou(det.mask, gt.mask)
        return box_iou_xyxy(cxcywh_to_xyxy(det.bbox), cxcywh_to_xyxy(gt.bbox))

    def add_image(self, detections, ground_truths) -> None:
        for c in range(self.num_classes):
            dets = sorted(
                (d for d in detections if d.class_index == c), key=lambda d: -d.score
            )
            gts = [g for g in ground_truths if g.class_index == c]
            self.num_gt[c] += len(gts)
            if not dets:
                continue
            iou = np.array([[self._iou(d, g) for g in gts] for d in dets], dtype=np.float64)
            for d_idx, det in enumerate(dets):
                flags = np.zeros(len(self.thresholds), dtype=bool)
                self.records[c].append((det.score, flags))
            for t_idx, t in enumerate(self.thresholds):
                used = np.zeros(len(gts), dtype=bool)
                for d_idx in range(len(dets)):
                    best_g, best_iou = -1, t
                    for g_idx in range(len(gts)):
                        if used[g_idx]:
                            continue
                        if iou[d_idx, g_idx] >= best_iou and (
                            best_g == -1 or iou[d_idx, g_idx] > best_iou
                        ):
                            best_g, best_iou = g_idx, iou[d_idx, g_idx]
                    if best_g >= 0:
                        used[best_g] = True
                        self.records[c][-len(dets) + d_idx][1][t_idx] = True

    def classes_with_gt(self) -> list[int]:
        return [c for c in range(self.num_classes) if self.num_gt[c] > 0]

    def average_precision(self):
        """Per-class AP per threshold, plus mAP / AP50 / AP75 aggregates."""
        per_class = {}
        for c in self.classes_with_gt():
            scores = np.array([s for s, _ in self.records[c]], dtype=np.float64)
            flags = (
                np.stack([f for _, f in self.records[c]])
                if self.records[c]
                else np.zeros((0, len(self.thresholds)), dtype=bool)
            )
            ap = np.array(
                [
                    interpolated_ap(scores, flags[:, t_idx], int(self.num_gt[c]))
                    for t_idx in range(len(self.thresholds))
                ]
            )
            per_class[c] = ap
        if per_class:
            stacked = np.stack(list(per_class.values()))
            mean_ap = float(stacked.mean())
            ap50 = float(stacked[:, self.thresholds.index(0.5)].mean()) if 0.5 in self.thresholds else 0.0
            ap75 = float(stacked[:, self.thresholds.index(0.75)].mean()) if 0.75 in self.thresholds else 0.0
        else:
            mean_ap = ap50 = ap75 = 0.0
        return per_class, {"mAP": mean_ap, "AP50": ap50, "AP75": ap75}

    def mean_f_score(self, score_floor: float = 0.0):
        """Per-class F per threshold at the score floor, plus the mean.

        Greedy matching processes detections in score order, so restricting
        to scores >= floor keeps the prefix of the same matching.
        """
        per_class = {}
        counts = {t: {"tp": 0, "fp": 0, "fn": 0} for t in self.thresholds}
        for c in self.classes_with_gt():
            kept = [(s, f) for s, f in self.records[c] if s >= score_floor]
            f_per_t = np.zeros(len(self.thresholds))
            for t_idx, t in enumerate(self.thresholds):
                tp = sum(1 for _, f in kept if f[t_idx])
                fp = len(kept) - tp
                fn = int(self.num_gt[c]) - tp
                counts[t]["tp"] += tp
                counts[t]["fp"] += fp
                counts[t]["fn"] += fn
                precision = tp / (tp + fp) if tp + fp > 0 else 0.0
                recall = tp / (tp + fn) if tp + fn > 0 else 0.0
                f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
                f_per_t[t_idx] = f
            per_class[c] = f_per_t
        if per_class:
            maf = float(np.stack(list(per_class.values())).mean())
        else:
            maf = 0.0
        return per_class, maf, counts


@dataclass
class MetricReport:
    """Per-dataset metric table plus per-class breakdown."""

    dataset: str
    class_names: list[str]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregates: dict[str, float] = field(default_factory=dict)
    counts: dict[float, dict[str, int]] = field(default_factory=dict)

    COLUMNS = ("AP50", "AP75", "mAP", "mAP_b", "mAF", "mIoU")

    def to_text(self) -> str:
        lines = [f"dataset {self.dataset}"]
        header = "\t".join(("class",) + self.COLUMNS)
        lines.append(header)
        agg = "\t".join(
            ["<all>"] + [f"{self.aggregates.get(col, 0.0):.4f}" for col in self.COLUMNS]
        )
        lines.append(agg)
        for name in self.class_names:
            row = self.per_class.get(name, {})
            lines.append(
                "\t".join(
                    [name]
                    + [f"{row.get(col, float('nan')):.4f}" if col in row else "-" for col in self.COLUMNS]
                )
            )
        for t, c in sorted(self.counts.items()):
            lines.append(f"counts iou={t:.2f} tp={c['tp']} fp={c['fp']} fn={c['fn']}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> "MetricReport":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        dataset = lines[0].split(" ", 1)[1]
        cols = lines[1].split("\t")[1:]
        agg_vals = lines[2].split("\t")[1:]
        aggregates = {c: float(v) for c, v in zip(cols, agg_vals)}
        per_class = {}
        class_names = []
        counts = {}
        for ln in lines[3:]:
            if ln.startswith("counts "):
                toks = dict(tok.split("=") for tok in ln.split()[1:])
                counts[float(toks["iou"])] = {
                    "tp": int(toks["tp"]),
                    "fp": int(toks["fp"]),
                    "fn": int(toks["fn"]),
                }
                continue
            parts = ln.split("\t")
            class_names.append(parts[0])
            per_class[parts[0]] = {
                c: float(v) for c, v in zip(cols, parts[1:]) if v not in ("-",)
            }
        return MetricReport(
            dataset=dataset,
            class_names=class_names,
            per_class=per_class,
            aggregates=aggregates,
            counts=counts,
        )


def build_report(
    dataset: str,
    class_names: list[str],
    mask_eval: DetectionEvaluator,
    box_eval: DetectionEvaluator,
    semantic: SemanticAccumulator,
    score_floor: float = 0.0,
) -> MetricReport:
    ap_mask, agg_mask = mask_eval.average_precision()
    ap_box, agg_box = box_eval.average_precision()
    f_per_class, maf, counts = mask_eval.mean_f_score(score_floor)
    iou_per_class, mean_iou = semantic.result()

    per_class: dict[str, dict[str, float]] = {}
    for c, name in enumerate(class_names):
        row: dict[str, float] = {}
        if c in ap_mask:
            row["mAP"] = float(ap_mask[c].mean())
            if 0.5 in mask_eval.thresholds:
                row["AP50"] = float(ap_mask[c][mask_eval.thresholds.index(0.5)])
            if 0.75 in mask_eval.thresholds:
                row["AP75"] = float(ap_mask[c][mask_eval.thresholds.index(0.75)])
        if c in ap_box:
            row["mAP_b"] = float(ap_box[c].mean())
        if c in f_per_class:
            row["mAF"] = float(f_per_class[c].mean())
        if c in iou_per_class:
            row["mIoU"] = iou_per_class[c]
        per_class[name] = row

    aggregates = {
        "AP50": agg_mask["AP50"],
        "AP75": agg_mask["AP75"],
        "mAP": agg_mask["mAP"],
        "mAP_b": agg_box["mAP"],
        "mAF": maf,
        "mIoU": mean_iou,
    }
    return MetricReport(
        dataset=dataset,
        class_names=list(class_names),
        per_class=per_class,
        aggregates=aggregates,
        counts=counts,
    )
