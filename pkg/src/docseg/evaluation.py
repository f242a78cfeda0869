"""Dataset evaluation: run inference over a split and score it."""

from __future__ import annotations

import numpy as np

from .datamodel import CorpusDataset
from .inference import InferenceConfig, predict
from .metrics import DetectionEvaluator, MetricReport, SemanticAccumulator, build_report


def _resize_labels(labels: np.ndarray, size: tuple[int, int], background: int) -> np.ndarray:
    if labels.shape == tuple(size):
        return labels
    h, w = labels.shape
    th, tw = size
    iy = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    ix = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return labels[np.ix_(iy, ix)]


def evaluate_dataset(
    model, dataset: CorpusDataset, split: str, cfg: InferenceConfig | None = None
) -> MetricReport:
    """Predict every sample of a split and assemble its metric report."""
    cfg = cfg or InferenceConfig()
    names = list(dataset.spec.class_names)
    m = len(names)
    mask_eval = DetectionEvaluator(num_classes=m, mode="mask")
    box_eval = DetectionEvaluator(num_classes=m, mode="box")
    semantic = SemanticAccumulator(m)
    for sample_id in dataset.sample_ids(split):
        sample = dataset.load(split, sample_id)
        detections, pred_semantic = predict(model, sample.image, names, cfg)
        mask_eval.add_image(detections, sample.instances)
        box_eval.add_image(detections, sample.instances)
        pred_labels = _resize_labels(
            pred_semantic, sample.semantic.labels.shape, dataset.spec.background_label
        )
        semantic.add_image(pred_labels, sample.semantic.labels)
    return build_report(
        dataset.spec.name, names, mask_eval, box_eval, semantic, score_floor=cfg.score_floor
    )
