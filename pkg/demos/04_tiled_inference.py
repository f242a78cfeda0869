"""Sliding-window inference: tiles, boundary down-weighting, mask NMS.

Demonstrated with a brightness-threshold stand-in for the model so the
geometry is visible without training: the "object" is a bright rectangle
spanning two tiles, so it appears fragmented in both patch outputs, gets
its confidence halved where it touches an interior tile border, and the
merge step collapses the duplicates.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from docseg.decoder import DecoderOutputs
from docseg.heads import PredictionSet
from docseg.inference import InferenceConfig, build_tile_grid, merge_and_nms, predict_patches, predict_whole


class BrightnessModel(nn.Module):
    """Detects bright pixels as a single instance; stands in for a trained net."""

    def forward(self, images, class_names, min_active=0):
        b, _, h, w = images.shape
        bright = (images.mean(dim=1, keepdim=True) > 0.5).float()
        logits = (F.avg_pool2d(bright, 4)[:, 0] - 0.5) * 40.0
        inst = logits.flatten(1).unsqueeze(1)
        m = len(class_names)
        cls = torch.full((b, 1, m + 1), -8.0)
        cls[:, :, 0] = 8.0
        preds = PredictionSet(
            semantic_logits=inst.expand(b, m, -1).clone(),
            instance_logits=inst,
            class_logits=cls,
            boxes=torch.full((b, 1, 4), 0.5),
            spatial_shape=(h // 4, w // 4),
        )
        return DecoderOutputs([preds], [torch.ones(b, 1, dtype=torch.bool)], [])


image = np.full((256, 256, 3), 0.1, dtype=np.float32)
image[100:140, 40:220] = 0.9  # wide bar crossing tile borders

model = BrightnessModel()
cfg = InferenceConfig(whole_size=256, patch_size=128, patch_short_side=256, overlap=32)

whole, semantic = predict_whole(model, image, ["bar"], cfg)
print(f"whole-image pass: {len(whole)} detections, semantic map {semantic.shape}")

grid = build_tile_grid((256, 256), cfg.patch_size, cfg.overlap)
print(f"tile grid: patch={grid.patch_size} stride={grid.stride} offsets={grid.offsets}")

patches = predict_patches(model, image, ["bar"], grid, cfg)
for d in patches:
    print(f"  {d.source:14s} score={d.score:.3f} area={d.area}")

merged = merge_and_nms(whole, patches, cfg.nms_iou)
print(f"after merge + NMS: {len(merged)} detections "
      f"(sources: {sorted({d.source for d in merged})})")
