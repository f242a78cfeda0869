"""Evaluate a checkpoint: per-dataset mAP / mAP_b / mAF / mIoU tables.

Run demos/02_train_tiny.py first (or point at any checkpoint). A
20-iteration model scores near zero; the point here is the report shape.
"""

from pathlib import Path

from docseg.checkpoint import load_checkpoint
from docseg.datamodel import load_corpus
from docseg.evaluation import evaluate_dataset
from docseg.inference import InferenceConfig

ckpt_path = Path("runs/demo_model/checkpoint_latest.ckpt")
ckpt = load_checkpoint(ckpt_path)
model = ckpt.build_model().eval()
print(f"loaded {ckpt_path} at iteration {ckpt.iteration}")

cfg = InferenceConfig(whole_size=256, score_floor=0.3)
for ds in load_corpus("runs/demo_corpus"):
    report = evaluate_dataset(model, ds, "val", cfg)
    print()
    print(report.to_text())
