"""Train a tiny model for a handful of iterations and watch the losses.

Uses a reduced model so the loop runs in about a minute; see
configs/desk.txt for the full desk-scale settings.
"""

from pathlib import Path

from docseg.datamodel import load_corpus
from docseg.model import ModelConfig
from docseg.synth import default_recipe, generate_synthetic_corpus
from docseg.training import TrainConfig, train

corpus = Path("runs/demo_corpus")
if not corpus.exists():
    generate_synthetic_corpus(seed=7, recipe=default_recipe(), out_dir=corpus)
datasets = load_corpus(corpus)

model_config = ModelConfig(channels=32, num_heads=4, instance_queries=16, decoder_layers=2, seed=0)
train_config = TrainConfig(
    iterations=20,
    batch_size=2,
    base_lr=2e-4,
    warmup_iterations=5,
    crop_size=256,
    short_side_range=(288, 352),
    seed=0,
    checkpoint_interval=20,
)

state = train(
    datasets,
    model_config,
    train_config,
    out_dir=Path("runs/demo_model"),
    log_hook=lambda it, rep: print(
        f"iter {it:3d}  total={rep['total']:7.3f}  semantic={rep['semantic']:.3f}  "
        f"instance={rep['instance']:.3f}  box={rep['box']:.3f}  class={rep['class']:.3f}"
    ),
)
print(f"\ncheckpoint + per-iteration log under runs/demo_model/ (iteration {state.iteration})")
print("curriculum: task groups activate on the schedule in TrainConfig.curriculum;")
print("dataset draws are proportional to sqrt(class count) within active groups.")
