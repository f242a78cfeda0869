"""Heterogeneous mixed-corpus training.

Datasets are sampled with probability proportional to the square root of
their class count, task groups activate on a curriculum schedule, crops
keep masks, boxes and the semantic map consistent, and the optimizer is
decoupled-weight-decay Adam with linear warmup into cosine decay.

All randomness is a pure function of (seed, iteration), so a resumed run
continues bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .datamodel import (
    TASK_GROUPS,
    CorpusDataset,
    InstanceAnnotation,
    SegSample,
    tight_bbox,
)
from .losses import LossWeights, targets_from_sample, total_loss
from .model import ModelConfig, SegmentationModel, build_model


class TrainingAborted(RuntimeError):
    """Raised when the loss stops being finite; carries the batch identity."""

    def __init__(self, iteration, batch_ids):
        super().__init__(f"non-finite loss at iteration {iteration}; batch {batch_ids}")
        self.iteration = iteration
        self.batch_ids = batch_ids


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    base_lr: float = 2e-4  # desk-scale default; the reference protocol uses 4e-5
    weight_decay: float = 0.05
    warmup_iterations: int = 100
    crop_size: int = 256
    short_side_range: tuple[int, int] = (288, 352)
    whole_resize_prob: float = 0.2
    curriculum: list[tuple[int, str]] = field(default_factory=list)  # (iteration, task_group)
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_interval: int = 500
    num_points: int = 4096
    split: str = "train"

    def __post_init__(self):
        lo, hi = self.short_side_range
        if self.crop_size > lo:
            raise ValueError(f"crop_size {self.crop_size} exceeds shortest side {lo}")
        if not 0.0 <= self.whole_resize_prob <= 1.0:
            raise ValueError("whole_resize_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["short_side_range"] = list(self.short_side_range)
        d["curriculum"] = [[int(i), g] for i, g in self.curriculum]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "short_side_range" in d:
            d["short_side_range"] = tuple(d["short_side_range"])
        if "curriculum" in d:
            d["curriculum"] = [(int(i), g) for i, g in d["curriculum"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def dataset_probabilities(class_counts: list[int], active: list[bool]) -> np.ndarray:
    """p_i proportional to sqrt(class count), zero for inactive datasets."""
    if not any(active):
        raise ValueError("no active datasets to sample from")
    weights = np.array(
        [math.sqrt(c) if a else 0.0 for c, a in zip(class_counts, active)], dtype=np.float64
    )
    return weights / weights.sum()


class CorpusSampler:
    """Draws (dataset, sample) slots; a pure function of (seed, iteration)."""

    def __init__(self, datasets: list[CorpusDataset], split: str, seed: int):
        self.datasets = datasets
        self.split = split
        self.seed = seed
        self.active_groups: set[str] = set()
        for ds in datasets:
            if not ds.sample_ids(split):
                raise ValueError(f"dataset {ds.spec.name} has empty split '{split}'")

    def activate(self, groups: set[str]) -> None:
        self.active_groups = set(groups)

    def probabilities(self) -> np.ndarray:
        active = [ds.spec.task_group in self.active_groups for ds in self.datasets]
        return dataset_probabilities([ds.spec.num_classes for ds in self.datasets], active)

    def sample_batch(self, iteration: int, batch_size: int) -> list[tuple[int, str]]:
        probs = self.probabilities()
        rng = np.random.default_rng([self.seed, iteration])
        out = []
        for _ in range(batch_size):
            d = int(rng.choice(len(self.datasets), p=probs))
            ids = self.datasets[d].sample_ids(self.split)
            out.append((d, ids[int(rng.integers(0, len(ids)))]))
        return out


# ---------------------------------------------------------------------------
# Crop augmentation
# ---------------------------------------------------------------------------


def _nearest_index(target: int, source: int) -> np.ndarray:
    return np.minimum(((np.arange(target) + 0.5) * source / target).astype(np.int64), source - 1)


def _resize_sample(sample: SegSample, size: tuple[int, int]) -> SegSample:
    """Bilinear image resize; one shared nearest map for all label rasters."""
    h, w = sample.image.shape[:2]
    th, tw = size
    img = torch.from_numpy(sample.image).permute(2, 0, 1).unsqueeze(0)
    image = (
        torch.nn.functional.interpolate(img, size=size, mode="bilinear", align_corners=False)[0]
        .permute(1, 2, 0)
        .numpy()
    )
    iy = _nearest_index(th, h)
    ix = _nearest_index(tw, w)
    semantic = sample.semantic.labels[np.ix_(iy, ix)]
    instances = []
    for inst in sample.instances:
        mask = inst.mask[np.ix_(iy, ix)]
        if not mask.any():
            continue
        instances.append(InstanceAnnotation(inst.class_index, mask, tight_bbox(mask)))
    from .datamodel import SemanticMap

    return SegSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        instances=instances,
        semantic=SemanticMap(labels=semantic),
        dataset=sample.dataset,
    )


def _crop_sample(sample: SegSample, y0: int, x0: int, size: int) -> SegSample:
    from .datamodel import SemanticMap

    sl = (slice(y0, y0 + size), slice(x0, x0 + size))
    instances = []
    for inst in sample.instances:
        mask = inst.mask[sl]
        if not mask.any():
            continue
        instances.append(InstanceAnnotation(inst.class_index, mask, tight_bbox(mask)))
    return SegSample(
        image=np.ascontiguousarray(sample.image[sl]),
        instances=instances,
        semantic=SemanticMap(labels=np.ascontiguousarray(sample.semantic.labels[sl])),
        dataset=sample.dataset,
    )


def crop_augment(sample: SegSample, config: TrainConfig, rng: np.random.Generator) -> SegSample:
    """Whole-image squash with probability whole_resize_prob, else
    scale-shorter-side-then-random-crop. Geometry stays consistent."""
    size = config.crop_size
    if rng.random() < config.whole_resize_prob:
        return _resize_sample(sample, (size, size))
    h, w = sample.image.shape[:2]
    lo, hi = config.short_side_range
    short = int(rng.integers(lo, hi + 1))
    scale = short / min(h, w)
    th, tw = max(size, int(round(h * scale))), max(size, int(round(w * scale)))
    scaled = _resize_sample(sample, (th, tw))
    y0 = int(rng.integers(0, th - size + 1))
    x0 = int(rng.integers(0, tw - size + 1))
    return _crop_sample(scaled, y0, x0, size)


# ---------------------------------------------------------------------------
# Schedules and the loop
# ---------------------------------------------------------------------------


def active_groups_at(curriculum: list[tuple[int, str]], iteration: int) -> set[str]:
    return {g for start, g in curriculum if start <= iteration}


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    """Linear warmup into cosine annealing toward zero."""
    warm = min(config.warmup_iterations, config.iterations)
    if iteration < warm:
        return config.base_lr * (iteration + 1) / warm
    span = max(config.iterations - warm, 1)
    progress = (iteration - warm) / span
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_curriculum(datasets: list[CorpusDataset]) -> list[tuple[int, str]]:
    groups = sorted(
        {ds.spec.task_group for ds in datasets}, key=lambda g: TASK_GROUPS.index(g)
    )
    return [(0, g) for g in groups]


def validate_curriculum(curriculum: list[tuple[int, str]], datasets: list[CorpusDataset]) -> None:
    known = {ds.spec.task_group for ds in datasets}
    for start, group in curriculum:
        if group not in TASK_GROUPS:
            raise ValueError(f"curriculum names unknown task group '{group}'")
        if group not in known:
            raise ValueError(f"curriculum group '{group}' matches no dataset in the corpus")
    if not any(start == 0 for start, _ in curriculum):
        raise ValueError("curriculum must activate at least one group at iteration 0")


@dataclass
class TrainState:
    model: SegmentationModel
    optimizer: torch.optim.AdamW
    iteration: int = 0


def make_optimizer(model: SegmentationModel, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay
    )


def format_log_line(iteration, lr, report, groups, batch_ids) -> str:
    terms = " ".join(
        f"{k}={report[k]:.4f}" for k in ("total", "semantic", "instance", "box", "class")
    )
    ids = ",".join(f"{d}:{s}" for d, s in batch_ids)
    return f"iter={iteration} lr={lr:.6e} {terms} groups={'|'.join(sorted(groups))} batch={ids}"


def train_step(
    state: TrainState,
    datasets: list[CorpusDataset],
    sampler: CorpusSampler,
    config: TrainConfig,
    weights: LossWeights,
) -> tuple[dict, list[tuple[int, str]], set[str]]:
    """One optimization step; returns (loss report, batch ids, active groups)."""
    it = state.iteration
    groups = active_groups_at(config.curriculum, it)
    sampler.activate(groups)
    batch_ids = sampler.sample_batch(it, config.batch_size)

    lr = learning_rate_at(config, it)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.model.train()
    state.optimizer.zero_grad()
    reports = []
    loss_sum = None

    # slots from the same dataset share one batched forward
    slot_targets = {}
    slot_images = {}
    groups_by_dataset: dict[int, list[int]] = {}
    for slot, (d_idx, sample_id) in enumerate(batch_ids):
        sample = datasets[d_idx].load(config.split, sample_id)
        aug_rng = np.random.default_rng([config.seed, it, slot])
        sample = crop_augment(sample, config, aug_rng)
        slot_targets[slot] = targets_from_sample(sample)
        slot_images[slot] = torch.from_numpy(sample.image).permute(2, 0, 1)
        groups_by_dataset.setdefault(d_idx, []).append(slot)

    for d_idx, slots in groups_by_dataset.items():
        ds = datasets[d_idx]
        images = torch.stack([slot_images[s] for s in slots])
        min_active = max(slot_targets[s].masks.shape[0] for s in slots)
        outputs = state.model(images, list(ds.spec.class_names), min_active=min_active)
        for row, slot in enumerate(slots):
            preds = [_select_predictions(p, row) for p in outputs.predictions]
            active = [a[row] for a in outputs.active]
            loss_rng = torch.Generator().manual_seed(
                int(np.random.default_rng([config.seed, it, slot, 7]).integers(0, 2**62))
            )
            loss, report = total_loss(
                preds,
                slot_targets[slot],
                weights,
                active=active,
                rng=loss_rng,
                num_points=config.num_points,
            )
            reports.append(report)
            loss_sum = loss if loss_sum is None else loss_sum + loss

    loss_mean = loss_sum / len(batch_ids)
    if not torch.isfinite(loss_mean):
        raise TrainingAborted(it, batch_ids)
    loss_mean.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.iteration += 1

    merged = {
        k: float(np.mean([r[k] for r in reports]))
        for k in ("total", "semantic", "instance", "box", "class")
    }
    merged["lr"] = lr
    return merged, batch_ids, groups


def _select_predictions(pred, row: int):
    from .heads import PredictionSet

    return PredictionSet(
        semantic_logits=pred.semantic_logits[row],
        instance_logits=pred.instance_logits[row],
        class_logits=pred.class_logits[row],
        boxes=pred.boxes[row],
        spatial_shape=pred.spatial_shape,
    )


def train(
    datasets: list[CorpusDataset],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Path | None = None,
    weights: LossWeights | None = None,
    resume_from: Path | None = None,
    log_hook=None,
) -> TrainState:
    """Run the loop; logs one structured line per iteration.

    With out_dir set, checkpoints land there every checkpoint_interval
    iterations plus at the end, and the log appends to train_log.txt.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    weights = weights or LossWeights()
    if not config.curriculum:
        config.curriculum = default_curriculum(datasets)
    validate_curriculum(config.curriculum, datasets)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = ckpt.build_model()
        optimizer = make_optimizer(model, config)
        ckpt.load_optimizer(optimizer)
        state = TrainState(model=model, optimizer=optimizer, iteration=ckpt.iteration)
    else:
        model = build_model(model_config)
        state = TrainState(model=model, optimizer=make_optimizer(model, config))

    sampler = CorpusSampler(datasets, config.split, config.seed)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.txt"

    while state.iteration < config.iterations:
        try:
            report, batch_ids, groups = train_step(state, datasets, sampler, config, weights)
        except TrainingAborted as abort:
            if log_path is not None:
                ids = ",".join(f"{d}:{s}" for d, s in abort.batch_ids)
                with log_path.open("a") as f:
                    f.write(f"iter={abort.iteration} ABORT non-finite loss batch={ids}\n")
            raise
        line = format_log_line(state.iteration - 1, report["lr"], report, groups, batch_ids)
        if log_path is not None:
            with log_path.open("a") as f:
                f.write(line + "\n")
        if log_hook is not None:
            log_hook(state.iteration - 1, report)
        if out_dir is not None and (
            state.iteration % config.checkpoint_interval == 0
            or state.iteration == config.iterations
        ):
            save_checkpoint(
                out_dir / "checkpoint_latest.ckpt",
                state.model,
                state.optimizer,
                state.iteration,
                model_config,
                config,
            )

    if out_dir is not None:
        save_checkpoint(
            out_dir / "checkpoint_latest.ckpt",
            state.model,
            state.optimizer,
            state.iteration,
            model_config,
            config,
        )
    return state
