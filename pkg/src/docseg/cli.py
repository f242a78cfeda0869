"""Command-line surface: synth, train, eval, predict.

Exit codes: 0 success, 2 usage or config error, 3 runtime failure.
Option precedence is flags > config file > defaults; the resolved
configuration is echoed into the run manifest for provenance.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .checkpoint import CheckpointError, load_checkpoint
from .datamodel import CorpusError, encode_binary_rle, encode_label_rle, load_corpus
from .inference import InferenceConfig, predict
from .model import ModelConfig
from .synth import RecipeError, default_recipe, generate_synthetic_corpus, parse_recipe
from .training import TrainConfig, TrainingAborted, train
from .evaluation import evaluate_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

OVERLAY_PALETTE = [
    (220, 60, 60),
    (60, 90, 220),
    (50, 170, 60),
    (220, 170, 40),
    (160, 60, 200),
    (40, 180, 180),
    (230, 110, 40),
    (130, 130, 130),
]


class UsageError(Exception):
    pass


def parse_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        if not value.strip():
            raise UsageError(f"{path}:{lineno}: key '{key}' has no value")
        values[key] = value.strip()
    return values


_MODEL_KEYS = {
    "channels": int,
    "num_heads": int,
    "instance_queries": int,
    "decoder_layers": int,
    "max_threshold": float,
    "query_selection": lambda s: s.lower() in ("1", "true", "yes"),
    "query_interaction": lambda s: s.lower() in ("1", "true", "yes"),
    "ffn_ratio": int,
    "embedder": str,
}

_TRAIN_KEYS = {
    "iterations": int,
    "batch_size": int,
    "base_lr": float,
    "weight_decay": float,
    "warmup_iterations": int,
    "crop_size": int,
    "whole_resize_prob": float,
    "grad_clip": float,
    "checkpoint_interval": int,
    "num_points": int,
    "split": str,
}

_INFER_KEYS = {
    "whole_size": int,
    "patch_size": int,
    "patch_short_side": int,
    "overlap": int,
    "boundary_margin": int,
    "boundary_factor": float,
    "score_floor": float,
    "nms_iou": float,
    "mask_threshold": float,
    "use_patches": lambda s: s.lower() in ("1", "true", "yes"),
}


def _apply_keys(values: dict[str, str], schema: dict, out: dict) -> None:
    for key, conv in schema.items():
        if key in values:
            try:
                out[key] = conv(values[key])
            except ValueError:
                raise UsageError(f"config key '{key}': cannot parse '{values[key]}'")


def build_configs(values: dict[str, str], seed: int | None):
    known = set(_MODEL_KEYS) | set(_TRAIN_KEYS) | set(_INFER_KEYS) | {
        "short_side_range",
        "curriculum",
        "seed",
    }
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    infer_kwargs: dict = {}
    _apply_keys(values, _MODEL_KEYS, model_kwargs)
    _apply_keys(values, _TRAIN_KEYS, train_kwargs)
    _apply_keys(values, _INFER_KEYS, infer_kwargs)
    if "short_side_range" in values:
        try:
            lo, hi = (int(t) for t in values["short_side_range"].split())
        except ValueError:
            raise UsageError("config key 'short_side_range': expected two integers")
        train_kwargs["short_side_range"] = (lo, hi)
    if "curriculum" in values:
        entries = []
        for tok in values["curriculum"].split(","):
            start, _, group = tok.strip().partition(":")
            try:
                entries.append((int(start), group.strip()))
            except ValueError:
                raise UsageError(f"config key 'curriculum': bad entry '{tok}'")
        train_kwargs["curriculum"] = entries
    if seed is None and "seed" in values:
        try:
            seed = int(values["seed"])
        except ValueError:
            raise UsageError(f"config key 'seed': cannot parse '{values['seed']}'")
    if seed is not None:
        model_kwargs["seed"] = seed
        train_kwargs["seed"] = seed
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs), InferenceConfig(**infer_kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad configuration: {e}")


def _set_deterministic(enabled: bool) -> None:
    if enabled:
        torch.use_deterministic_algorithms(True)


def _write_run_manifest(out_dir: Path, command: str, values: dict, artifacts: list[str]) -> None:
    lines = [f"command {command}"]
    for key in sorted(values):
        lines.append(f"config {key} {values[key]}")
    for a in artifacts:
        lines.append(f"artifact {a}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.recipe is not None:
        recipe_path = Path(args.recipe)
        if not recipe_path.exists():
            raise UsageError(f"recipe file {recipe_path} not found")
        recipe = parse_recipe(recipe_path.read_text())
    else:
        recipe = default_recipe()
    out = Path(args.out)
    generate_synthetic_corpus(args.seed, recipe, out)
    print(f"corpus written to {out}")
    for ds in recipe.datasets:
        counts = " ".join(f"{s}={n}" for s, n in sorted(ds.split_sizes.items()))
        print(f"dataset {ds.name} group={ds.task_group} classes={'|'.join(ds.class_names)} {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    if args.iterations is not None:
        values["iterations"] = str(args.iterations)
    model_config, train_config, _ = build_configs(values, args.seed)
    _set_deterministic(args.deterministic)
    datasets = load_corpus(Path(args.corpus))
    if not datasets:
        raise UsageError(f"corpus {args.corpus} contains no datasets")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume = out_dir / "checkpoint_latest.ckpt"
    resume_from = resume if resume.exists() else None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model_config = ckpt.model_config
        print(f"resuming from iteration {ckpt.iteration}")
    try:
        state = train(
            datasets, model_config, train_config, out_dir=out_dir, resume_from=resume_from
        )
    except ValueError as e:
        raise UsageError(str(e))
    _write_run_manifest(
        out_dir,
        "train",
        {**values, "seed": train_config.seed},
        ["checkpoint_latest.ckpt", "train_log.txt"],
    )
    print(f"trained to iteration {state.iteration}; checkpoint in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    _, _, infer_config = build_configs(values, args.seed)
    _set_deterministic(args.deterministic)
    ckpt = load_checkpoint(Path(args.checkpoint))
    model = ckpt.build_model().eval()
    if ckpt.train_config_dict and "whole_size" not in values:
        infer_config.whole_size = int(ckpt.train_config_dict.get("crop_size", infer_config.whole_size))
    datasets = load_corpus(Path(args.corpus))
    if not datasets:
        raise UsageError(f"corpus {args.corpus} contains no datasets")
    for ds in datasets:
        if args.split not in ds.split_ids:
            raise UsageError(f"dataset '{ds.spec.name}' has no split '{args.split}'")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    columns = ("AP50", "AP75", "mAP", "mAP_b", "mAF", "mIoU")
    print("\t".join(("dataset",) + columns))
    for ds in datasets:
        report = evaluate_dataset(model, ds, args.split, infer_config)
        fname = f"report_{ds.spec.name}.txt"
        (out_dir / fname).write_text(report.to_text())
        artifacts.append(fname)
        print(
            "\t".join(
                [ds.spec.name] + [f"{report.aggregates[c]:.4f}" for c in columns]
            )
        )
    _write_run_manifest(out_dir, "eval", {**values, "split": args.split}, artifacts)
    return EXIT_OK


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def format_prediction_file(
    class_names: list[str], detections, semantic: np.ndarray, image_shape
) -> str:
    h, w = image_shape
    lines = [f"size {h} {w}", "classes " + " | ".join(class_names), f"ninstances {len(detections)}"]
    for det in detections:
        box = " ".join(f"{v:.6f}" for v in det.bbox)
        counts = " ".join(str(c) for c in encode_binary_rle(det.mask))
        name = class_names[det.class_index]
        lines.append(f"instance {det.class_index} {det.score:.6f} {box} {name} | {counts}")
    pairs = " ".join(f"{v}:{c}" for v, c in encode_label_rle(semantic))
    lines.append(f"semantic | {pairs}")
    return "\n".join(lines) + "\n"


def render_overlay(image: np.ndarray, detections, class_names: list[str]) -> Image.Image:
    h, w = image.shape[:2]
    base = Image.fromarray((image * 255).astype(np.uint8), mode="RGB").convert("RGBA")
    tint = Image.new("RGBA", (w, h), (0, 0, 0, 0))
    draw = ImageDraw.Draw(tint)
    for det in detections:
        color = OVERLAY_PALETTE[det.class_index % len(OVERLAY_PALETTE)]
        mask_img = Image.fromarray((det.mask * 120).astype(np.uint8), mode="L")
        solid = Image.new("RGBA", (w, h), color + (0,))
        solid.putalpha(mask_img)
        tint = Image.alpha_composite(tint, solid)
    out = Image.alpha_composite(base, tint)
    draw = ImageDraw.Draw(out)
    for det in detections:
        color = OVERLAY_PALETTE[det.class_index % len(OVERLAY_PALETTE)]
        cx, cy, bw, bh = det.bbox
        x0, y0 = (cx - bw / 2) * w, (cy - bh / 2) * h
        x1, y1 = (cx + bw / 2) * w, (cy + bh / 2) * h
        draw.rectangle([x0, y0, x1, y1], outline=color + (255,), width=2)
        label = f"{class_names[det.class_index]} {det.score:.2f}"
        draw.text((x0 + 2, max(0, y0 - 12)), label, fill=color + (255,))
    return out.convert("RGB")


def cmd_predict(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    _, _, infer_config = build_configs(values, args.seed)
    _set_deterministic(args.deterministic)
    if not args.classes:
        raise UsageError("at least one class name is required")
    ckpt = load_checkpoint(Path(args.checkpoint))
    model = ckpt.build_model().eval()
    if ckpt.train_config_dict and "whole_size" not in values:
        infer_config.whole_size = int(ckpt.train_config_dict.get("crop_size", infer_config.whole_size))
    image_path = Path(args.image)
    if not image_path.exists():
        raise UsageError(f"image {image_path} not found")
    try:
        image = _load_image(image_path)
    except Exception as e:
        raise UsageError(f"cannot load image {image_path}: {e}")
    detections, semantic = predict(model, image, list(args.classes), infer_config)
    h, w = image.shape[:2]
    iy = np.minimum(((np.arange(h) + 0.5) * semantic.shape[0] / h).astype(np.int64), semantic.shape[0] - 1)
    ix = np.minimum(((np.arange(w) + 0.5) * semantic.shape[1] / w).astype(np.int64), semantic.shape[1] - 1)
    semantic_full = semantic[np.ix_(iy, ix)]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(
        format_prediction_file(list(args.classes), detections, semantic_full, (h, w))
    )
    print(f"{len(detections)} instances -> {out_path}")
    if args.overlay:
        render_overlay(image, detections, list(args.classes)).save(args.overlay)
        print(f"overlay -> {args.overlay}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docseg", description="Unified document image segmentation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--recipe", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_synth, default_seed=0)

    p = sub.add_parser("train", help="train on a corpus")
    common(p)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--split", type=str, default="val")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--classes", type=str, nargs="+", required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--overlay", type=str, default=None)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.seed is None:
        args.seed = getattr(args, "default_seed", None)
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, RecipeError, CorpusError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
