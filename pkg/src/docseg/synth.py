"""Procedural synthetic document corpus generator.

Emits small page images in four visual families (layout blocks, ancient
vertical columns, ruled tables with nested cells, multi-oriented text bars)
with pixel-exact instance masks. Generation is a pure function of
(seed, recipe): the same pair always produces byte-identical corpora.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    DatasetSpec,
    InstanceAnnotation,
    SegSample,
    paint_semantic,
    tight_bbox,
    write_dataset_manifest,
    write_sample,
)

# Per-class fill tints and ink colors, cycled by class index. Distinct hues
# keep the classes visually separable for a small model.
_TINTS = [
    (0.93, 0.78, 0.78),
    (0.78, 0.82, 0.94),
    (0.79, 0.92, 0.79),
    (0.95, 0.91, 0.72),
    (0.88, 0.78, 0.93),
    (0.76, 0.92, 0.92),
]
_INKS = [
    (0.45, 0.08, 0.08),
    (0.08, 0.12, 0.45),
    (0.07, 0.38, 0.07),
    (0.45, 0.36, 0.04),
    (0.34, 0.08, 0.42),
    (0.05, 0.38, 0.38),
]


@dataclass
class DatasetRecipe:
    name: str
    task_group: str
    class_names: list[str]
    split_sizes: dict[str, int]
    image_size: tuple[int, int] = (256, 256)
    # Optional fixed per-class instance count (used by scene_text style sets).
    instances_per_class: dict[str, int] = field(default_factory=dict)


@dataclass
class SynthRecipe:
    datasets: list[DatasetRecipe]


class RecipeError(ValueError):
    def __init__(self, message, lineno=None):
        super().__init__(message if lineno is None else f"line {lineno}: {message}")
        self.lineno = lineno


def check_recipe(recipe: SynthRecipe) -> None:
    if len(recipe.datasets) < 2:
        raise RecipeError("recipe must name at least 2 datasets")
    for ds in recipe.datasets:
        if len(ds.class_names) == 0:
            raise RecipeError(f"dataset '{ds.name}' has 0 classes")
        if ds.task_group == "table" and len(ds.class_names) < 2:
            raise RecipeError(f"table dataset '{ds.name}' needs at least 2 classes")
    lists = [tuple(ds.class_names) for ds in recipe.datasets]
    if len(set(lists)) != len(lists):
        raise RecipeError("datasets must have distinct class_name lists")
    if len({ds.task_group for ds in recipe.datasets}) < 2:
        raise RecipeError("recipe must span at least 2 task_groups")


def parse_recipe(text: str) -> SynthRecipe:
    """Parse the flat key-value recipe format (one block per dataset)."""
    datasets: list[DatasetRecipe] = []
    current: DatasetRecipe | None = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        if key == "dataset":
            if not value:
                raise RecipeError("dataset needs a name", lineno)
            current = DatasetRecipe(name=value, task_group="", class_names=[], split_sizes={})
            datasets.append(current)
            continue
        if current is None:
            raise RecipeError(f"'{key}' before any dataset line", lineno)
        if key == "task_group":
            current.task_group = value
        elif key == "classes":
            current.class_names = [c.strip() for c in value.split("|") if c.strip()]
        elif key == "image_size":
            try:
                h, w = (int(t) for t in value.split())
            except ValueError:
                raise RecipeError(f"unparseable image_size '{value}'", lineno)
            current.image_size = (h, w)
        elif key == "count":
            cname, _, num = value.rpartition(" ")
            try:
                current.instances_per_class[cname.strip()] = int(num)
            except ValueError:
                raise RecipeError(f"unparseable count '{value}'", lineno)
        elif key == "split":
            sname, _, num = value.partition(" ")
            try:
                current.split_sizes[sname] = int(num)
            except ValueError:
                raise RecipeError(f"unparseable split size '{value}'", lineno)
        else:
            raise RecipeError(f"unknown recipe key '{key}'", lineno)
    for ds in datasets:
        if not ds.task_group:
            raise RecipeError(f"dataset '{ds.name}' missing task_group")
        if not ds.split_sizes:
            raise RecipeError(f"dataset '{ds.name}' missing split lines")
    return SynthRecipe(datasets=datasets)


def default_recipe() -> SynthRecipe:
    """Four small datasets, one per task group."""
    return SynthRecipe(
        datasets=[
            DatasetRecipe(
                name="layout_mini",
                task_group="layout",
                class_names=["paragraph", "title", "figure"],
                split_sizes={"train": 20, "val": 10},
            ),
            DatasetRecipe(
                name="ancient_mini",
                task_group="ancient_handwritten",
                class_names=["text column", "seal"],
                split_sizes={"train": 20, "val": 10},
            ),
            DatasetRecipe(
                name="table_mini",
                task_group="table",
                class_names=["table", "cell"],
                split_sizes={"train": 20, "val": 10},
            ),
            DatasetRecipe(
                name="scene_mini",
                task_group="scene_text",
                class_names=["text line"],
                split_sizes={"train": 20, "val": 10},
                instances_per_class={"text line": 5},
            ),
        ]
    )


def overfit_recipe() -> SynthRecipe:
    """Two-dataset recipe used by the scaled-down training acceptance run."""
    return SynthRecipe(
        datasets=[
            DatasetRecipe(
                name="layout_mini",
                task_group="layout",
                class_names=["paragraph", "title", "figure"],
                split_sizes={"train": 20, "val": 10},
            ),
            DatasetRecipe(
                name="table_mini",
                task_group="table",
                class_names=["table", "cell"],
                split_sizes={"train": 20, "val": 10},
            ),
        ]
    )


# ---------------------------------------------------------------------------
# Rendering helpers. All geometry is painted through boolean masks so the
# stored annotation is pixel-exact by construction.
# ---------------------------------------------------------------------------


def _snap(v, grid=4):
    return int(v) // grid * grid


def _rect_mask(shape, y0, x0, h, w):
    mask = np.zeros(shape, dtype=bool)
    mask[y0 : y0 + h, x0 : x0 + w] = True
    return mask


def _paint(image, mask, color):
    image[mask] = color


def _stripe_texture(image, y0, x0, h, w, tint, ink, period=8, thickness=3, vertical=False):
    image[y0 : y0 + h, x0 : x0 + w] = tint
    if vertical:
        for x in range(x0 + 2, x0 + w - 1, period):
            image[y0 + 2 : y0 + h - 2, x : min(x + thickness, x0 + w - 2)] = ink
    else:
        for y in range(y0 + 2, y0 + h - 1, period):
            image[y : min(y + thickness, y0 + h - 2), x0 + 2 : x0 + w - 2] = ink


def _block_texture(image, style, y0, x0, h, w, tint, ink, rng):
    """Paint one block; style picks the visual family for its class."""
    if style == 0:  # striped text block
        _stripe_texture(image, y0, x0, h, w, tint, ink)
    elif style == 1:  # solid title bar
        image[y0 : y0 + h, x0 : x0 + w] = ink
        image[y0 + h // 3 : y0 + h // 3 + 2, x0 + 4 : x0 + w - 4] = tint
    elif style == 2:  # framed figure with diagonal
        image[y0 : y0 + h, x0 : x0 + w] = tint
        t = 3
        image[y0 : y0 + t, x0 : x0 + w] = ink
        image[y0 + h - t : y0 + h, x0 : x0 + w] = ink
        image[y0 : y0 + h, x0 : x0 + t] = ink
        image[y0 : y0 + h, x0 + w - t : x0 + w] = ink
        for d in range(min(h, w)):
            yy, xx = y0 + d, x0 + int(d * (w - 1) / max(h - 1, 1))
            image[yy, max(x0, xx - 1) : min(x0 + w, xx + 2)] = ink
    else:  # dotted block
        image[y0 : y0 + h, x0 : x0 + w] = tint
        for y in range(y0 + 3, y0 + h - 2, 8):
            for x in range(x0 + 3, x0 + w - 2, 8):
                image[y : y + 3, x : x + 3] = ink


def _generate_layout(rng, ds: DatasetRecipe, image):
    h, w = image.shape[:2]
    m = len(ds.class_names)
    margin = 16
    instances = []
    # shuffled round-robin class draw: pages mix block types instead of
    # stacking same-class twins
    class_order = []
    while len(class_order) < 8:
        class_order.extend(int(c) for c in rng.permutation(m))
    y = margin + _snap(rng.integers(0, 13))
    while y + 32 <= h - margin and len(instances) < 7:
        bh = _snap(rng.integers(32, 65))
        if y + bh > h - margin:
            bh = _snap(h - margin - y)
            if bh < 32:
                break
        bw = _snap(rng.integers(w // 2, w - 2 * margin + 1))
        x = margin + _snap(rng.integers(0, max(w - 2 * margin - bw, 1)))
        cls = class_order[len(instances)]
        mask = _rect_mask((h, w), y, x, bh, bw)
        _block_texture(image, cls % 4, y, x, bh, bw, _TINTS[cls % 6], _INKS[cls % 6], rng)
        instances.append(InstanceAnnotation(class_index=cls, mask=mask, bbox=tight_bbox(mask)))
        y += bh + _snap(rng.integers(8, 21))
    return instances


def _generate_ancient(rng, ds: DatasetRecipe, image):
    """Vertical text columns read right to left, plus an optional seal."""
    h, w = image.shape[:2]
    m = len(ds.class_names)
    margin = 16
    instances = []
    x = w - margin
    ncols = int(rng.integers(3, 6))
    for _ in range(ncols):
        cw = _snap(rng.integers(20, 37))
        if x - cw < margin:
            break
        x0 = x - cw
        ch = _snap(rng.integers(h // 2, h - 2 * margin))
        y0 = margin + _snap(rng.integers(0, max(h - 2 * margin - ch, 1)))
        mask = _rect_mask((h, w), y0, x0, ch, cw)
        _stripe_texture(image, y0, x0, ch, cw, _TINTS[0], _INKS[0], period=10, thickness=4, vertical=False)
        instances.append(InstanceAnnotation(class_index=0, mask=mask, bbox=tight_bbox(mask)))
        x = x0 - _snap(rng.integers(8, 17))
    if m >= 2 and rng.random() < 0.8:
        sw = _snap(rng.integers(24, 41))
        sx = margin + _snap(rng.integers(0, 17))
        sy = h - margin - sw - _snap(rng.integers(0, 17))
        mask = _rect_mask((h, w), sy, sx, sw, sw)
        _block_texture(image, 2, sy, sx, sw, sw, _TINTS[1], _INKS[1], rng)
        instances.append(InstanceAnnotation(class_index=1, mask=mask, bbox=tight_bbox(mask)))
    return instances


def _generate_table(rng, ds: DatasetRecipe, image):
    """One ruled table whose cell masks nest inside the table mask."""
    h, w = image.shape[:2]
    m = len(ds.class_names)
    margin = 16
    border = 12
    tw = _snap(rng.integers(int(w * 0.65), w - 2 * margin + 1))
    th = _snap(rng.integers(int(h * 0.5), int(h * 0.8)))
    x0 = margin + _snap(rng.integers(0, max(w - 2 * margin - tw, 1)))
    y0 = margin + _snap(rng.integers(0, max(h - 2 * margin - th, 1)))

    table_mask = _rect_mask((h, w), y0, x0, th, tw)
    image[y0 : y0 + th, x0 : x0 + tw] = _INKS[0]  # border + rulings ink
    instances = [InstanceAnnotation(class_index=0, mask=table_mask, bbox=tight_bbox(table_mask))]

    rows = int(rng.integers(2, 4))
    cols = int(rng.integers(2, 4))
    inner_w = tw - 2 * border
    inner_h = th - 2 * border
    cw = (inner_w - (cols - 1) * border) // cols
    ch = (inner_h - (rows - 1) * border) // rows
    for r in range(rows):
        for c in range(cols):
            cx0 = x0 + border + c * (cw + border)
            cy0 = y0 + border + r * (ch + border)
            mask = _rect_mask((h, w), cy0, cx0, ch, cw)
            image[cy0 : cy0 + ch, cx0 : cx0 + cw] = _TINTS[1]
            for yy in range(cy0 + 4, cy0 + ch - 3, 8):  # cell content dashes
                dash_w = max(cw // 2, 6)
                image[yy : yy + 3, cx0 + 4 : cx0 + 4 + dash_w] = _INKS[1]
            instances.append(InstanceAnnotation(class_index=1, mask=mask, bbox=tight_bbox(mask)))

    if m >= 3 and y0 + th + 24 < h - margin:  # caption block below
        bh = 16
        bw = tw // 2
        bx = x0 + (tw - bw) // 2
        by = y0 + th + 8
        mask = _rect_mask((h, w), by, bx, bh, bw)
        _stripe_texture(image, by, bx, bh, bw, _TINTS[2], _INKS[2])
        instances.append(InstanceAnnotation(class_index=2, mask=mask, bbox=tight_bbox(mask)))
    return instances


def _rotated_bar_mask(shape, cy, cx, length, thickness, angle):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (np.abs(u) <= length / 2) & (np.abs(v) <= thickness / 2)


def _generate_scene_text(rng, ds: DatasetRecipe, image):
    """Short multi-oriented bars, pairwise disjoint by construction."""
    h, w = image.shape[:2]
    # mottled background so bars sit on nonuniform context
    image[:] = 0.82
    image[:: 16, :] = 0.76
    image[:, :: 16] = 0.76
    occupied = np.zeros((h, w), dtype=bool)
    instances = []
    side = min(h, w)
    for cls, cname in enumerate(ds.class_names):
        count = ds.instances_per_class.get(cname, int(rng.integers(3, 7)))
        for _ in range(count):
            mask = None
            for _attempt in range(200):
                length = float(rng.integers(max(side // 5, 16), max(side * 9 // 20, 24)))
                thickness = float(rng.integers(max(side // 20, 6), max(side * 2 // 25, 10)))
                angle = float(rng.uniform(-np.pi / 3, np.pi / 3))
                cy = float(rng.uniform(thickness, h - thickness))
                cx = float(rng.uniform(thickness, w - thickness))
                cand = _rotated_bar_mask((h, w), cy, cx, length, thickness, angle)
                if cand.any() and not (cand & occupied).any():
                    mask = cand
                    break
            if mask is None:  # extremely crowded; place a tiny horizontal bar
                free = np.nonzero(~occupied)
                yy, xx = free[0][0], free[1][0]
                mask = np.zeros((h, w), dtype=bool)
                mask[yy, xx] = True
            occupied |= mask
            ink = np.array(_INKS[cls % 6])
            tint = np.array(_TINTS[cls % 6])
            _paint(image, mask, ink)
            dash = mask & (((np.arange(w)[None, :] // 6) % 2) == 0)
            _paint(image, dash, tint * 0.6 + ink * 0.4)
            instances.append(InstanceAnnotation(class_index=cls, mask=mask, bbox=tight_bbox(mask)))
    return instances


_GENERATORS = {
    "layout": _generate_layout,
    "ancient_handwritten": _generate_ancient,
    "table": _generate_table,
    "scene_text": _generate_scene_text,
}


def generate_sample(rng: np.random.Generator, ds: DatasetRecipe) -> SegSample:
    h, w = ds.image_size
    image = np.empty((h, w, 3), dtype=np.float32)
    image[:] = 0.96
    # faint page texture under everything
    noise = rng.uniform(-0.02, 0.02, size=(h // 8, w // 8, 1)).astype(np.float32)
    image += np.kron(noise, np.ones((8, 8, 1), dtype=np.float32))[:h, :w]
    instances = _GENERATORS[ds.task_group](rng, ds, image)
    np.clip(image, 0.0, 1.0, out=image)
    spec = DatasetSpec(
        name=ds.name,
        class_names=tuple(ds.class_names),
        task_group=ds.task_group,
        split_sizes=dict(ds.split_sizes),
    )
    semantic = paint_semantic(instances, (h, w), spec.background_label)
    return SegSample(image=image, instances=instances, semantic=semantic, dataset=spec)


def generate_synthetic_corpus(seed: int, recipe: SynthRecipe, out_dir: Path) -> Path:
    """Write the corpus for (seed, recipe) under out_dir; returns out_dir."""
    check_recipe(recipe)
    out_dir = Path(out_dir)
    for d_idx, ds in enumerate(recipe.datasets):
        split_ids: dict[str, list[str]] = {}
        for s_idx, (split, count) in enumerate(sorted(ds.split_sizes.items())):
            ids = []
            for i in range(count):
                rng = np.random.default_rng([seed, d_idx, s_idx, i])
                sample = generate_sample(rng, ds)
                sid = f"{i:06d}"
                write_sample(out_dir / ds.name / split, sid, sample)
                ids.append(sid)
            split_ids[split] = ids
        spec = DatasetSpec(
            name=ds.name,
            class_names=tuple(ds.class_names),
            task_group=ds.task_group,
            split_sizes={s: len(ids) for s, ids in split_ids.items()},
        )
        write_dataset_manifest(out_dir, spec, split_ids)
    return out_dir
