"""Annotation data model and the on-disk corpus format.

A corpus on disk looks like::

    <root>/<dataset_name>/manifest
    <root>/<dataset_name>/<split>/<id>.img    # 8-bit RGB PNG bytes
    <root>/<dataset_name>/<split>/<id>.ann    # text annotation, see below

The manifest is line oriented::

    name <dataset_name>
    task_group <group>
    class <class name, spaces allowed>        # one line per class, in order
    split <split_name> <id> <id> ...

The ``.ann`` file stores one sample. Field order is fixed::

    size <H> <W>
    ninstances <K>
    instance <class_index> <cx> <cy> <w> <h> | <binary RLE counts>
    ...                                       # K such lines
    semantic | <label RLE pairs>

Binary RLE is a row-major run-length encoding: space separated run lengths
alternating between value 0 and value 1, starting with a (possibly zero)
run of 0s. Label RLE is a sequence of ``value:count`` pairs, row-major.
Box coordinates are (cx, cy, w, h) fractions of (W, H) with 6 decimals.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

TASK_GROUPS = ("layout", "ancient_handwritten", "table", "scene_text")


class CorpusError(Exception):
    """Fatal corpus-level problem (missing manifest, unreadable root)."""


class SampleFormatError(CorpusError):
    """A sample file violates the on-disk schema."""

    def __init__(self, path, field_name, message):
        super().__init__(f"{path}: field '{field_name}': {message}")
        self.path = str(path)
        self.field = field_name


@dataclass(frozen=True)
class DatasetSpec:
    """Identity of one dataset: its class list and task group."""

    name: str
    class_names: tuple[str, ...]
    task_group: str
    split_sizes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise ValueError(f"dataset '{self.name}' has no classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError(f"dataset '{self.name}' has duplicate class names")
        if self.task_group not in TASK_GROUPS:
            raise ValueError(
                f"dataset '{self.name}' task_group '{self.task_group}' not one of {TASK_GROUPS}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_label(self) -> int:
        """Semantic label used for background: one past the last class."""
        return len(self.class_names)


@dataclass
class InstanceAnnotation:
    """One object: class index, binary mask and its tight normalized box."""

    class_index: int
    mask: np.ndarray  # bool (H, W)
    bbox: np.ndarray  # float64 (4,), (cx, cy, w, h) in [0, 1]


@dataclass
class SemanticMap:
    labels: np.ndarray  # int32 (H, W), values in [0, M]; M is background


@dataclass
class SegSample:
    image: np.ndarray  # float32 (H, W, 3) in [0, 1]
    instances: list[InstanceAnnotation]
    semantic: SemanticMap
    dataset: DatasetSpec


def tight_bbox(mask: np.ndarray) -> np.ndarray:
    """Tight axis-aligned (cx, cy, w, h) box of a binary mask, normalized.

    Pixel bounds are inclusive; a single foreground pixel at (y, x) yields
    w = 1/W, h = 1/H centered on that pixel.
    """
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("tight_bbox of an empty mask")
    h, w = mask.shape
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    bw = (x1 - x0 + 1) / w
    bh = (y1 - y0 + 1) / h
    cx = (x0 + x1 + 1) / (2 * w)
    cy = (y0 + y1 + 1) / (2 * h)
    return np.array([cx, cy, bw, bh], dtype=np.float64)


def paint_semantic(
    instances: list[InstanceAnnotation], shape: tuple[int, int], background: int
) -> SemanticMap:
    """Derive the semantic map by painting instances in list order."""
    labels = np.full(shape, background, dtype=np.int32)
    for inst in instances:
        labels[inst.mask] = inst.class_index
    return SemanticMap(labels=labels)


def validate_sample(sample: SegSample) -> list[str]:
    """Check every SegSample invariant; return one message per violation."""
    violations = []
    if sample.image.ndim != 3 or sample.image.shape[2] != 3:
        violations.append("image not H x W x 3")
        return violations
    h, w = sample.image.shape[:2]
    m = sample.dataset.num_classes

    if sample.semantic.labels.shape != (h, w):
        violations.append(
            f"raster shape mismatch: semantic {sample.semantic.labels.shape} vs image {(h, w)}"
        )
    labels = sample.semantic.labels
    if labels.size and (labels.min() < 0 or labels.max() > m):
        violations.append(f"semantic label out of range [0, {m}]")

    for i, inst in enumerate(sample.instances):
        if inst.mask.shape != (h, w):
            violations.append(f"instance {i}: raster shape mismatch")
            continue
        if not (0 <= inst.class_index < m):
            violations.append(f"instance {i}: class out of range")
        if not inst.mask.any():
            violations.append(f"instance {i}: empty mask")
            continue
        bbox = np.asarray(inst.bbox, dtype=np.float64)
        if bbox.min() < 0.0 or bbox.max() > 1.0 or bbox[2] <= 0 or bbox[3] <= 0:
            violations.append(f"instance {i}: bbox out of range")
            continue
        tight = tight_bbox(inst.mask)
        # 1 pixel tolerance per coordinate, in pixel units.
        err = np.abs(bbox - tight) * np.array([w, h, w, h])
        if err.max() > 1.0:
            violations.append(f"instance {i}: bbox not tight")

    if sample.semantic.labels.shape == (h, w):
        ok_instances = [
            inst
            for inst in sample.instances
            if inst.mask.shape == (h, w) and 0 <= inst.class_index < m
        ]
        if len(ok_instances) == len(sample.instances):
            repainted = paint_semantic(ok_instances, (h, w), sample.dataset.background_label)
            if not np.array_equal(repainted.labels, sample.semantic.labels):
                violations.append("semantic inconsistent with instances")
    return violations


# ---------------------------------------------------------------------------
# Run-length encodings
# ---------------------------------------------------------------------------


def encode_binary_rle(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:  # counts must start with a run of 0s
        counts = [0] + counts
    return [int(c) for c in counts]


def decode_binary_rle(counts: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if c < 0 or pos + c > total:
            raise ValueError("binary RLE counts exceed raster size")
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    if pos != total:
        raise ValueError(f"binary RLE covers {pos} of {total} pixels")
    return flat.reshape(shape)


def encode_label_rle(labels: np.ndarray) -> list[tuple[int, int]]:
    flat = np.asarray(labels).ravel()
    if flat.size == 0:
        return []
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    return [
        (int(flat[bounds[i]]), int(bounds[i + 1] - bounds[i])) for i in range(len(bounds) - 1)
    ]


def decode_label_rle(pairs: list[tuple[int, int]], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=np.int32)
    pos = 0
    for value, count in pairs:
        if count < 0 or pos + count > total:
            raise ValueError("label RLE counts exceed raster size")
        flat[pos : pos + count] = value
        pos += count
    if pos != total:
        raise ValueError(f"label RLE covers {pos} of {total} pixels")
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# Per-sample files
# ---------------------------------------------------------------------------


def image_to_png_bytes(image: np.ndarray) -> bytes:
    u8 = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def png_bytes_to_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (u8.astype(np.float32) / 255.0).astype(np.float32)


def format_annotation(sample: SegSample) -> str:
    h, w = sample.image.shape[:2]
    lines = [f"size {h} {w}", f"ninstances {len(sample.instances)}"]
    for inst in sample.instances:
        box = " ".join(f"{v:.6f}" for v in inst.bbox)
        counts = " ".join(str(c) for c in encode_binary_rle(inst.mask))
        lines.append(f"instance {inst.class_index} {box} | {counts}")
    pairs = " ".join(f"{v}:{c}" for v, c in encode_label_rle(sample.semantic.labels))
    lines.append(f"semantic | {pairs}")
    return "\n".join(lines) + "\n"


def parse_annotation(text: str, dataset: DatasetSpec, path="<string>") -> tuple:
    """Parse an .ann file into (shape, instances, semantic map)."""
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or not lines[0].startswith("size "):
        raise SampleFormatError(path, "size", "missing size header")
    try:
        h, w = (int(tok) for tok in lines[0].split()[1:3])
    except (ValueError, IndexError):
        raise SampleFormatError(path, "size", f"unparseable: {lines[0]!r}")
    if len(lines) < 2 or not lines[1].startswith("ninstances "):
        raise SampleFormatError(path, "ninstances", "missing instance count")
    try:
        n = int(lines[1].split()[1])
    except (ValueError, IndexError):
        raise SampleFormatError(path, "ninstances", f"unparseable: {lines[1]!r}")
    if len(lines) != 2 + n + 1:
        raise SampleFormatError(
            path, "ninstances", f"expected {n} instance lines + semantic, found {len(lines) - 2}"
        )

    instances = []
    for i in range(n):
        line = lines[2 + i]
        if not line.startswith("instance "):
            raise SampleFormatError(path, f"instance {i}", "line does not start with 'instance'")
        head, _, rle = line.partition("|")
        toks = head.split()
        if len(toks) != 6:
            raise SampleFormatError(path, f"instance {i}", "expected class + 4 box coords")
        try:
            class_index = int(toks[1])
            bbox = np.array([float(t) for t in toks[2:6]], dtype=np.float64)
        except ValueError:
            raise SampleFormatError(path, f"instance {i}", "unparseable class/bbox")
        if not (0 <= class_index < dataset.num_classes):
            raise SampleFormatError(
                path, f"instance {i} class_index", f"{class_index} out of [0, {dataset.num_classes})"
            )
        if bbox.min() < 0.0 or bbox.max() > 1.0:
            raise SampleFormatError(path, f"instance {i} bbox", f"{bbox.tolist()} outside [0, 1]")
        try:
            counts = [int(t) for t in rle.split()]
            mask = decode_binary_rle(counts, (h, w))
        except ValueError as e:
            raise SampleFormatError(path, f"instance {i} mask", str(e))
        instances.append(InstanceAnnotation(class_index=class_index, mask=mask, bbox=bbox))

    sem_line = lines[2 + n]
    if not sem_line.startswith("semantic"):
        raise SampleFormatError(path, "semantic", "missing semantic line")
    _, _, body = sem_line.partition("|")
    try:
        pairs = []
        for tok in body.split():
            v, _, c = tok.partition(":")
            pairs.append((int(v), int(c)))
        labels = decode_label_rle(pairs, (h, w))
    except ValueError as e:
        raise SampleFormatError(path, "semantic", str(e))
    if labels.size and labels.max() > dataset.background_label:
        raise SampleFormatError(
            path, "semantic", f"label {labels.max()} > background {dataset.background_label}"
        )
    return (h, w), instances, SemanticMap(labels=labels)


def write_sample(directory: Path, sample_id: str, sample: SegSample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{sample_id}.img").write_bytes(image_to_png_bytes(sample.image))
    (directory / f"{sample_id}.ann").write_text(format_annotation(sample))


def read_sample(directory: Path, sample_id: str, dataset: DatasetSpec) -> SegSample:
    directory = Path(directory)
    img_path = directory / f"{sample_id}.img"
    ann_path = directory / f"{sample_id}.ann"
    if not img_path.exists():
        raise SampleFormatError(img_path, "image", "file missing")
    if not ann_path.exists():
        raise SampleFormatError(ann_path, "annotation", "file missing")
    image = png_bytes_to_image(img_path.read_bytes())
    (h, w), instances, semantic = parse_annotation(ann_path.read_text(), dataset, ann_path)
    if image.shape[:2] != (h, w):
        raise SampleFormatError(ann_path, "size", f"annotation {h}x{w} vs image {image.shape[:2]}")
    return SegSample(image=image, instances=instances, semantic=semantic, dataset=dataset)


# ---------------------------------------------------------------------------
# Manifests and corpus loading
# ---------------------------------------------------------------------------


def format_manifest(spec: DatasetSpec, split_ids: dict[str, list[str]]) -> str:
    lines = [f"name {spec.name}", f"task_group {spec.task_group}"]
    for cname in spec.class_names:
        lines.append(f"class {cname}")
    for split, ids in split_ids.items():
        lines.append("split " + " ".join([split] + list(ids)))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, path="<string>") -> tuple[DatasetSpec, dict[str, list[str]]]:
    name = None
    task_group = None
    class_names = []
    split_ids: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        if key == "name":
            name = value.strip()
        elif key == "task_group":
            task_group = value.strip()
        elif key == "class":
            class_names.append(value.strip())
        elif key == "split":
            toks = value.split()
            if not toks:
                raise CorpusError(f"{path}:{lineno}: empty split line")
            split_ids[toks[0]] = toks[1:]
        else:
            raise CorpusError(f"{path}:{lineno}: unknown manifest key '{key}'")
    if name is None or task_group is None or not class_names:
        raise CorpusError(f"{path}: manifest missing name, task_group or classes")
    spec = DatasetSpec(
        name=name,
        class_names=tuple(class_names),
        task_group=task_group,
        split_sizes={s: len(ids) for s, ids in split_ids.items()},
    )
    return spec, split_ids


class CorpusDataset:
    """One on-disk dataset: spec plus lazily loadable samples."""

    def __init__(self, root: Path, spec: DatasetSpec, split_ids: dict[str, list[str]]):
        self.root = Path(root)
        self.spec = spec
        self.split_ids = split_ids

    def sample_ids(self, split: str) -> list[str]:
        if split not in self.split_ids:
            raise CorpusError(f"dataset '{self.spec.name}' has no split '{split}'")
        return list(self.split_ids[split])

    def load(self, split: str, sample_id: str) -> SegSample:
        return read_sample(self.root / split, sample_id, self.spec)

    def load_index(self, split: str, i: int) -> SegSample:
        return self.load(split, self.sample_ids(split)[i])

    def __repr__(self):
        sizes = {s: len(ids) for s, ids in self.split_ids.items()}
        return f"CorpusDataset({self.spec.name!r}, classes={self.spec.num_classes}, splits={sizes})"


def write_dataset_manifest(root: Path, spec: DatasetSpec, split_ids: dict[str, list[str]]) -> None:
    ds_dir = Path(root) / spec.name
    ds_dir.mkdir(parents=True, exist_ok=True)
    (ds_dir / "manifest").write_text(format_manifest(spec, split_ids))


def load_corpus(root: Path) -> list[CorpusDataset]:
    """Load every dataset under root. Missing manifests are fatal."""
    root = Path(root)
    if not root.exists():
        raise CorpusError(f"corpus root {root} does not exist")
    datasets = []
    for ds_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        manifest = ds_dir / "manifest"
        if not manifest.exists():
            raise CorpusError(f"dataset directory {ds_dir} has no manifest")
        spec, split_ids = parse_manifest(manifest.read_text(), manifest)
        for split, ids in split_ids.items():
            for sid in ids:
                ann = ds_dir / split / f"{sid}.ann"
                img = ds_dir / split / f"{sid}.img"
                if not ann.exists() or not img.exists():
                    raise CorpusError(f"dataset {spec.name}: sample {split}/{sid} files missing")
        datasets.append(CorpusDataset(ds_dir, spec, split_ids))
    return datasets
