"""
TensorFact - Synthetic Two-Modality Dataset

Modality A draws bright shapes on a dark textured background. Modality B is
derived from A by inversion, per-class intensity bands, a 3x3 box blur and
additive noise, so the two modalities share geometry but not appearance.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image

from .errors import ArgumentError, DataError
from .metrics import Box, GroundTruthBox
from .utils import derive_rng, format_key_values

logger = logging.getLogger(__name__)

CLASS_NAMES = ("disc", "square", "triangle")
SPLIT_KEYS = {"train": 0, "val": 1, "test": 2, "pool": 3}
MODALITIES = ("A", "B")

BACKGROUND_RANGE = (10.0, 70.0)
OBJECT_INTENSITY = (150, 240)
BACKGROUND_BAND = (10.0, 50.0)
CLASS_BANDS = ((200.0, 250.0), (140.0, 190.0), (80.0, 130.0))
# objects fill this part of their band; the blur only pulls edge pixels down
OBJECT_BAND_SPAN = (0.75, 0.95)
MIN_GAP = 2
PLACEMENT_ATTEMPTS = 50


class Annotation(NamedTuple):
    """One object: class id and center/size normalized to [0, 1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_box(self, canvas: int) -> Box:
        return Box((self.cx - self.w / 2) * canvas, (self.cy - self.h / 2) * canvas,
                   (self.cx + self.w / 2) * canvas, (self.cy + self.h / 2) * canvas)

    @classmethod
    def from_pixels(cls, class_id: int, x0: int, y0: int, x1: int, y1: int, canvas: int) -> "Annotation":
        return cls(class_id, (x0 + x1) / 2 / canvas, (y0 + y1) / 2 / canvas, (x1 - x0) / canvas, (y1 - y0) / canvas)


@dataclass(frozen=True)
class SceneSpec:
    """Scene generation parameters."""

    canvas: int = 128
    classes: int = 3
    min_objects: int = 1
    max_objects: int = 6
    min_size: int = 12
    max_size: int = 32
    noise_level: float = 4.0
    modality: str = "A"
    class_weights: Optional[Tuple[float, ...]] = None
    grid: int = 16

    @property
    def cell(self) -> int:
        return self.canvas // self.grid

    def probabilities(self) -> np.ndarray:
        weights = np.ones(self.classes) if self.class_weights is None else np.asarray(self.class_weights, float)
        return weights / weights.sum()


def validate_spec(spec: SceneSpec) -> Tuple[bool, List[str]]:
    """
    Check a scene specification.

    Returns:
        tuple: (is_valid, error_messages)
    """
    errors = []
    if not 1 <= spec.classes <= len(CLASS_NAMES):
        errors.append(f"classes must be in [1, {len(CLASS_NAMES)}], got {spec.classes}")
    if not 1 <= spec.min_objects <= spec.max_objects:
        errors.append("object count range must satisfy 1 <= min <= max")
    if not 2 <= spec.min_size <= spec.max_size <= spec.canvas:
        errors.append("size range must satisfy 2 <= min <= max <= canvas")
    if spec.noise_level < 0:
        errors.append("noise_level must be >= 0")
    if spec.modality not in MODALITIES:
        errors.append(f"modality must be one of {MODALITIES}, got {spec.modality!r}")
    if spec.grid < 1 or spec.canvas % spec.grid:
        errors.append(f"grid {spec.grid} must divide canvas {spec.canvas}")
    if spec.class_weights is not None:
        if len(spec.class_weights) != spec.classes or min(spec.class_weights) < 0 or sum(spec.class_weights) <= 0:
            errors.append("class_weights must hold one non-negative weight per class")
    return len(errors) == 0, errors


@dataclass
class Scene:
    image: np.ndarray
    instances: np.ndarray
    objects: List[Annotation]

    def label_map(self) -> np.ndarray:
        """0 for background, class id + 1 under each object."""
        labels = np.zeros_like(self.instances)
        for k, obj in enumerate(self.objects):
            labels[self.instances == k + 1] = obj.class_id + 1
        return labels


def shape_mask(class_id: int, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask of a disc, square or triangle."""
    centers = np.arange(size) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    if class_id == 0:
        radius = size / 2
        return (xx - radius) ** 2 + (yy - radius) ** 2 <= radius ** 2
    if class_id == 1:
        return np.ones((size, size), dtype=bool)
    if class_id == 2:
        half_width = yy / size * (size / 2)
        return np.abs(xx - size / 2) <= half_width
    raise ArgumentError(f"no shape for class {class_id}")


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(*BACKGROUND_RANGE, size=(9, 9)).astype(np.float32)
    texture = Image.fromarray(coarse).resize((spec.canvas, spec.canvas), Image.Resampling.BILINEAR)
    return np.asarray(texture, dtype=np.float64)


def _overlaps(box: Tuple[int, int, int, int], placed: Sequence[Tuple[int, int, int, int]]) -> bool:
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in placed:
        if x0 < a1 + MIN_GAP and a0 < x1 + MIN_GAP and y0 < b1 + MIN_GAP and b0 < y1 + MIN_GAP:
            return True
    return False


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """
    Draw one modality-A scene.

    Objects never overlap (2-pixel gap) and their centers fall in distinct
    grid cells. Boxes are measured from the drawn masks, so they are tight.

    Args:
        spec: Scene specification
        rng: Per-image generator

    Returns:
        Scene: Image, instance map and annotations
    """
    canvas = spec.canvas
    image = _background(spec, rng)
    instances = np.zeros((canvas, canvas), dtype=np.uint8)
    objects: List[Annotation] = []
    placed: List[Tuple[int, int, int, int]] = []
    cells = set()
    target = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    probabilities = spec.probabilities()
    for _ in range(target):
        class_id = int(rng.choice(spec.classes, p=probabilities))
        intensity = float(rng.integers(OBJECT_INTENSITY[0], OBJECT_INTENSITY[1] + 1))
        for _ in range(PLACEMENT_ATTEMPTS):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            left = int(rng.integers(0, canvas - size + 1))
            top = int(rng.integers(0, canvas - size + 1))
            mask = shape_mask(class_id, size)
            ys, xs = np.nonzero(mask)
            box = (left + xs.min(), top + ys.min(), left + xs.max() + 1, top + ys.max() + 1)
            cell = (int((box[0] + box[2]) / 2 // spec.cell), int((box[1] + box[3]) / 2 // spec.cell))
            if cell in cells or _overlaps(box, placed):
                continue
            region = (slice(top, top + size), slice(left, left + size))
            image[region][mask] = intensity
            instances[region][mask] = len(objects) + 1
            placed.append(box)
            cells.add(cell)
            objects.append(Annotation.from_pixels(class_id, *box, canvas))
            break
    if spec.noise_level:
        image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
    return Scene(np.clip(np.rint(image), 0, 255).astype(np.uint8), instances, objects)


def box_blur(image: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge replication."""
    padded = np.pad(image, 1, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    return windows.mean(axis=(2, 3))


def modality_transform(image: np.ndarray, labels: np.ndarray, rng: Optional[np.random.Generator] = None,
                       noise_level: float = 4.0, classes: int = 3) -> np.ndarray:
    """
    Map a modality-A image to modality B.

    Inversion, then every region is remapped linearly into its own intensity
    band (objects into the upper part of their class band), then a 3x3 box
    blur and additive Gaussian noise. Not an involution.

    Args:
        image: Modality-A image (H, W) uint8
        labels: 0 for background, class id + 1 under objects
        rng: Noise generator (no noise when None)
        noise_level: Noise standard deviation
        classes: Number of classes

    Returns:
        np.ndarray: Modality-B image (H, W) uint8
    """
    if image.shape != labels.shape:
        raise ArgumentError(f"image {image.shape} and label map {labels.shape} differ")
    inverted = 255.0 - image.astype(np.float64)
    out = np.zeros_like(inverted)
    background = labels == 0
    lo, hi = BACKGROUND_BAND
    out[background] = lo + (hi - lo) * inverted[background] / 255.0
    darkest = 255.0 - OBJECT_INTENSITY[1]
    level = np.clip((inverted - darkest) / (OBJECT_INTENSITY[1] - OBJECT_INTENSITY[0]), 0.0, 1.0)
    span_lo, span_hi = OBJECT_BAND_SPAN
    for class_id, (lo, hi) in enumerate(CLASS_BANDS[:classes]):
        region = labels == class_id + 1
        out[region] = lo + (hi - lo) * (span_lo + (span_hi - span_lo) * level[region])
    out = box_blur(out)
    if rng is not None and noise_level:
        out = out + rng.normal(0.0, noise_level, size=out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _render_item(spec: SceneSpec, seed: int, split: str, index: int) -> Tuple[np.ndarray, List[Annotation]]:
    rng = derive_rng(seed, SPLIT_KEYS[split], index)
    scene = render_scene(spec, rng)
    image = scene.image
    if spec.modality == "B":
        image = modality_transform(image, scene.label_map(), rng, spec.noise_level, spec.classes)
    return image, scene.objects


@dataclass
class SyntheticDataset:
    """Images (N, H, W) uint8 with their annotations."""

    images: np.ndarray
    annotations: List[List[Annotation]]
    image_ids: List[int]
    modality: str = "A"
    split: str = "train"
    canvas: int = 128
    classes: int = 3
    seed: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def inputs(self, dtype=np.float32) -> np.ndarray:
        """Network input (N, 1, H, W) scaled to [0, 1]."""
        return (self.images[:, None].astype(np.float64) / 255.0).astype(dtype)

    def ground_truth(self) -> List[GroundTruthBox]:
        return [
            GroundTruthBox(image_id, obj.class_id, obj.to_box(self.canvas))
            for image_id, objects in zip(self.image_ids, self.annotations)
            for obj in objects
        ]

    def box_sizes(self) -> np.ndarray:
        """(w, h) of every object in pixels."""
        sizes = [(obj.w * self.canvas, obj.h * self.canvas) for objects in self.annotations for obj in objects]
        return np.asarray(sizes, dtype=np.float64).reshape(-1, 2)

    def subset(self, positions: Sequence[int]) -> "SyntheticDataset":
        positions = list(positions)
        return replace(self, images=self.images[positions], annotations=[self.annotations[i] for i in positions],
                       image_ids=[self.image_ids[i] for i in positions])


def generate_dataset(spec: SceneSpec, n_images: int, seed: int, split: str = "train",
                     indices: Optional[Sequence[int]] = None, n_jobs: int = 1) -> SyntheticDataset:
    """
    Render a split deterministically.

    Every image has its own generator derived from (seed, split, index), so
    any subset renders identically on its own or inside a larger run.

    Args:
        spec: Scene specification (modality included)
        n_images: Number of images (ignored when ``indices`` is given)
        seed: Dataset seed
        split: One of train, val, test, pool
        indices: Explicit image indices to render
        n_jobs: joblib workers

    Returns:
        SyntheticDataset: Rendered split
    """
    is_valid, errors = validate_spec(spec)
    if not is_valid:
        raise ArgumentError("; ".join(errors))
    if split not in SPLIT_KEYS:
        raise ArgumentError(f"unknown split {split!r}")
    ids = list(range(n_images)) if indices is None else [int(i) for i in indices]
    if not ids:
        raise ArgumentError("a dataset needs at least one image")
    rendered = Parallel(n_jobs=n_jobs)(delayed(_render_item)(spec, seed, split, i) for i in ids)
    images = np.stack([image for image, _ in rendered])
    logger.debug("rendered %d modality-%s images for split %s", len(ids), spec.modality, split)
    return SyntheticDataset(images, [objects for _, objects in rendered], ids, spec.modality, split,
                            spec.canvas, spec.classes, seed)


def scarce_split(spec: SceneSpec, pool_size: int, n_select: int, seed: int,
                 n_jobs: int = 1) -> SyntheticDataset:
    """
    Seeded selection of ``n_select`` images out of a virtual pool.

    Only the selected pool entries are rendered.
    """
    if not 1 <= n_select <= pool_size:
        raise ArgumentError(f"cannot select {n_select} of {pool_size} images")
    chosen = np.sort(derive_rng(seed, 400).choice(pool_size, size=n_select, replace=False))
    return generate_dataset(spec, n_select, seed, split="pool", indices=chosen, n_jobs=n_jobs)


def class_distribution(dataset: SyntheticDataset) -> pd.DataFrame:
    """Instance count and share per class."""
    counts = np.zeros(dataset.classes, dtype=np.int64)
    for objects in dataset.annotations:
        for obj in objects:
            counts[obj.class_id] += 1
    total = max(int(counts.sum()), 1)
    return pd.DataFrame({
        "class_id": np.arange(dataset.classes),
        "name": list(CLASS_NAMES[: dataset.classes]),
        "instances": counts,
        "fraction": counts / total,
    })


def format_annotation(obj: Annotation) -> str:
    return f"{obj.class_id} {obj.cx:.8f} {obj.cy:.8f} {obj.w:.8f} {obj.h:.8f}"


def save_dataset(dataset: SyntheticDataset, directory: Union[str, Path]) -> Path:
    """
    Write PGM images, one annotation file per image and ``dataset.cfg``.

    Args:
        dataset: Dataset to write
        directory: Target directory

    Returns:
        Path: The directory
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    for image_id, image, objects in zip(dataset.image_ids, dataset.images, dataset.annotations):
        stem = f"{image_id:06d}"
        Image.fromarray(image).save(directory / "images" / f"{stem}.pgm")
        lines = [format_annotation(obj) for obj in objects]
        (directory / "labels" / f"{stem}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "modality": dataset.modality,
        "split": dataset.split,
        "canvas": dataset.canvas,
        "classes": dataset.classes,
        "seed": dataset.seed,
        "count": len(dataset),
    }
    (directory / "dataset.cfg").write_text(format_key_values(meta), encoding="utf-8")
    logger.debug("wrote %d images to %s", len(dataset), directory)
    return directory


def _parse_meta(path: Path) -> Dict[str, str]:
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            meta[key] = value
    return meta


def parse_annotation_line(line: str, lineno: int = 0) -> Annotation:
    parts = line.split()
    if len(parts) != 5:
        raise DataError(f"line {lineno}: expected 'class_id cx cy w h', got {line!r}")
    try:
        return Annotation(int(parts[0]), *(float(v) for v in parts[1:]))
    except ValueError as e:
        raise DataError(f"line {lineno}: {e}") from e


def load_dataset(directory: Union[str, Path]) -> SyntheticDataset:
    """
    Read a dataset written by ``save_dataset``.

    Raises:
        DataError: On missing files, unreadable images or malformed annotations
    """
    directory = Path(directory)
    meta_path = directory / "dataset.cfg"
    if not meta_path.exists():
        raise DataError(f"no dataset.cfg in {directory}")
    meta = _parse_meta(meta_path)
    paths = sorted((directory / "images").glob("*.pgm"))
    if not paths:
        raise DataError(f"no images in {directory / 'images'}")
    images, annotations, ids = [], [], []
    for path in paths:
        try:
            with Image.open(path) as img:
                images.append(np.asarray(img.convert("L"), dtype=np.uint8))
        except OSError as e:
            raise DataError(f"cannot read {path}: {e}") from e
        label_path = directory / "labels" / f"{path.stem}.txt"
        if not label_path.exists():
            raise DataError(f"missing annotation file {label_path}")
        objects = [parse_annotation_line(line, n) for n, line in
                   enumerate(label_path.read_text(encoding="utf-8").splitlines(), start=1) if line.strip()]
        annotations.append(objects)
        ids.append(int(path.stem))
    try:
        return SyntheticDataset(np.stack(images), annotations, ids, meta.get("modality", "A"),
                                meta.get("split", "train"), int(meta.get("canvas", images[0].shape[0])),
                                int(meta.get("classes", len(CLASS_NAMES))), int(meta.get("seed", 0)))
    except ValueError as e:
        raise DataError(f"bad dataset.cfg in {directory}: {e}") from e
