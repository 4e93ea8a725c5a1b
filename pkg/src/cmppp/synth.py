"""Synthetic scene generator with a known generative intensity and mark law.

Scenes are built from the same factorized model the toolkit fits: a smooth
random log-intensity normalized to a target mean object count, smooth
per-pixel size means blended from per-class priors through a spatial class
field, and a shared Laplace size scale.  Objects render as filled rectangles
in class-specific colors over a textured background with optional gray
clutter rectangles that carry no ground truth.

Because the generator returns its true intensity and mark maps, calibration
and void-probability formulas can be tested against the exact data law.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .core import (
    FormatError,
    Grid,
    MarkedPoint,
    MarkedPointConfig,
    RngStream,
    ValidationError,
    pixel_centers,
    pixels_of,
    read_config,
    read_grid,
    write_config,
    write_grid,
)
from .marks import MarkMaps, ResidualModel, softmax
from .pointprocess import IntensityField, sample

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "cmppp-dataset-v1"

CLASS_COLORS = (
    (0.85, 0.25, 0.20),
    (0.20, 0.78, 0.30),
    (0.25, 0.35, 0.90),
    (0.90, 0.80, 0.20),
    (0.70, 0.25, 0.80),
)
CLUTTER_COLOR = (0.62, 0.62, 0.58)
BACKGROUND_COLOR = (0.45, 0.46, 0.50)


@dataclass(frozen=True)
class ClassSizePrior:
    """Mean box width/height for one class."""

    mean_w: float
    mean_h: float

    def __post_init__(self) -> None:
        if not (self.mean_w > 0.0 and self.mean_h > 0.0):
            raise ValidationError("size prior means must be positive")


DEFAULT_SIZE_PRIORS = (
    ClassSizePrior(0.10, 0.13),
    ClassSizePrior(0.17, 0.11),
    ClassSizePrior(0.12, 0.18),
)


def default_size_priors(num_classes: int) -> tuple[ClassSizePrior, ...]:
    base = DEFAULT_SIZE_PRIORS
    return tuple(base[k % len(base)] for k in range(num_classes))


@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters for one synthetic dataset."""

    h_px: int = 64
    w_px: int = 64
    num_classes: int = 3
    mean_count: float = 5.0
    size_priors: tuple[ClassSizePrior, ...] | None = None
    size_scale: float = 0.015
    texture_strength: float = 0.12
    noise_level: float = 0.05
    clutter: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mean_count <= 0.0:
            raise ValidationError("mean_count must be positive")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.size_scale <= 0.0:
            raise ValidationError("size_scale must be positive")
        priors = self.size_priors
        if priors is None:
            priors = default_size_priors(self.num_classes)
        else:
            priors = tuple(
                p if isinstance(p, ClassSizePrior) else ClassSizePrior(*p) for p in priors
            )
            if len(priors) != self.num_classes:
                raise ValidationError("need one size prior per class")
        object.__setattr__(self, "size_priors", priors)

    def to_dict(self) -> dict:
        return {
            "h_px": self.h_px,
            "w_px": self.w_px,
            "num_classes": self.num_classes,
            "mean_count": self.mean_count,
            "size_priors": [[p.mean_w, p.mean_h] for p in self.size_priors],
            "size_scale": self.size_scale,
            "texture_strength": self.texture_strength,
            "noise_level": self.noise_level,
            "clutter": self.clutter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        kwargs = dict(data)
        if kwargs.get("size_priors") is not None:
            kwargs["size_priors"] = tuple(ClassSizePrior(*p) for p in kwargs["size_priors"])
        return cls(**kwargs)

    def residual_model(self) -> ResidualModel:
        """Residual model matching the generative size law."""
        return ResidualModel(kind="laplace", sigma=self.size_scale)


@dataclass(frozen=True)
class Scene:
    """One generated sample plus its generative truth."""

    image_id: str
    input_grid: Grid
    gt: MarkedPointConfig
    true_intensity: IntensityField
    true_marks: MarkMaps


def _bump_field(
    rng: np.random.Generator,
    h: int,
    w: int,
    n_lo: int,
    n_hi: int,
    width_lo: float,
    width_hi: float,
    amp_lo: float,
    amp_hi: float,
) -> np.ndarray:
    """Sum of random isotropic Gaussian bumps on the unit square."""
    ys, xs = pixel_centers(h, w)
    yy = ys[:, None]
    xx = xs[None, :]
    out = np.zeros((h, w))
    n = int(rng.integers(n_lo, n_hi + 1))
    for _ in range(n):
        cx, cy = rng.random(), rng.random()
        s = rng.uniform(width_lo, width_hi)
        amp = rng.uniform(amp_lo, amp_hi)
        out += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * s * s))
    return out


def _fill_rect(img: np.ndarray, x: float, y: float, w: float, h: float, color) -> None:
    h_px, w_px, _ = img.shape
    i0 = max(0, int(np.floor((y - h / 2.0) * h_px)))
    i1 = min(h_px, int(np.ceil((y + h / 2.0) * h_px)))
    j0 = max(0, int(np.floor((x - w / 2.0) * w_px)))
    j1 = min(w_px, int(np.ceil((x + w / 2.0) * w_px)))
    if i1 <= i0:
        i1 = min(h_px, i0 + 1)
    if j1 <= j0:
        j1 = min(w_px, j0 + 1)
    img[i0:i1, j0:j1] = color


def generate_scene(spec: SceneSpec, rng: np.random.Generator, image_id: str = "scene") -> Scene:
    """Draw one scene: intensity, ground truth, rendered input, and true maps."""
    h, w = spec.h_px, spec.w_px

    raw = _bump_field(rng, h, w, 3, 6, 0.06, 0.20, 0.5, 1.5) + 0.02
    mass = raw.sum() / (h * w)
    lam = raw * (spec.mean_count / mass)
    true_intensity = IntensityField.from_log_intensity(np.log(lam))

    # fairly sharp class fields: the dominant class (and so the size regime)
    # is locally unambiguous, with soft transitions at region borders
    logits = np.stack(
        [_bump_field(rng, h, w, 2, 3, 0.20, 0.45, 2.5, 6.0) for _ in range(spec.num_classes)],
        axis=2,
    )
    probs = softmax(logits)
    mean_w = sum(probs[:, :, k] * spec.size_priors[k].mean_w for k in range(spec.num_classes))
    mean_h = sum(probs[:, :, k] * spec.size_priors[k].mean_h for k in range(spec.num_classes))
    true_marks = MarkMaps(
        b=Grid.from_values(np.stack([mean_w, mean_h], axis=2)),
        c=Grid.from_values(logits),
    )

    centers = sample(true_intensity, rng, image_id=image_id)
    points = []
    for p in centers.points:
        i, j = pixels_of(np.array([p.x]), np.array([p.y]), h, w)
        i, j = int(i[0]), int(j[0])
        bw = max(float(rng.laplace(mean_w[i, j], spec.size_scale)), 0.0)
        bh = max(float(rng.laplace(mean_h[i, j], spec.size_scale)), 0.0)
        k = int(rng.choice(spec.num_classes, p=softmax(logits[i, j])))
        points.append(MarkedPoint(x=p.x, y=p.y, w=bw, h=bh, class_id=k))
    gt = MarkedPointConfig(image_id=image_id, points=tuple(points))

    img = np.empty((h, w, 3))
    img[:] = BACKGROUND_COLOR
    texture = _bump_field(rng, h, w, 3, 5, 0.10, 0.35, -1.0, 1.0)
    img += (texture * spec.texture_strength)[:, :, None] * rng.uniform(0.5, 1.0, size=3)

    for p in gt.points:
        color = np.array(CLASS_COLORS[p.class_id % len(CLASS_COLORS)])
        color = color + rng.uniform(-0.04, 0.04, size=3)
        _fill_rect(img, p.x, p.y, p.w, p.h, color)

    # clutter rectangles render on top of objects: they carry no ground
    # truth, and partially occluded object edges keep center inference from
    # becoming trivially sharp
    n_clutter = int(rng.poisson(spec.clutter))
    for _ in range(n_clutter):
        cx, cy = rng.random(), rng.random()
        cw, ch = rng.uniform(0.08, 0.22), rng.uniform(0.08, 0.22)
        jitter = rng.uniform(-0.06, 0.06, size=3)
        _fill_rect(img, cx, cy, cw, ch, np.array(CLUTTER_COLOR) + jitter)

    img += rng.normal(0.0, spec.noise_level, size=(h, w, 3))
    np.clip(img, 0.0, 1.0, out=img)

    return Scene(
        image_id=image_id,
        input_grid=Grid.from_values(img),
        gt=gt,
        true_intensity=true_intensity,
        true_marks=true_marks,
    )


def stream_scenes(spec: SceneSpec, n_images: int, start_index: int = 0) -> Iterator[Scene]:
    """Generate scenes lazily; scene index i always uses RNG substream i."""
    stream = RngStream(spec.seed)
    for idx in range(start_index, start_index + n_images):
        rng = stream.substream(idx).generator()
        yield generate_scene(spec, rng, image_id=f"img_{idx:05d}")


# ---------------------------------------------------------------------------
# Datasets: file-backed and in-memory views share one item interface
# ---------------------------------------------------------------------------


class DatasetItem:
    """Lazy accessors for one (input, ground truth, generative truth) sample."""

    def __init__(
        self,
        image_id: str,
        input_loader: Callable[[], Grid],
        gt_loader: Callable[[], MarkedPointConfig],
        intensity_loader: Callable[[], IntensityField] | None = None,
        marks_loader: Callable[[], MarkMaps] | None = None,
    ):
        self.image_id = image_id
        self._input = input_loader
        self._gt = gt_loader
        self._intensity = intensity_loader
        self._marks = marks_loader

    def input(self) -> Grid:
        return self._input()

    def gt(self) -> MarkedPointConfig:
        return self._gt()

    @property
    def has_truth(self) -> bool:
        return self._intensity is not None and self._marks is not None

    def true_intensity(self) -> IntensityField:
        if self._intensity is None:
            raise ValidationError(f"{self.image_id}: dataset has no generative truth")
        return self._intensity()

    def true_marks(self) -> MarkMaps:
        if self._marks is None:
            raise ValidationError(f"{self.image_id}: dataset has no generative truth")
        return self._marks()


@dataclass
class Dataset:
    items: list[DatasetItem]
    spec: SceneSpec | None = None
    manifest: dict | None = None
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def mean_object_count(self) -> float:
        if not self.items:
            return 0.0
        return float(np.mean([len(it.gt()) for it in self.items]))

    def num_classes(self) -> int:
        if self.spec is not None:
            return self.spec.num_classes
        top = 0
        for it in self.items:
            for p in it.gt().points:
                top = max(top, p.class_id + 1)
        return max(top, 1)


def _marks_to_grid(maps: MarkMaps) -> Grid:
    stacked = np.concatenate([maps.b.values, maps.c.values], axis=2)
    return Grid.from_values(stacked)


def _marks_from_grid(grid: Grid) -> MarkMaps:
    if grid.channels < 3:
        raise FormatError("mark grid needs at least 3 channels (2 sizes + classes)")
    return MarkMaps(
        b=Grid.from_values(grid.values[:, :, :2]),
        c=Grid.from_values(grid.values[:, :, 2:]),
    )


def generate_dataset(spec: SceneSpec, n_images: int, out_dir: str | Path) -> dict:
    """Write n_images scenes plus a manifest; returns the manifest mapping.

    Each image contributes four files (input grid, ground-truth config, true
    intensity grid, true mark grid); the manifest is one more.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = RngStream(spec.seed)
    entries = []
    for idx in range(n_images):
        rng = stream.substream(idx).generator()
        image_id = f"img_{idx:05d}"
        scene = generate_scene(spec, rng, image_id=image_id)
        names = {
            "input": f"{image_id}.input.grid",
            "config": f"{image_id}.gt.json",
            "true_intensity": f"{image_id}.intensity.grid",
            "true_marks": f"{image_id}.marks.grid",
        }
        write_grid(scene.input_grid, out / names["input"])
        write_config(scene.gt, out / names["config"])
        write_grid(scene.true_intensity.grid, out / names["true_intensity"])
        write_grid(_marks_to_grid(scene.true_marks), out / names["true_marks"])
        entries.append({"image_id": image_id, **names})
    manifest = {
        "format": DATASET_FORMAT,
        "spec": spec.to_dict(),
        "rng": stream.metadata(),
        "n_images": n_images,
        "images": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    """Open a dataset directory (or its manifest path) written by :func:`generate_dataset`."""
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    if not manifest_path.exists():
        raise FormatError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{manifest_path}: unknown dataset format {manifest.get('format')!r}")
    root = manifest_path.parent
    items = []
    for entry in manifest["images"]:
        items.append(_file_item(root, entry))
    spec = SceneSpec.from_dict(manifest["spec"]) if "spec" in manifest else None
    return Dataset(items=items, spec=spec, manifest=manifest, root=root)


def _file_item(root: Path, entry: dict) -> DatasetItem:
    def _load_marks() -> MarkMaps:
        return _marks_from_grid(read_grid(root / entry["true_marks"]))

    return DatasetItem(
        image_id=entry["image_id"],
        input_loader=lambda: read_grid(root / entry["input"]),
        gt_loader=lambda: read_config(root / entry["config"]),
        intensity_loader=lambda: IntensityField(read_grid(root / entry["true_intensity"])),
        marks_loader=_load_marks,
    )


def memory_dataset(spec: SceneSpec, n_images: int, keep_truth: bool = False) -> Dataset:
    """Generate a dataset held in memory (inputs cached as float32).

    With ``keep_truth=False`` only inputs and ground truth are retained,
    which is what training needs; calibration against the generative truth
    should stream scenes instead.
    """
    items = []
    for scene in stream_scenes(spec, n_images):
        input_f32 = scene.input_grid.values.astype(np.float32)
        gt = scene.gt

        def _make_input(arr=input_f32):
            return Grid.from_values(arr.astype(np.float64))

        if keep_truth:
            log_f32 = scene.true_intensity.log_values.astype(np.float32)
            marks_f32 = _marks_to_grid(scene.true_marks).values.astype(np.float32)

            def _make_intensity(arr=log_f32):
                return IntensityField.from_log_intensity(arr.astype(np.float64))

            def _make_marks(arr=marks_f32):
                return _marks_from_grid(Grid.from_values(arr.astype(np.float64)))

        else:
            _make_intensity = None
            _make_marks = None

        items.append(
            DatasetItem(
                image_id=scene.image_id,
                input_loader=_make_input,
                gt_loader=lambda cfg=gt: cfg,
                intensity_loader=_make_intensity,
                marks_loader=_make_marks,
            )
        )
    return Dataset(items=items, spec=spec)
