"""Calibration harness for empty-space confidences.

Protocol: per image, sample a fixed number of random test boxes of one area,
state a void confidence for each, observe whether the box really is free of
objects, and bin the (confidence, outcome) pairs into a reliability report
with its expected calibration error.

Two drivability notions are supported: a region is center-drivable when it
contains no object center, and box-drivable when it has no positive-area
overlap with any ground-truth box (edge touching counts as free).

The contrast baseline multiplies per-pixel "free" probabilities over the
region as if pixels were independent; a tiny classifier trained on pixel
coverage labels supplies those probabilities.  Temperature and Platt scaling
are available to recalibrate any record set post hoc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Grid,
    MarkedPointConfig,
    NumericError,
    RngStream,
    TestRegion,
    ValidationError,
    parallel_map,
)
from .marked import box_void_probability
from .marks import MarkMaps, ResidualModel
from .network import Checkpoint, forward, forward_with_cache, grad_from_cache, init
from .pointprocess import IntensityField, center_void_probability, count, region_pixel_mask
from .synth import Dataset

MODES = ("center", "box")

_LOGIT_CLAMP = 13.8
_CONF_EPS = 1e-6


@dataclass(frozen=True)
class CalibrationRecord:
    confidence: float
    outcome: int
    image_id: str
    region: TestRegion

    def __post_init__(self) -> None:
        if not (np.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        if self.outcome not in (0, 1):
            raise ValidationError("outcome must be 0 or 1")


@dataclass(frozen=True)
class ReliabilityReport:
    """Equal-width binned reliability data and its expected calibration error."""

    bin_edges: tuple[float, ...]
    bin_confidence: tuple[float, ...]
    bin_frequency: tuple[float, ...]
    bin_count: tuple[int, ...]
    ece: float
    n_records: int
    meta: dict = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return len(self.bin_count)

    def to_dict(self) -> dict:
        def _clean(values):
            return [None if math.isnan(v) else v for v in values]

        return {
            "n_bins": self.n_bins,
            "binning": "equal-width",
            "bin_edges": list(self.bin_edges),
            "bin_confidence": _clean(self.bin_confidence),
            "bin_frequency": _clean(self.bin_frequency),
            "bin_count": list(self.bin_count),
            "ece": self.ece,
            "n_records": self.n_records,
            **({"meta": self.meta} if self.meta else {}),
        }

    def csv_rows(self) -> list[list]:
        rows = [["bin_lo", "bin_hi", "mean_confidence", "frequency", "count"]]
        for b in range(self.n_bins):
            conf = self.bin_confidence[b]
            freq = self.bin_frequency[b]
            rows.append(
                [
                    self.bin_edges[b],
                    self.bin_edges[b + 1],
                    "" if math.isnan(conf) else repr(conf),
                    "" if math.isnan(freq) else repr(freq),
                    self.bin_count[b],
                ]
            )
        return rows


def reliability_report(
    records: list[CalibrationRecord], n_bins: int = 10, meta: dict | None = None
) -> ReliabilityReport:
    """Bin records into equal-width confidence bins on [0, 1] and compute ECE."""
    if not records:
        raise ValidationError("cannot build a reliability report from zero records")
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    conf = np.array([r.confidence for r in records])
    outcome = np.array([r.outcome for r in records], dtype=np.float64)
    idx = np.clip((conf * n_bins).astype(int), 0, n_bins - 1)

    counts = np.bincount(idx, minlength=n_bins)
    sum_conf = np.bincount(idx, weights=conf, minlength=n_bins)
    sum_out = np.bincount(idx, weights=outcome, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, sum_conf / np.maximum(counts, 1), np.nan)
        mean_out = np.where(counts > 0, sum_out / np.maximum(counts, 1), np.nan)

    n = len(records)
    nonempty = counts > 0
    ece = float(
        np.sum(counts[nonempty] / n * np.abs(mean_out[nonempty] - mean_conf[nonempty]))
    )
    edges = tuple(np.linspace(0.0, 1.0, n_bins + 1))
    return ReliabilityReport(
        bin_edges=edges,
        bin_confidence=tuple(mean_conf),
        bin_frequency=tuple(mean_out),
        bin_count=tuple(int(c) for c in counts),
        ece=ece,
        n_records=n,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# Test boxes and drivability predicates
# ---------------------------------------------------------------------------


def sample_test_boxes(
    rng: np.random.Generator, area_frac: float, k: int = 50
) -> list[TestRegion]:
    """Sample k rectangles of exact area `area_frac` fully inside the unit square.

    The aspect ratio rh/rw is log-uniform on [1/4, 4], clipped to the range
    where the box still fits; the center is uniform over valid placements.
    """
    if not (0.0 < area_frac <= 1.0):
        raise ValidationError(f"area fraction {area_frac} outside (0, 1]")
    a_lo = max(0.25, area_frac)
    a_hi = min(4.0, 1.0 / area_frac)
    if a_lo > a_hi:
        raise ValidationError(f"no feasible aspect ratio for area {area_frac}")
    boxes = []
    for _ in range(k):
        for attempt in range(16):
            aspect = math.exp(rng.uniform(math.log(a_lo), math.log(a_hi)))
            rw = math.sqrt(area_frac / aspect)
            rh = aspect * rw
            if rw <= 1.0 and rh <= 1.0:
                break
        else:
            raise ValidationError(f"could not place a box of area {area_frac}")
        cx = rng.uniform(rw / 2.0, 1.0 - rw / 2.0)
        cy = rng.uniform(rh / 2.0, 1.0 - rh / 2.0)
        boxes.append(TestRegion(cx=cx, cy=cy, rw=rw, rh=rh))
    return boxes


def drivable_center(gt: MarkedPointConfig, region: TestRegion) -> int:
    """1 iff the region contains no ground-truth center point."""
    return 1 if count(gt, region) == 0 else 0


def drivable_box(gt: MarkedPointConfig, region: TestRegion) -> int:
    """1 iff no ground-truth box overlaps the region with positive area.

    Boxes that only share an edge or corner with the region count as free.
    """
    for p in gt.points:
        ow = min(p.x + p.w / 2.0, region.x_hi) - max(p.x - p.w / 2.0, region.x_lo)
        oh = min(p.y + p.h / 2.0, region.y_hi) - max(p.y - p.h / 2.0, region.y_lo)
        if ow > 0.0 and oh > 0.0:
            return 0
    return 1


# ---------------------------------------------------------------------------
# Record collection
# ---------------------------------------------------------------------------


def _resolve_fields(source, item):
    """Source is either the string "true" (use generative truth) or a Checkpoint."""
    if source == "true":
        return item.true_intensity(), item.true_marks()
    if isinstance(source, Checkpoint):
        return forward(source.params, item.input())
    raise ValidationError(f"unknown confidence source {source!r}")


def _resolve_model(source, dataset: Dataset) -> ResidualModel:
    if source == "true":
        if dataset.spec is None:
            raise ValidationError("dataset carries no generator spec; cannot use the true source")
        return dataset.spec.residual_model()
    return source.residual_model()


def collect_records(
    dataset: Dataset,
    source,
    mode: str = "center",
    area_frac: float = 0.01,
    boxes_per_image: int = 50,
    stream: RngStream | None = None,
    threads: int = 1,
) -> list[CalibrationRecord]:
    """Sample test boxes on every image and pair confidences with outcomes."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    stream = stream or RngStream(0)
    model = _resolve_model(source, dataset) if mode == "box" else None

    def per_image(indexed) -> list[CalibrationRecord]:
        idx, item = indexed
        rng = stream.substream(idx).generator()
        regions = sample_test_boxes(rng, area_frac, boxes_per_image)
        gt = item.gt()
        field_, maps = _resolve_fields(source, item)
        records = []
        for region in regions:
            if mode == "center":
                conf = center_void_probability(field_, region)
                outcome = drivable_center(gt, region)
            else:
                conf = box_void_probability(field_, maps, model, region)
                outcome = drivable_box(gt, region)
            records.append(
                CalibrationRecord(
                    confidence=conf, outcome=outcome, image_id=item.image_id, region=region
                )
            )
        return records

    nested = parallel_map(per_image, list(enumerate(dataset.items)), threads)
    return [rec for chunk in nested for rec in chunk]


def calibrate_ppp(
    source,
    dataset: Dataset,
    area_frac: float,
    mode: str = "center",
    boxes_per_image: int = 50,
    n_bins: int = 10,
    stream: RngStream | None = None,
    threads: int = 1,
) -> ReliabilityReport:
    """Run the full protocol and summarize it as a reliability report."""
    records = collect_records(
        dataset,
        source,
        mode=mode,
        area_frac=area_frac,
        boxes_per_image=boxes_per_image,
        stream=stream,
        threads=threads,
    )
    meta = {
        "mode": mode,
        "area_fraction": area_frac,
        "boxes_per_image": boxes_per_image,
        "source": "true" if source == "true" else "checkpoint",
    }
    return reliability_report(records, n_bins=n_bins, meta=meta)


# ---------------------------------------------------------------------------
# Independent-pixel product baseline
# ---------------------------------------------------------------------------


def baseline_product_void(pixel_probs: Grid, region: TestRegion) -> float:
    """Product of per-pixel free probabilities over pixels inside the region.

    This is the independence assumption made explicit; it scales
    exponentially when the region grows (doubling the pixel count squares a
    uniform confidence).
    """
    if pixel_probs.channels != 1:
        raise ValidationError("pixel probability grid must have one channel")
    values = pixel_probs.channel(0)
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValidationError("pixel probabilities must lie in [0, 1]")
    mask = region_pixel_mask(region, pixel_probs.h_px, pixel_probs.w_px)
    if not mask.any():
        return 1.0
    return float(np.prod(values[mask]))


def coverage_labels(gt: MarkedPointConfig, h_px: int, w_px: int) -> np.ndarray:
    """(H, W) 0/1 array: 1 where the pixel center lies inside any ground-truth box."""
    from .core import pixel_centers

    ys, xs = pixel_centers(h_px, w_px)
    out = np.zeros((h_px, w_px))
    for p in gt.points:
        in_x = np.abs(xs - p.x) <= p.w / 2.0
        in_y = np.abs(ys - p.y) <= p.h / 2.0
        out[np.ix_(in_y, in_x)] = 1.0
    return out


@dataclass
class OccupancyTrainConfig:
    epochs: int = 8
    batch_size: int = 8
    learning_rate: float = 1.5
    momentum: float = 0.9
    clip_norm: float = 10.0
    seed: int = 0
    hidden: int = 16
    threads: int = 1


def train_occupancy(dataset: Dataset, config: OccupancyTrainConfig | None = None) -> Checkpoint:
    """Train a per-pixel coverage classifier on the same scenes.

    Reuses the detection architecture; only the first head channel is read,
    as a logit whose sigmoid is the probability that the pixel is covered by
    some object box.  Loss is mean binary cross-entropy over pixels.
    """
    config = config or OccupancyTrainConfig()
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    root = RngStream(config.seed)
    h0 = dataset.items[0].input().h_px
    w0 = dataset.items[0].input().w_px

    mean_cover = np.mean(
        [coverage_labels(it.gt(), h0, w0).mean() for it in dataset.items[: min(64, len(dataset))]]
    )
    mean_cover = min(max(float(mean_cover), 1e-4), 0.5)
    # init() writes ln(mean_count) into the first head bias; passing the odds
    # starts the sigmoid output at the base coverage rate
    params = init(
        root.substream(0).generator(),
        num_classes=dataset.num_classes(),
        mean_count=mean_cover / (1.0 - mean_cover),
        hidden=config.hidden,
    )
    velocity = np.zeros_like(params.flat)
    items = dataset.items
    n = len(items)
    zero_b = np.zeros((h0, w0, 2))
    zero_c = np.zeros((h0, w0, params.arch.num_classes))

    def one(item):
        grid = item.input()
        labels = coverage_labels(item.gt(), grid.h_px, grid.w_px)
        field_, _, cache = forward_with_cache(params, grid)
        z = field_.log_values
        # mean BCE via the stable softplus form
        loss = float(np.mean(np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))))
        d_z = (1.0 / (1.0 + np.exp(-z)) - labels) / z.size
        grad = grad_from_cache(params, cache, d_z, zero_b, zero_c)
        return loss, grad

    for epoch in range(config.epochs):
        order = root.substream(epoch + 1).generator().permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [items[k] for k in order[start : start + config.batch_size]]
            results = parallel_map(one, batch, config.threads)
            grad = np.zeros_like(params.flat)
            for it, (loss, g) in zip(batch, results):
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite baseline loss at epoch {epoch}, image {it.image_id}")
                grad += g
            grad /= len(batch)
            norm = float(np.linalg.norm(grad))
            if norm > config.clip_norm:
                grad *= config.clip_norm / norm
            velocity *= config.momentum
            velocity -= config.learning_rate * grad
            params.flat += velocity

    return Checkpoint(
        params=params,
        sigma=1.0,
        residual_kind="laplace",
        rng_seed=config.seed,
        extra={"kind": "pixel-occupancy-baseline", "epochs": config.epochs},
    )


def occupancy_free_grid(baseline: Checkpoint, input_grid: Grid) -> Grid:
    """Per-pixel free probability 1 - sigmoid(coverage logit)."""
    field_, _ = forward(baseline.params, input_grid)
    q = 1.0 / (1.0 + np.exp(-field_.log_values))
    return Grid.from_values(1.0 - q)


def collect_records_product(
    dataset: Dataset,
    baseline: Checkpoint,
    area_frac: float = 0.01,
    boxes_per_image: int = 50,
    stream: RngStream | None = None,
    threads: int = 1,
) -> list[CalibrationRecord]:
    """Protocol records for the independent-pixel baseline (box drivability)."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    stream = stream or RngStream(0)

    def per_image(indexed) -> list[CalibrationRecord]:
        idx, item = indexed
        rng = stream.substream(idx).generator()
        regions = sample_test_boxes(rng, area_frac, boxes_per_image)
        gt = item.gt()
        free = occupancy_free_grid(baseline, item.input())
        return [
            CalibrationRecord(
                confidence=baseline_product_void(free, region),
                outcome=drivable_box(gt, region),
                image_id=item.image_id,
                region=region,
            )
            for region in regions
        ]

    nested = parallel_map(per_image, list(enumerate(dataset.items)), threads)
    return [rec for chunk in nested for rec in chunk]


# ---------------------------------------------------------------------------
# Post-hoc recalibration
# ---------------------------------------------------------------------------


def _logits_and_outcomes(records: list[CalibrationRecord]) -> tuple[np.ndarray, np.ndarray]:
    conf = np.array([r.confidence for r in records])
    conf = np.clip(conf, _CONF_EPS, 1.0 - _CONF_EPS)
    logits = np.clip(np.log(conf / (1.0 - conf)), -_LOGIT_CLAMP, _LOGIT_CLAMP)
    outcomes = np.array([r.outcome for r in records], dtype=np.float64)
    return logits, outcomes


def _bce(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def _check_fit_records(records: list[CalibrationRecord]) -> None:
    if len(records) < 2:
        raise ValidationError("recalibration needs at least 2 records")
    outcomes = {r.outcome for r in records}
    if outcomes != {0, 1}:
        raise ValidationError("recalibration needs both outcome values present")


def fit_temperature(records: list[CalibrationRecord]) -> float:
    """Temperature T > 0 minimizing the cross-entropy of sigmoid(logit/T).

    Found by golden-section search on [0.05, 20]; T = 1 is the identity map.
    """
    _check_fit_records(records)
    logits, y = _logits_and_outcomes(records)

    def objective(t: float) -> float:
        return _bce(logits / t, y)

    lo, hi = 0.05, 20.0
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = objective(c), objective(d)
    for _ in range(120):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = objective(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = objective(d)
    return float((lo + hi) / 2.0)


def fit_platt(records: list[CalibrationRecord]) -> tuple[float, float]:
    """Affine recalibration (a, b) minimizing the cross-entropy of sigmoid(a*logit + b).

    Damped Newton iteration with a tiny ridge; (1, 0) is the identity map.
    """
    _check_fit_records(records)
    logits, y = _logits_and_outcomes(records)
    a, b = 1.0, 0.0
    loss = _bce(a * logits + b, y)
    for _ in range(60):
        z = a * logits + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = np.array([np.mean((p - y) * logits), np.mean(p - y)])
        wgt = p * (1.0 - p)
        hess = np.array(
            [
                [np.mean(wgt * logits * logits) + 1e-9, np.mean(wgt * logits)],
                [np.mean(wgt * logits), np.mean(wgt) + 1e-9],
            ]
        )
        step = np.linalg.solve(hess, g)
        t = 1.0
        for _ in range(40):
            cand = (a - t * step[0], b - t * step[1])
            cand_loss = _bce(cand[0] * logits + cand[1], y)
            if cand_loss <= loss:
                break
            t *= 0.5
        else:
            break
        a, b = cand
        if abs(cand_loss - loss) < 1e-14 and float(np.abs(t * step).max()) < 1e-10:
            loss = cand_loss
            break
        loss = cand_loss
    return float(a), float(b)


def _transform_confidence(conf: np.ndarray, fn) -> np.ndarray:
    c = np.clip(np.asarray(conf, dtype=np.float64), _CONF_EPS, 1.0 - _CONF_EPS)
    z = np.clip(np.log(c / (1.0 - c)), -_LOGIT_CLAMP, _LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-fn(z)))


def apply_temperature(confidences, t: float):
    """Monotone confidence map sigmoid(logit(c)/T)."""
    if t <= 0.0:
        raise ValidationError("temperature must be positive")
    return _transform_confidence(confidences, lambda z: z / t)


def apply_platt(confidences, a: float, b: float):
    """Monotone (for a > 0) confidence map sigmoid(a*logit(c) + b)."""
    return _transform_confidence(confidences, lambda z: a * z + b)


def recalibrate_records(
    records: list[CalibrationRecord],
    method: str,
    fit_fraction: float = 0.2,
    stream: RngStream | None = None,
) -> dict:
    """Fit a scaling on a held-out fraction and apply it to the remainder.

    Returns the fitted parameters plus reliability reports before and after
    on the evaluation split.
    """
    if method not in ("temp", "platt"):
        raise ValidationError("recalibration method must be 'temp' or 'platt'")
    if not (0.0 < fit_fraction < 1.0):
        raise ValidationError("fit_fraction must lie in (0, 1)")
    stream = stream or RngStream(0)
    order = stream.substream(997).generator().permutation(len(records))
    n_fit = max(int(round(fit_fraction * len(records))), 2)
    fit_set = [records[k] for k in order[:n_fit]]
    eval_set = [records[k] for k in order[n_fit:]]
    if len(eval_set) == 0:
        raise ValidationError("fit fraction leaves no evaluation records")

    if method == "temp":
        t = fit_temperature(fit_set)
        params = {"temperature": t}
        mapper = lambda c: apply_temperature(c, t)
    else:
        a, b = fit_platt(fit_set)
        params = {"a": a, "b": b}
        mapper = lambda c: apply_platt(c, a, b)

    before = reliability_report(eval_set, meta={"split": "eval", "recalibration": "none"})
    mapped = [
        CalibrationRecord(
            confidence=float(mapper(r.confidence)),
            outcome=r.outcome,
            image_id=r.image_id,
            region=r.region,
        )
        for r in eval_set
    ]
    after = reliability_report(mapped, meta={"split": "eval", "recalibration": method, **params})
    return {"method": method, "params": params, "before": before, "after": after}
