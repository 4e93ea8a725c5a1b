"""Likelihood, scale estimation, and box-occupancy queries for the marked process.

The negative log-likelihood of a marked configuration decomposes into the
integrated intensity, a center term (-sum of L at ground-truth pixels), a
size regression term, and a classification term.  The constant -1 from the
log relative density is dropped here; it does not affect gradients (see
:func:`cmppp.pointprocess.log_rn_derivative` for the constant-bearing form).

Void probabilities answer "does no predicted bounding box intersect the
query region":  centers inside the region always hit it, centers outside
hit it exactly when both size coordinates exceed the gap to the region, so
their contribution factorizes into two tail masses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Grid, MarkedPointConfig, ShapeError, TestRegion, ValidationError, pixel_centers, pixels_of
from .marks import GAUSSIAN, LAPLACE, MarkMaps, ResidualModel, cdf, log_softmax, tail_mass
from .pointprocess import IntensityField, region_pixel_mask

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    """Additive terms of the marked-process negative log-likelihood.

    The total is formed by summing the four terms in field order, so the
    decomposition identity holds exactly in floating point.
    """

    intensity_integral: float
    center_term: float
    regression_term: float
    classification_term: float
    total: float

    @classmethod
    def from_terms(
        cls, intensity_integral: float, center_term: float, regression_term: float, classification_term: float
    ) -> "LossBreakdown":
        total = intensity_integral + center_term + regression_term + classification_term
        return cls(intensity_integral, center_term, regression_term, classification_term, total)

    def to_dict(self) -> dict:
        return {
            "intensity_integral": self.intensity_integral,
            "center_term": self.center_term,
            "regression_term": self.regression_term,
            "classification_term": self.classification_term,
            "total": self.total,
        }


def _check_shapes(field: IntensityField, maps: MarkMaps) -> None:
    if (field.h_px, field.w_px) != (maps.h_px, maps.w_px):
        raise ShapeError(
            f"intensity grid {field.h_px}x{field.w_px} does not match mark maps {maps.h_px}x{maps.w_px}"
        )


def _gt_pixels(gt: MarkedPointConfig, h_px: int, w_px: int) -> tuple[np.ndarray, np.ndarray]:
    pos = gt.positions()
    return pixels_of(pos[:, 0], pos[:, 1], h_px, w_px)


def nll(
    field: IntensityField, maps: MarkMaps, model: ResidualModel, gt: MarkedPointConfig
) -> LossBreakdown:
    """Negative log-likelihood of a ground-truth configuration under the model."""
    _check_shapes(field, maps)
    h, w = field.h_px, field.w_px
    intensity_integral = field.total_mass

    if not gt.points:
        return LossBreakdown.from_terms(intensity_integral, 0.0, 0.0, 0.0)

    ii, jj = _gt_pixels(gt, h, w)
    center_term = -float(field.log_values[ii, jj].sum())

    sizes = gt.sizes()
    pred = maps.b.values[ii, jj, :]
    r = sizes - pred
    n = len(gt)
    s = model.sigma
    if model.kind == LAPLACE:
        regression_term = 2.0 * n * np.log(2.0 * s) + float(np.abs(r).sum()) / s
    else:
        regression_term = n * np.log(2.0 * np.pi * s * s) + float((r * r).sum()) / (2.0 * s * s)

    logits = maps.logits[ii, jj, :]
    logp = log_softmax(logits)
    classification_term = -float(logp[np.arange(n), gt.classes()].sum())

    return LossBreakdown.from_terms(
        intensity_integral, center_term, float(regression_term), classification_term
    )


def nll_grad(
    field: IntensityField, maps: MarkMaps, model: ResidualModel, gt: MarkedPointConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`nll` w.r.t. every entry of L, B, and C.

    dL is exp(L)/(H*W) minus the per-pixel ground-truth point count; dB and
    dC are nonzero only at ground-truth pixels (Laplace uses the sign
    subgradient, 0 at zero residual).
    """
    _check_shapes(field, maps)
    h, w = field.h_px, field.w_px
    d_log = field.lam / (h * w)
    d_log = d_log.copy()
    d_b = np.zeros((h, w, 2))
    d_c = np.zeros((h, w, maps.num_classes))

    if gt.points:
        ii, jj = _gt_pixels(gt, h, w)
        np.subtract.at(d_log, (ii, jj), 1.0)

        sizes = gt.sizes()
        pred = maps.b.values[ii, jj, :]
        r = sizes - pred
        s = model.sigma
        if model.kind == LAPLACE:
            db_points = -np.sign(r) / s
        else:
            db_points = -r / (s * s)
        np.add.at(d_b, (ii, jj), db_points)

        logits = maps.logits[ii, jj, :]
        probs = np.exp(log_softmax(logits))
        probs[np.arange(len(gt)), gt.classes()] -= 1.0
        np.add.at(d_c, (ii, jj), probs)

    return d_log, d_b, d_c


def estimate_sigma(residuals, kind: str, estimator: str = "mle") -> float:
    """Closed-form scale estimate from size residuals (dw, dh).

    ``estimator="mle"`` is the exact maximizer of the implemented bivariate
    density: Laplace sigma = sum|r|_1 / (2n), Gaussian sigma^2 =
    sum|r|_2^2 / (2n).  ``estimator="mean_deviation"`` divides by n instead
    (the plain mean deviation / mean squared error), kept for comparison.
    The result is floored at 1e-6 to avoid a degenerate zero scale.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValidationError("cannot estimate sigma from an empty residual list")
    if r.ndim != 2 or r.shape[1] != 2:
        raise ShapeError(f"residuals must be (n, 2), got shape {r.shape}")
    if estimator not in ("mle", "mean_deviation"):
        raise ValidationError(f"unknown estimator {estimator!r}")
    n = r.shape[0]
    divisor = 2.0 * n if estimator == "mle" else float(n)
    if kind == LAPLACE:
        sigma = float(np.abs(r).sum()) / divisor
    elif kind == GAUSSIAN:
        sigma = float(np.sqrt((r * r).sum() / divisor))
    else:
        raise ValidationError(f"unknown residual kind {kind!r}")
    return max(sigma, SIGMA_FLOOR)


def box_void_probability(
    field: IntensityField,
    maps: MarkMaps,
    model: ResidualModel,
    region: TestRegion,
    include_region_centers: bool = True,
) -> float:
    """Probability that no predicted bounding box intersects the rectangle.

    The exponent sums exp(L)/(H*W) over pixels inside the region (a center
    there intersects it with any mark) plus, for every outside pixel, the
    product of the two size tail masses above 2*|region center - pixel
    center| - region extent.  Tail lower bounds may be negative and are
    passed to the CDF untruncated.

    ``include_region_centers=False`` drops the interior term, evaluating
    only the exterior integral (an overestimate kept for comparison).
    """
    _check_shapes(field, maps)
    h, w = field.h_px, field.w_px
    mask = region_pixel_mask(region, h, w)
    lam_mass = field.lam / (h * w)

    ys, xs = pixel_centers(h, w)
    lower_w = 2.0 * np.abs(region.cx - xs)[None, :] - region.rw
    lower_h = 2.0 * np.abs(region.cy - ys)[:, None] - region.rh
    tw = tail_mass(model, np.broadcast_to(lower_w, (h, w)), maps.widths)
    th = tail_mass(model, np.broadcast_to(lower_h, (h, w)), maps.heights)

    exponent = float((lam_mass * tw * th)[~mask].sum())
    if include_region_centers:
        exponent += float(lam_mass[mask].sum())
    return float(np.exp(-exponent))


def _mask_row_runs(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Maximal runs of consecutive rows sharing the same bounding column interval.

    Returns (row_lo, row_hi, col_lo, col_hi) with inclusive bounds.  Rows
    whose masked pixels are not contiguous are represented by their bounding
    interval, which is exact for row-convex masks.
    """
    runs: list[tuple[int, int, int, int]] = []
    current: tuple[int, int, int, int] | None = None
    for i in range(mask.shape[0]):
        cols = np.nonzero(mask[i])[0]
        if cols.size == 0:
            if current is not None:
                runs.append(current)
                current = None
            continue
        lo, hi = int(cols[0]), int(cols[-1])
        if current is not None and current[1] == i - 1 and current[2:] == (lo, hi):
            current = (current[0], i, lo, hi)
        else:
            if current is not None:
                runs.append(current)
            current = (i, i, lo, hi)
    if current is not None:
        runs.append(current)
    return runs


def void_probability_general(
    field: IntensityField,
    maps: MarkMaps,
    model: ResidualModel,
    pixel_mask: Grid,
) -> float:
    """Void probability for an arbitrary pixel set given as a 0/1 mask grid.

    The mask is decomposed into maximal rectangles (runs of consecutive rows
    with identical bounding column intervals).  A box centered at an outside
    pixel intersects the set exactly when it intersects one of the run
    rectangles; slicing the height coordinate over the sorted run thresholds
    turns that union into a sum of CDF differences times width tail masses.
    For a single-run (rectangular) mask this reduces to
    :func:`box_void_probability` on the equivalent region.

    An empty mask returns 1.0.
    """
    _check_shapes(field, maps)
    if pixel_mask.channels != 1:
        raise ShapeError("pixel mask must be a one-channel grid")
    if (pixel_mask.h_px, pixel_mask.w_px) != (field.h_px, field.w_px):
        raise ShapeError("pixel mask shape does not match the intensity grid")
    raw = pixel_mask.channel(0)
    if not np.isin(raw, (0.0, 1.0)).all():
        raise ValidationError("pixel mask values must be exactly 0 or 1")
    mask = raw.astype(bool)
    if not mask.any():
        return 1.0

    h, w = field.h_px, field.w_px
    lam_mass = field.lam / (h * w)
    runs = _mask_row_runs(mask)

    ys, xs = pixel_centers(h, w)
    a_stack = np.empty((len(runs), h, w))
    b_stack = np.empty((len(runs), h, w))
    for k, (r0, r1, c0, c1) in enumerate(runs):
        run_cx = (c0 + c1 + 1) / (2.0 * w)
        run_cy = (r0 + r1 + 1) / (2.0 * h)
        run_rw = (c1 - c0 + 1) / w
        run_rh = (r1 - r0 + 1) / h
        a_stack[k] = np.broadcast_to(2.0 * np.abs(run_cx - xs)[None, :] - run_rw, (h, w))
        b_stack[k] = np.broadcast_to(2.0 * np.abs(run_cy - ys)[:, None] - run_rh, (h, w))

    order = np.argsort(b_stack, axis=0, kind="stable")
    b_sorted = np.take_along_axis(b_stack, order, axis=0)
    a_sorted = np.take_along_axis(a_stack, order, axis=0)
    a_cummin = np.minimum.accumulate(a_sorted, axis=0)

    f_h = cdf(model, b_sorted, maps.heights[None, :, :])
    t_w = tail_mass(model, a_cummin, maps.widths[None, :, :])
    p_hit = (1.0 - f_h[-1]) * t_w[-1]
    if len(runs) > 1:
        p_hit = p_hit + (np.diff(f_h, axis=0) * t_w[:-1]).sum(axis=0)

    exponent = float(lam_mass[mask].sum()) + float((lam_mass * p_hit)[~mask].sum())
    return float(np.exp(-exponent))
