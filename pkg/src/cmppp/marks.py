"""Mark distributions: size residual models and the categorical class model.

Sizes (w, h) follow an isotropic residual model around the predicted values,
either bivariate independent Laplace or Gaussian with one shared scale sigma.
Classes follow a softmax over per-pixel logits, independent of the sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc

from .core import Grid, ShapeError, ValidationError

LAPLACE = "laplace"
GAUSSIAN = "gaussian"
RESIDUAL_KINDS = (LAPLACE, GAUSSIAN)

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ResidualModel:
    """Size residual distribution with shared isotropic scale sigma > 0."""

    kind: str
    sigma: float

    def __post_init__(self) -> None:
        if self.kind not in RESIDUAL_KINDS:
            raise ValidationError(f"unknown residual kind {self.kind!r}")
        if not (self.sigma > 0.0 and np.isfinite(self.sigma)):
            raise ValidationError(f"sigma must be positive and finite, got {self.sigma}")


@dataclass(frozen=True)
class MarkMaps:
    """Per-pixel mark feature maps: predicted sizes and class logits."""

    b: Grid
    c: Grid

    def __post_init__(self) -> None:
        if self.b.channels != 2:
            raise ShapeError("size map must have exactly 2 channels (width, height)")
        if self.c.channels < 1:
            raise ShapeError("class logit map needs at least 1 channel")
        if (self.b.h_px, self.b.w_px) != (self.c.h_px, self.c.w_px):
            raise ShapeError("size and class maps must share H x W")

    @property
    def h_px(self) -> int:
        return self.b.h_px

    @property
    def w_px(self) -> int:
        return self.b.w_px

    @property
    def num_classes(self) -> int:
        return self.c.channels

    @property
    def widths(self) -> np.ndarray:
        return self.b.values[:, :, 0]

    @property
    def heights(self) -> np.ndarray:
        return self.b.values[:, :, 1]

    @property
    def logits(self) -> np.ndarray:
        return self.c.values


def log_density(
    model: ResidualModel,
    observed: tuple[float, float] | np.ndarray,
    predicted: tuple[float, float] | np.ndarray,
) -> float:
    """Log density of an observed (w, h) pair around the predicted pair.

    Laplace: -2*ln(2*sigma) - |r|_1 / sigma.
    Gaussian: -ln(2*pi*sigma^2) - |r|_2^2 / (2*sigma^2).
    """
    r = np.asarray(observed, dtype=np.float64) - np.asarray(predicted, dtype=np.float64)
    s = model.sigma
    if model.kind == LAPLACE:
        return float(-2.0 * math.log(2.0 * s) - np.abs(r).sum() / s)
    return float(-math.log(2.0 * math.pi * s * s) - (r * r).sum() / (2.0 * s * s))


def cdf(model: ResidualModel, x, center):
    """Cumulative distribution of one size coordinate centered at `center`.

    Accepts scalars or broadcastable arrays.
    """
    z = (np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)) / model.sigma
    if model.kind == LAPLACE:
        out = np.where(z <= 0.0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))
    else:
        out = 0.5 * (1.0 + erf(z / _SQRT2))
    return out if out.ndim else float(out)


def tail_mass(model: ResidualModel, lower, center):
    """Upper-tail probability P(value >= lower) of one size coordinate.

    The lower bound may be any real number (it is negative whenever the
    query geometry already overlaps the predicted location).
    """
    z = (np.asarray(lower, dtype=np.float64) - np.asarray(center, dtype=np.float64)) / model.sigma
    if model.kind == LAPLACE:
        out = np.where(z <= 0.0, 1.0 - 0.5 * np.exp(np.minimum(z, 0.0)), 0.5 * np.exp(-np.maximum(z, 0.0)))
    else:
        out = 0.5 * erfc(z / _SQRT2)
    return out if out.ndim else float(out)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax along the last axis."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def class_log_prob(c_logits: np.ndarray, class_id: int) -> float:
    """Log softmax probability of `class_id` under the given logits."""
    arr = np.asarray(c_logits, dtype=np.float64)
    if not (0 <= class_id < arr.shape[-1]):
        raise ValidationError(f"class_id {class_id} out of range for {arr.shape[-1]} classes")
    return float(log_softmax(arr)[..., class_id])


def sample_mark(
    model: ResidualModel,
    predicted: tuple[float, float],
    c_logits: np.ndarray,
    rng: np.random.Generator,
) -> tuple[float, float, int]:
    """Draw one (w, h, class) mark: sizes around the prediction, class from the softmax."""
    pw, ph = float(predicted[0]), float(predicted[1])
    if model.kind == LAPLACE:
        w = float(rng.laplace(pw, model.sigma))
        h = float(rng.laplace(ph, model.sigma))
    else:
        w = float(rng.normal(pw, model.sigma))
        h = float(rng.normal(ph, model.sigma))
    probs = softmax(np.asarray(c_logits, dtype=np.float64))
    k = int(rng.choice(probs.size, p=probs))
    return w, h, k


def sample_sizes_batch(
    model: ResidualModel,
    loc_w: np.ndarray,
    loc_h: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized size draws with per-point locations; same law as :func:`sample_mark`."""
    loc_w = np.asarray(loc_w, dtype=np.float64)
    loc_h = np.asarray(loc_h, dtype=np.float64)
    if model.kind == LAPLACE:
        return rng.laplace(loc_w, model.sigma), rng.laplace(loc_h, model.sigma)
    return rng.normal(loc_w, model.sigma), rng.normal(loc_h, model.sigma)
