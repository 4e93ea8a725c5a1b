"""Maximum-likelihood training of the (L, B, C) network on synthetic scenes.

Plain momentum SGD on the mean per-image negative log-likelihood, with
global gradient-norm clipping.  The size scale sigma does not influence the
size-map gradients up to a constant factor, so training runs at unit scale
and the maximum-likelihood sigma is estimated once afterwards from the
pooled regression residuals and embedded in the checkpoint.

Batches come from a seeded shuffle per epoch; per-image gradients are
reduced in batch order, so runs are bit-reproducible for a fixed
configuration regardless of worker thread count.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import NumericError, RngStream, ValidationError, parallel_map
from .marked import LossBreakdown, estimate_sigma, nll, nll_grad
from .marks import RESIDUAL_KINDS, ResidualModel
from .network import Checkpoint, ConvNetParams, forward_with_cache, grad_from_cache, init, save_checkpoint
from .synth import Dataset, load_dataset


@dataclass
class TrainConfig:
    data: str | None = None
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 0.02
    momentum: float = 0.9
    clip_norm: float = 10.0
    seed: int = 0
    residual_kind: str = "laplace"
    checkpoint_interval: int = 0
    hidden: int = 16
    threads: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValidationError("epochs, batch_size, and hidden must be >= 1")
        if self.learning_rate < 0.0 or self.momentum < 0.0 or self.clip_norm <= 0.0:
            raise ValidationError("learning_rate/momentum must be >= 0, clip_norm > 0")
        if self.residual_kind not in RESIDUAL_KINDS:
            raise ValidationError(f"unknown residual kind {self.residual_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass(frozen=True)
class LogRow:
    epoch: int
    step: int
    intensity_integral: float
    center_term: float
    regression_term: float
    classification_term: float
    total: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[LogRow] = field(default_factory=list)


LOG_COLUMNS = (
    "epoch",
    "step",
    "intensity_integral",
    "center_term",
    "regression_term",
    "classification_term",
    "total",
)


def write_training_log(log: list[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow(
                [
                    row.epoch,
                    row.step,
                    repr(row.intensity_integral),
                    repr(row.center_term),
                    repr(row.regression_term),
                    repr(row.classification_term),
                    repr(row.total),
                ]
            )


def _image_loss_and_grad(params: ConvNetParams, item, model: ResidualModel):
    grid = item.input()
    gt = item.gt()
    field_, maps, cache = forward_with_cache(params, grid)
    breakdown = nll(field_, maps, model, gt)
    d_log, d_b, d_c = nll_grad(field_, maps, model, gt)
    grad = grad_from_cache(params, cache, d_log, d_b, d_c)
    return breakdown, grad


def _check_finite(breakdown: LossBreakdown, epoch: int, image_id: str) -> None:
    for name, value in breakdown.to_dict().items():
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss term {name}={value} at epoch {epoch}, image {image_id}"
            )


def train(config: TrainConfig, dataset: Dataset | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Run SGD training; returns the final checkpoint and per-step loss log.

    When ``out_dir`` is given, the checkpoint and CSV log are written there
    (plus intermediate checkpoints every ``checkpoint_interval`` epochs).
    """
    if dataset is None:
        if config.data is None:
            raise ValidationError("no dataset: provide TrainConfig.data or a Dataset")
        dataset = load_dataset(config.data)
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")

    num_classes = dataset.num_classes()
    mean_count = max(dataset.mean_object_count(), 0.1)
    root = RngStream(config.seed)
    params = init(
        root.substream(0).generator(),
        num_classes=num_classes,
        mean_count=mean_count,
        hidden=config.hidden,
    )
    velocity = np.zeros_like(params.flat)
    train_model = ResidualModel(kind=config.residual_kind, sigma=1.0)

    items = dataset.items
    n = len(items)
    log: list[LogRow] = []
    step = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        order = root.substream(epoch + 1).generator().permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [items[k] for k in order[start : start + config.batch_size]]
            results = parallel_map(
                lambda it: _image_loss_and_grad(params, it, train_model), batch, config.threads
            )
            grad = np.zeros_like(params.flat)
            terms = np.zeros(5)
            for it, (breakdown, g) in zip(batch, results):
                _check_finite(breakdown, epoch, it.image_id)
                grad += g
                terms += [
                    breakdown.intensity_integral,
                    breakdown.center_term,
                    breakdown.regression_term,
                    breakdown.classification_term,
                    breakdown.total,
                ]
            grad /= len(batch)
            terms /= len(batch)

            norm = float(np.linalg.norm(grad))
            if norm > config.clip_norm:
                grad *= config.clip_norm / norm
            velocity *= config.momentum
            velocity -= config.learning_rate * grad
            params.flat += velocity

            log.append(LogRow(epoch, step, *(float(t) for t in terms)))
            step += 1

        if out is not None and config.checkpoint_interval > 0 and (epoch + 1) % config.checkpoint_interval == 0:
            interim = Checkpoint(
                params=params.copy(),
                sigma=1.0,
                residual_kind=config.residual_kind,
                rng_seed=config.seed,
                extra={"epoch": epoch + 1, "final": False},
            )
            save_checkpoint(interim, out / f"checkpoint_epoch{epoch + 1:04d}.ckpt")

    sigma = fit_sigma(params, dataset, config.residual_kind, threads=config.threads)
    checkpoint = Checkpoint(
        params=params,
        sigma=sigma,
        residual_kind=config.residual_kind,
        rng_seed=config.seed,
        extra={
            "epochs": config.epochs,
            "steps": step,
            "n_images": n,
            "mean_count": mean_count,
            "num_classes": num_classes,
            "final": True,
        },
    )
    result = TrainResult(checkpoint=checkpoint, log=log)
    if out is not None:
        save_checkpoint(checkpoint, out / "checkpoint.ckpt")
        write_training_log(log, out / "training_log.csv")
        (out / "train_summary.json").write_text(
            json.dumps(
                {
                    "config": config.to_dict(),
                    "rng": root.metadata(),
                    "sigma": sigma,
                    "final_total": log[-1].total if log else None,
                },
                indent=1,
            ),
            encoding="utf-8",
        )
    return result


def collect_residuals(params: ConvNetParams, dataset: Dataset, threads: int = 1) -> np.ndarray:
    """(n, 2) size residuals (observed - predicted) at ground-truth pixels."""
    from .network import forward

    def one(item) -> np.ndarray:
        gt = item.gt()
        if not gt.points:
            return np.zeros((0, 2))
        _, maps = forward(params, item.input())
        pos = gt.positions()
        from .core import pixels_of

        ii, jj = pixels_of(pos[:, 0], pos[:, 1], maps.h_px, maps.w_px)
        return gt.sizes() - maps.b.values[ii, jj, :]

    chunks = parallel_map(one, dataset.items, threads)
    if not chunks:
        return np.zeros((0, 2))
    return np.concatenate(chunks, axis=0)


def fit_sigma(params: ConvNetParams, dataset: Dataset, kind: str, threads: int = 1) -> float:
    """Post-hoc maximum-likelihood scale from all training residuals."""
    residuals = collect_residuals(params, dataset, threads=threads)
    if residuals.shape[0] == 0:
        return 1.0
    return estimate_sigma(residuals, kind)


def eval_loss(checkpoint: Checkpoint, dataset: Dataset, threads: int = 1) -> LossBreakdown:
    """Mean per-image loss breakdown under the checkpoint's residual model."""
    from .network import forward

    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    model = checkpoint.residual_model()

    def one(item) -> LossBreakdown:
        field_, maps = forward(checkpoint.params, item.input())
        return nll(field_, maps, model, item.gt())

    parts = parallel_map(one, dataset.items, threads)
    n = len(parts)
    return LossBreakdown.from_terms(
        sum(p.intensity_integral for p in parts) / n,
        sum(p.center_term for p in parts) / n,
        sum(p.regression_term for p in parts) / n,
        sum(p.classification_term for p in parts) / n,
    )
