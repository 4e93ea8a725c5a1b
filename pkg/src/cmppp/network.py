"""Small dilated convolutional network with hand-written forward/backward.

Five 3x3 conv layers (dilations 1, 2, 4, 8, 1, zero padding, ReLU) keep full
resolution, followed by a 1x1 head emitting 1 + 2 + num_classes channels:
the log-intensity L, the size map B, and the class logits C.  The dilation
schedule gives a 33-pixel receptive field, enough to see whole objects on
64x64 inputs without pooling.

All parameters live in one flat float64 vector so optimizers and finite
difference checks can treat the model as a plain function of that vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CHECKPOINT_MAGIC, FormatError, Grid, PHILOX_ID, ShapeError, ValidationError
from .marks import MarkMaps, ResidualModel
from .pointprocess import IntensityField


@dataclass(frozen=True)
class ConvNetArch:
    """Architecture hyperparameters; the parameter count is a pure function of these."""

    num_classes: int
    in_channels: int = 3
    hidden: int = 16
    dilations: tuple[int, ...] = (1, 2, 4, 8, 1)
    kernel: int = 3

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.kernel % 2 != 1:
            raise ValidationError("kernel size must be odd")
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    @property
    def out_channels(self) -> int:
        return 3 + self.num_classes

    def layer_dims(self) -> list[tuple[int, int, int, int]]:
        """Per-layer (kernel, dilation, cin, cout), head last with kernel 1."""
        dims = []
        cin = self.in_channels
        for d in self.dilations:
            dims.append((self.kernel, d, cin, self.hidden))
            cin = self.hidden
        dims.append((1, 1, self.hidden, self.out_channels))
        return dims

    def param_count(self) -> int:
        return sum(k * k * cin * cout + cout for k, _, cin, cout in self.layer_dims())

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "hidden": self.hidden,
            "dilations": list(self.dilations),
            "kernel": self.kernel,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConvNetArch":
        return cls(
            num_classes=int(data["num_classes"]),
            in_channels=int(data["in_channels"]),
            hidden=int(data["hidden"]),
            dilations=tuple(data["dilations"]),
            kernel=int(data["kernel"]),
        )


@dataclass
class ConvNetParams:
    """Flat float64 parameter vector plus its architecture."""

    arch: ConvNetArch
    flat: np.ndarray

    def __post_init__(self) -> None:
        self.flat = np.asarray(self.flat, dtype=np.float64)
        expected = self.arch.param_count()
        if self.flat.shape != (expected,):
            raise ShapeError(f"parameter vector has shape {self.flat.shape}, expected ({expected},)")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (kernel, bias) views into the flat vector."""
        out = []
        offset = 0
        for k, _, cin, cout in self.arch.layer_dims():
            wsize = k * k * cin * cout
            kern = self.flat[offset : offset + wsize].reshape(k, k, cin, cout)
            offset += wsize
            bias = self.flat[offset : offset + cout]
            offset += cout
            out.append((kern, bias))
        return out

    def copy(self) -> "ConvNetParams":
        return ConvNetParams(self.arch, self.flat.copy())


def init(
    rng: np.random.Generator,
    num_classes: int,
    mean_count: float = 1.0,
    hidden: int = 16,
    in_channels: int = 3,
    dilations: tuple[int, ...] = (1, 2, 4, 8, 1),
) -> ConvNetParams:
    """Fan-in-scaled uniform initialization.

    Head weights are scaled down and the log-intensity bias starts at
    ln(mean_count), so the initial expected count matches the training-set
    mean object count up to activation noise.
    """
    if not mean_count > 0.0:
        raise ValidationError("mean_count must be positive")
    arch = ConvNetArch(num_classes=num_classes, in_channels=in_channels, hidden=hidden, dilations=dilations)
    dims = arch.layer_dims()
    chunks = []
    for idx, (k, _, cin, cout) in enumerate(dims):
        fan_in = k * k * cin
        limit = math.sqrt(6.0 / fan_in)
        if idx == len(dims) - 1:
            limit *= 0.1
        chunks.append(rng.uniform(-limit, limit, size=k * k * cin * cout))
        bias = np.zeros(cout)
        if idx == len(dims) - 1:
            bias[0] = math.log(mean_count)
        chunks.append(bias)
    return ConvNetParams(arch, np.concatenate(chunks))


# ---------------------------------------------------------------------------
# Convolution primitives
# ---------------------------------------------------------------------------


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    h, w, c = x.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    xp[pad : pad + h, pad : pad + w] = x
    return xp


def _conv_forward(x: np.ndarray, kern: np.ndarray, bias: np.ndarray, dilation: int):
    h, w, _ = x.shape
    k = kern.shape[0]
    xp = _pad(x, dilation * (k // 2))
    out = np.empty((h, w, kern.shape[3]))
    out[:] = bias
    for ki in range(k):
        for kj in range(k):
            out += xp[ki * dilation : ki * dilation + h, kj * dilation : kj * dilation + w] @ kern[ki, kj]
    return out, xp


def _conv_backward(xp: np.ndarray, kern: np.ndarray, dilation: int, d_out: np.ndarray):
    h, w, _ = d_out.shape
    k = kern.shape[0]
    pad = dilation * (k // 2)
    d_kern = np.empty_like(kern)
    d_bias = d_out.sum(axis=(0, 1))
    d_xp = np.zeros_like(xp)
    flat = d_out.reshape(h * w, -1)
    for ki in range(k):
        for kj in range(k):
            sl = xp[ki * dilation : ki * dilation + h, kj * dilation : kj * dilation + w]
            d_kern[ki, kj] = sl.reshape(h * w, -1).T @ flat
            d_xp[ki * dilation : ki * dilation + h, kj * dilation : kj * dilation + w] += d_out @ kern[ki, kj].T
    d_x = d_xp[pad : pad + h, pad : pad + w] if pad else d_xp
    return d_kern, d_bias, d_x


def _forward_cached(params: ConvNetParams, x: np.ndarray):
    """Run the network, keeping padded inputs and pre-activations for backward."""
    layers = params.layers()
    dims = params.arch.layer_dims()
    cache = []
    a = x
    for idx in range(len(layers) - 1):
        kern, bias = layers[idx]
        _, dilation, _, _ = dims[idx]
        z, xp = _conv_forward(a, kern, bias, dilation)
        cache.append((xp, z))
        a = np.maximum(z, 0.0)
    kern, bias = layers[-1]
    out, xp = _conv_forward(a, kern, bias, 1)
    cache.append((xp, out))
    return out, cache


def _split_head(arch: ConvNetArch, out: np.ndarray) -> tuple[IntensityField, MarkMaps]:
    log_intensity = out[:, :, 0]
    b = out[:, :, 1:3]
    c = out[:, :, 3:]
    return (
        IntensityField.from_log_intensity(log_intensity),
        MarkMaps(b=Grid.from_values(b), c=Grid.from_values(c)),
    )


def forward(params: ConvNetParams, input_grid: Grid) -> tuple[IntensityField, MarkMaps]:
    """Deterministic forward pass: input features to (L, B, C) maps."""
    if input_grid.channels != params.arch.in_channels:
        raise ShapeError(
            f"input has {input_grid.channels} channels, model expects {params.arch.in_channels}"
        )
    out, _ = _forward_cached(params, input_grid.values)
    return _split_head(params.arch, out)


def backward(
    params: ConvNetParams,
    input_grid: Grid,
    d_log_intensity: np.ndarray,
    d_b: np.ndarray,
    d_c: np.ndarray,
) -> np.ndarray:
    """Exact reverse-mode gradient of forward w.r.t. the flat parameter vector.

    Upstream gradients are given on the three output maps; activations are
    recomputed internally, so the call is pure.
    """
    if input_grid.channels != params.arch.in_channels:
        raise ShapeError(
            f"input has {input_grid.channels} channels, model expects {params.arch.in_channels}"
        )
    h, w = input_grid.h_px, input_grid.w_px
    out_ch = params.arch.out_channels
    d_out = np.empty((h, w, out_ch))
    d_out[:, :, 0] = d_log_intensity
    d_out[:, :, 1:3] = d_b
    d_out[:, :, 3:] = d_c
    _, cache = _forward_cached(params, input_grid.values)
    return _backward_from_cache(params, cache, d_out)


def _backward_from_cache(params: ConvNetParams, cache, d_out: np.ndarray) -> np.ndarray:
    layers = params.layers()
    dims = params.arch.layer_dims()
    grads: list[np.ndarray | None] = [None] * (2 * len(layers))

    xp, _ = cache[-1]
    kern, _ = layers[-1]
    d_kern, d_bias, d_a = _conv_backward(xp, kern, 1, d_out)
    grads[-2], grads[-1] = d_kern.reshape(-1), d_bias

    for idx in range(len(layers) - 2, -1, -1):
        xp, z = cache[idx]
        kern, _ = layers[idx]
        _, dilation, _, _ = dims[idx]
        d_z = d_a * (z > 0.0)
        d_kern, d_bias, d_a = _conv_backward(xp, kern, dilation, d_z)
        grads[2 * idx], grads[2 * idx + 1] = d_kern.reshape(-1), d_bias

    return np.concatenate(grads)


def forward_with_cache(params: ConvNetParams, input_grid: Grid):
    """Forward pass returning outputs plus an opaque cache for :func:`grad_from_cache`."""
    if input_grid.channels != params.arch.in_channels:
        raise ShapeError(
            f"input has {input_grid.channels} channels, model expects {params.arch.in_channels}"
        )
    out, cache = _forward_cached(params, input_grid.values)
    field, maps = _split_head(params.arch, out)
    return field, maps, cache


def grad_from_cache(
    params: ConvNetParams, cache, d_log_intensity: np.ndarray, d_b: np.ndarray, d_c: np.ndarray
) -> np.ndarray:
    """Backward pass reusing a cache from :func:`forward_with_cache`."""
    h, w = d_log_intensity.shape
    d_out = np.empty((h, w, params.arch.out_channels))
    d_out[:, :, 0] = d_log_intensity
    d_out[:, :, 1:3] = d_b
    d_out[:, :, 3:] = d_c
    return _backward_from_cache(params, cache, d_out)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Trained model state: parameters, residual scale, and RNG provenance."""

    params: ConvNetParams
    sigma: float = 1.0
    residual_kind: str = "laplace"
    rng_seed: int = 0
    rng_algorithm: str = PHILOX_ID
    extra: dict = field(default_factory=dict)

    @property
    def arch(self) -> ConvNetArch:
        return self.params.arch

    def residual_model(self) -> ResidualModel:
        return ResidualModel(kind=self.residual_kind, sigma=self.sigma)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = {
        "arch": ckpt.arch.to_dict(),
        "sigma": ckpt.sigma,
        "residual_kind": ckpt.residual_kind,
        "rng": {"algorithm_id": ckpt.rng_algorithm, "seed": ckpt.rng_seed},
        "param_count": int(ckpt.params.flat.size),
        "dtype": "f64",
        "endian": "little",
        "extra": ckpt.extra,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(ckpt.params.flat.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, sep, rest = blob.partition(b"\n")
    if magic != CHECKPOINT_MAGIC or not sep:
        raise FormatError(f"{path}: bad checkpoint magic")
    header_line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(header_line.decode("utf-8"))
        arch = ConvNetArch.from_dict(header["arch"])
        n = int(header["param_count"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header: {exc}") from exc
    if len(payload) != n * 8:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {n * 8}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = ConvNetParams(arch, flat)
    return Checkpoint(
        params=params,
        sigma=float(header["sigma"]),
        residual_kind=str(header["residual_kind"]),
        rng_seed=int(header["rng"]["seed"]),
        rng_algorithm=str(header["rng"]["algorithm_id"]),
        extra=dict(header.get("extra", {})),
    )
