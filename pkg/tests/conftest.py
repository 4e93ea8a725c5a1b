import numpy as np
import pytest

from cmppp.core import Grid
from cmppp.marks import MarkMaps, ResidualModel
from cmppp.pointprocess import IntensityField

import oracles


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_scene(seed: int, h: int = 32, w: int = 32, num_classes: int = 2, sigma: float = 0.03):
    """A random (field, maps, model) triple with smooth, moderate values."""
    gen = np.random.default_rng(seed)
    log_l = oracles.smooth_field(gen, h, w, -2.0, 1.0)
    log_l += np.log(2.0) - np.log(np.exp(log_l).mean())
    field = IntensityField.from_log_intensity(log_l)
    bw = oracles.smooth_field(gen, h, w, 0.1, 0.22)
    bh = oracles.smooth_field(gen, h, w, 0.1, 0.22)
    maps = MarkMaps(
        b=Grid.from_values(np.stack([bw, bh], axis=2)),
        c=Grid.from_values(gen.normal(0.0, 1.0, (h, w, num_classes))),
    )
    return field, maps, ResidualModel(kind="laplace", sigma=sigma)
