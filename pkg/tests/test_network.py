import math

import numpy as np
import pytest

from cmppp.core import FormatError, Grid, RngStream, ShapeError
from cmppp.marked import nll, nll_grad
from cmppp.marks import ResidualModel
from cmppp.network import (
    Checkpoint,
    ConvNetArch,
    ConvNetParams,
    backward,
    forward,
    forward_with_cache,
    grad_from_cache,
    init,
    load_checkpoint,
    save_checkpoint,
)

from test_marked import random_gt


def small_params(seed=0, num_classes=2, hidden=4, mean_count=2.0):
    return init(RngStream(seed).generator(), num_classes=num_classes, mean_count=mean_count,
                hidden=hidden)


def _loss_and_kink_signs(arch, flat, grid, gt, model):
    """Loss plus the sign pattern of every ReLU pre-activation and L1 residual.

    The loss is piecewise smooth; a central difference is only a valid
    derivative estimate when no kink lies inside the perturbation interval,
    i.e. when the sign pattern is the same at both endpoints.
    """
    p = ConvNetParams(arch, flat)
    field, maps, cache = forward_with_cache(p, grid)
    signs = [z > 0 for _, z in cache[:-1]]
    if gt.points:
        from cmppp.core import pixels_of

        pos = gt.positions()
        ii, jj = pixels_of(pos[:, 0], pos[:, 1], maps.h_px, maps.w_px)
        signs.append((gt.sizes() - maps.b.values[ii, jj, :]) > 0)
    loss = nll(field, maps, model, gt).total
    return loss, signs


def full_chain_fd_worst_error(seed: int, n_coords: int | None = None, eps: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference gradients
    of nll(forward(params)) on an 8x8 input with <= 5000 parameters.

    Coordinates whose perturbation interval crosses a ReLU or L1 kink are
    excluded (the objective is not differentiable there); at most a few
    percent of coordinates are affected.
    """
    gen = np.random.default_rng(seed)
    params = init(RngStream(seed).generator(), num_classes=2, mean_count=2.0, hidden=4)
    assert params.flat.size <= 5000
    grid = Grid.from_values(gen.random((8, 8, 3)))
    gt = random_gt(gen, 3)
    model = ResidualModel("laplace", 0.5)

    field, maps, cache = forward_with_cache(params, grid)
    d_log, d_b, d_c = nll_grad(field, maps, model, gt)
    analytic = grad_from_cache(params, cache, d_log, d_b, d_c)
    coords = (
        np.arange(params.flat.size)
        if n_coords is None
        else gen.choice(params.flat.size, size=n_coords, replace=False)
    )
    worst = 0.0
    evaluated = skipped = 0
    for k in coords:
        up, dn = params.flat.copy(), params.flat.copy()
        up[k] += eps
        dn[k] -= eps
        loss_up, signs_up = _loss_and_kink_signs(params.arch, up, grid, gt, model)
        loss_dn, signs_dn = _loss_and_kink_signs(params.arch, dn, grid, gt, model)
        if any(not np.array_equal(a, b) for a, b in zip(signs_up, signs_dn)):
            skipped += 1
            continue
        fd = (loss_up - loss_dn) / (2 * eps)
        worst = max(worst, abs(fd - analytic[k]) / max(1.0, abs(fd), abs(analytic[k])))
        evaluated += 1
    assert evaluated > 0 and skipped <= 0.1 * len(coords)
    return worst


class TestArchitecture:
    def test_param_count_closed_form(self):
        arch = ConvNetArch(num_classes=3, hidden=16)
        # 5 conv layers (first from 3 input channels) plus the 1x1 head
        expected = (3 * 16 * 9 + 16) + 4 * (16 * 16 * 9 + 16) + (16 * 6 + 6)
        assert arch.param_count() == expected

    def test_head_count_difference_between_class_counts(self):
        a2 = ConvNetArch(num_classes=2, hidden=16)
        a13 = ConvNetArch(num_classes=13, hidden=16)
        assert a13.param_count() - a2.param_count() == 11 * (16 + 1)

    def test_flat_vector_length_validated(self):
        arch = ConvNetArch(num_classes=2, hidden=4)
        with pytest.raises(ShapeError):
            ConvNetParams(arch, np.zeros(arch.param_count() + 1))

    def test_output_shape_preserved(self):
        params = small_params()
        for h, w in ((8, 8), (12, 20), (5, 7)):
            field, maps = forward(params, Grid.from_values(np.zeros((h, w, 3))))
            assert (field.h_px, field.w_px) == (h, w)
            assert (maps.h_px, maps.w_px) == (h, w)
            assert maps.num_classes == 2


class TestForward:
    def test_zero_weights_give_zero_outputs(self, rng):
        arch = ConvNetArch(num_classes=3, hidden=8)
        params = ConvNetParams(arch, np.zeros(arch.param_count()))
        grid = Grid.from_values(rng.random((10, 10, 3)))
        field, maps = forward(params, grid)
        assert not field.log_values.any()
        assert not maps.b.values.any()
        assert not maps.logits.any()

    def test_deterministic_across_runs(self, rng):
        grid = Grid.from_values(rng.random((9, 9, 3)))
        out1 = forward(small_params(7), grid)
        out2 = forward(small_params(7), grid)
        assert np.array_equal(out1[0].log_values, out2[0].log_values)
        assert np.array_equal(out1[1].b.values, out2[1].b.values)

    def test_interior_translation_equivariance(self, rng):
        # total receptive field radius is 16 pixels, so outputs at least 16+shift
        # from the border shift exactly with the input
        params = init(RngStream(3).generator(), num_classes=2, mean_count=1.0, hidden=6)
        x = rng.random((48, 48, 3))
        di, dj = 3, 5
        shifted = np.roll(x, (di, dj), axis=(0, 1))
        out, _ = forward(params, Grid.from_values(x))
        out_s, _ = forward(params, Grid.from_values(shifted))
        margin = 16 + max(di, dj)
        a = out.log_values[margin:-margin, margin:-margin]
        b = out_s.log_values[margin + di:-margin + di or None, margin + dj:-margin + dj or None]
        assert np.array_equal(a, b)

    def test_wrong_input_channels_rejected(self):
        with pytest.raises(ShapeError):
            forward(small_params(), Grid.from_values(np.zeros((8, 8, 4))))


class TestBackward:
    def test_zero_upstream_gives_zero_gradient(self, rng):
        params = small_params()
        grid = Grid.from_values(rng.random((8, 8, 3)))
        g = backward(params, grid, np.zeros((8, 8)), np.zeros((8, 8, 2)), np.zeros((8, 8, 2)))
        assert not g.any()

    def test_untouched_head_channels_get_zero_gradient(self, rng):
        # upstream only on the log-intensity channel: the head columns that
        # feed the size and class channels receive no gradient
        params = small_params(hidden=4, num_classes=2)
        grid = Grid.from_values(rng.random((8, 8, 3)))
        g = backward(params, grid, np.ones((8, 8)), np.zeros((8, 8, 2)), np.zeros((8, 8, 2)))
        head_w = g[-(4 * 5 + 5):-5].reshape(4, 5)
        head_b = g[-5:]
        assert head_w[:, 0].any() and head_b[0] != 0.0
        assert not head_w[:, 1:].any() and not head_b[1:].any()

    def test_matches_cache_path(self, rng):
        params = small_params(5)
        grid = Grid.from_values(rng.random((8, 8, 3)))
        d_log = rng.normal(0, 1, (8, 8))
        d_b = rng.normal(0, 1, (8, 8, 2))
        d_c = rng.normal(0, 1, (8, 8, 2))
        g1 = backward(params, grid, d_log, d_b, d_c)
        _, _, cache = forward_with_cache(params, grid)
        g2 = grad_from_cache(params, cache, d_log, d_b, d_c)
        assert np.array_equal(g1, g2)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_chain_finite_difference(self, seed):
        worst = full_chain_fd_worst_error(seed, n_coords=150)
        assert worst <= 1e-4


class TestInit:
    def test_same_seed_identical(self):
        a = small_params(9)
        b = small_params(9)
        assert np.array_equal(a.flat, b.flat)

    def test_expected_count_near_mean_count(self, rng):
        params = init(RngStream(2).generator(), num_classes=3, mean_count=5.0, hidden=16)
        for _ in range(5):
            grid = Grid.from_values(rng.random((32, 32, 3)))
            field, _ = forward(params, grid)
            ec = float(np.exp(field.log_values).mean())
            assert 2.5 <= ec <= 10.0

    def test_intensity_bias_is_log_mean_count(self):
        params = init(RngStream(0).generator(), num_classes=2, mean_count=5.0, hidden=4)
        head_bias = params.layers()[-1][1]
        assert head_bias[0] == pytest.approx(math.log(5.0), abs=1e-15)
        assert not head_bias[1:].any()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = small_params(3)
        ckpt = Checkpoint(params=params, sigma=0.123, residual_kind="gaussian", rng_seed=5,
                          extra={"epochs": 2})
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert np.array_equal(back.params.flat, params.flat)
        assert back.sigma == 0.123
        assert back.residual_kind == "gaussian"
        assert back.rng_seed == 5
        assert back.extra["epochs"] == 2
        assert back.arch == params.arch

    def test_truncated_payload_rejected(self, tmp_path):
        ckpt = Checkpoint(params=small_params())
        save_checkpoint(ckpt, tmp_path / "t.ckpt")
        blob = (tmp_path / "t.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_save_is_deterministic(self, tmp_path):
        ckpt = Checkpoint(params=small_params(1), sigma=0.5)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(ckpt, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
