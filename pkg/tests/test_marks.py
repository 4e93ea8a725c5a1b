import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from cmppp.core import Grid, RngStream, ShapeError, ValidationError
from cmppp.marks import (
    GAUSSIAN,
    LAPLACE,
    MarkMaps,
    ResidualModel,
    cdf,
    class_log_prob,
    log_density,
    log_softmax,
    sample_mark,
    softmax,
    tail_mass,
)

LAP1 = ResidualModel(kind=LAPLACE, sigma=1.0)
GAU1 = ResidualModel(kind=GAUSSIAN, sigma=1.0)


class TestResidualModel:
    @pytest.mark.parametrize("sigma", [0.0, -1.0, math.nan])
    def test_bad_sigma_rejected(self, sigma):
        with pytest.raises(ValidationError):
            ResidualModel(kind=LAPLACE, sigma=sigma)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            ResidualModel(kind="cauchy", sigma=1.0)

    @pytest.mark.parametrize("model", [LAP1, ResidualModel(LAPLACE, 0.3), GAU1,
                                       ResidualModel(GAUSSIAN, 2.0)])
    def test_density_integrates_to_one(self, model):
        # integrate the one-coordinate density directly from its formula
        if model.kind == LAPLACE:
            f = lambda v: math.exp(-abs(v) / model.sigma) / (2 * model.sigma)
        else:
            f = lambda v: math.exp(-v * v / (2 * model.sigma**2)) / math.sqrt(
                2 * math.pi * model.sigma**2
            )
        val, _ = quad(f, -40 * model.sigma, 40 * model.sigma, limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)


class TestLogDensity:
    def test_laplace_mode_value(self):
        assert log_density(LAP1, (0.3, 0.7), (0.3, 0.7)) == pytest.approx(-2 * math.log(2), abs=1e-12)

    def test_laplace_hand_evaluated(self):
        # residual (1, 3): -2 ln 2 - 4
        assert log_density(LAP1, (1.0, 3.0), (0.0, 0.0)) == pytest.approx(
            -2 * math.log(2) - 4.0, abs=1e-12
        )

    def test_gaussian_mode_value(self):
        assert log_density(GAU1, (0.1, 0.2), (0.1, 0.2)) == pytest.approx(
            -math.log(2 * math.pi), abs=1e-12
        )

    def test_scale_dependence(self):
        m = ResidualModel(LAPLACE, 0.5)
        assert log_density(m, (1.0, 0.0), (0.0, 0.0)) == pytest.approx(
            -2 * math.log(1.0) - 2.0, abs=1e-12
        )


class TestTailMass:
    def test_far_left_bound_gives_one(self):
        assert tail_mass(LAP1, -1e9, 0.0) == pytest.approx(1.0, abs=1e-15)
        assert tail_mass(GAU1, -1e9, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_median(self):
        assert tail_mass(LAP1, 0.0, 0.0) == pytest.approx(0.5, abs=1e-15)
        assert tail_mass(GAU1, 0.0, 0.0) == pytest.approx(0.5, abs=1e-12)

    def test_laplace_closed_form_tail(self):
        assert tail_mass(LAP1, 1.0, 0.0) == pytest.approx(math.exp(-1) / 2, abs=1e-12)

    def test_complement_identity_and_monotonicity(self):
        for lower in np.linspace(-3, 3, 25):
            t = tail_mass(LAP1, lower, 0.3)
            assert t + (1.0 - t) == 1.0
        lows = np.linspace(-4, 4, 50)
        tails = tail_mass(LAP1, lows, 0.2)
        assert np.all(np.diff(tails) <= 0)

    @pytest.mark.parametrize("kind", [LAPLACE, GAUSSIAN])
    def test_matches_quadrature_on_random_triples(self, kind, rng):
        for _ in range(100):
            sigma = float(rng.uniform(0.1, 2.0))
            center = float(rng.uniform(-1, 1))
            lower = float(rng.uniform(-3, 3))
            model = ResidualModel(kind, sigma)
            if kind == LAPLACE:
                f = lambda v: math.exp(-abs(v - center) / sigma) / (2 * sigma)
            else:
                f = lambda v: math.exp(-((v - center) ** 2) / (2 * sigma**2)) / math.sqrt(
                    2 * math.pi * sigma**2
                )
            upper = center + 60 * sigma
            if lower < center:  # split at the density kink for quadrature accuracy
                expected = quad(f, lower, center, limit=400)[0] + quad(f, center, upper, limit=400)[0]
            else:
                expected = quad(f, lower, upper, limit=400)[0]
            assert tail_mass(model, lower, center) == pytest.approx(expected, abs=1e-8)

    def test_cdf_is_complement(self, rng):
        xs = rng.uniform(-2, 2, 20)
        np.testing.assert_allclose(
            cdf(LAP1, xs, 0.1), 1.0 - tail_mass(LAP1, xs, 0.1), atol=1e-15
        )

    def test_vectorized_matches_scalar(self, rng):
        lows = rng.uniform(-1, 1, (4, 5))
        centers = rng.uniform(0, 0.3, (4, 5))
        vec = tail_mass(GAU1, lows, centers)
        for i in range(4):
            for j in range(5):
                assert vec[i, j] == pytest.approx(
                    tail_mass(GAU1, float(lows[i, j]), float(centers[i, j])), abs=1e-15
                )


class TestClassLogProb:
    def test_uniform_two_classes(self):
        assert class_log_prob(np.array([0.0, 0.0]), 0) == pytest.approx(-math.log(2), abs=1e-12)

    def test_dominant_logit(self):
        assert class_log_prob(np.array([10.0, 0.0]), 0) == pytest.approx(
            -math.log(1 + math.exp(-10)), abs=1e-12
        )

    def test_uniform_thirteen_classes(self):
        logits = np.full(13, 2.5)
        assert class_log_prob(logits, 7) == pytest.approx(-math.log(13), abs=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            class_log_prob(np.array([0.0, 1.0]), 2)

    def test_shift_invariance(self, rng):
        logits = rng.normal(0, 3, 6)
        for k in range(6):
            assert class_log_prob(logits, k) == pytest.approx(
                class_log_prob(logits + 123.4, k), abs=1e-10
            )

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    @settings(max_examples=150, deadline=None)
    def test_probabilities_normalize(self, logits):
        probs = softmax(np.array(logits))
        assert abs(probs.sum() - 1.0) < 1e-12

    def test_extreme_logits_stable(self):
        assert np.isfinite(class_log_prob(np.array([1000.0, -1000.0]), 1))

    def test_log_softmax_pixelwise_normalization(self, rng):
        logits = rng.normal(0, 2, (6, 6, 4))
        probs = np.exp(log_softmax(logits))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


class TestSampleMark:
    def test_degenerate_scale_returns_prediction(self):
        model = ResidualModel(LAPLACE, 1e-9)
        gen = RngStream(1).generator()
        w, h, _ = sample_mark(model, (0.4, 0.6), np.array([0.0]), gen)
        assert abs(w - 0.4) < 1e-6 and abs(h - 0.6) < 1e-6

    def test_sample_median_matches_location(self):
        gen = RngStream(2).generator()
        ws = np.array([sample_mark(LAP1, (0.25, 0.1), np.zeros(2), gen)[0] for _ in range(20_000)])
        # Laplace median standard error ~ 1/(2 f(med) sqrt(n)) = sigma/sqrt(n)
        assert abs(np.median(ws) - 0.25) < 3.0 / math.sqrt(20_000)

    def test_class_frequencies_uniform_logits(self):
        gen = RngStream(3).generator()
        ks = np.array([sample_mark(LAP1, (0.0, 0.0), np.zeros(2), gen)[2] for _ in range(100_000)])
        for k in (0, 1):
            assert abs((ks == k).mean() - 0.5) < 0.01

    def test_class_frequencies_skewed_logits(self):
        gen = RngStream(4).generator()
        logits = np.array([1.0, 0.0, -1.0])
        probs = softmax(logits)
        ks = np.array([sample_mark(LAP1, (0.0, 0.0), logits, gen)[2] for _ in range(50_000)])
        for k in range(3):
            se = math.sqrt(probs[k] * (1 - probs[k]) / 50_000)
            assert abs((ks == k).mean() - probs[k]) < 4 * se


class TestMarkMaps:
    def test_channel_requirements(self):
        with pytest.raises(ShapeError):
            MarkMaps(b=Grid.from_values(np.zeros((4, 4, 3))), c=Grid.from_values(np.zeros((4, 4, 2))))
        with pytest.raises(ShapeError):
            MarkMaps(b=Grid.from_values(np.zeros((4, 4, 2))), c=Grid.from_values(np.zeros((5, 4, 2))))

    def test_accessors(self, rng):
        b = rng.random((4, 6, 2))
        c = rng.random((4, 6, 3))
        maps = MarkMaps(b=Grid.from_values(b), c=Grid.from_values(c))
        assert maps.num_classes == 3
        np.testing.assert_array_equal(maps.widths, b[:, :, 0])
        np.testing.assert_array_equal(maps.heights, b[:, :, 1])
