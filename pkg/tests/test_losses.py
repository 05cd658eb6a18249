import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from cmaae.losses import (
    MORPH_WEIGHTS,
    UTKFACE_WEIGHTS,
    LossWeights,
    discriminator_objective,
    gan_d_loss,
    gan_g_loss,
    generator_objective,
    identity_loss,
    pixel_loss,
    regression_loss,
)


class PixelProbe(nn.Module):
    """Stub discriminator: the probability is the image's first pixel."""

    def forward(self, x, age):
        return x[:, 0, 0, 0]


class TwoUnitEncoder(nn.Module):
    def forward(self, x):
        return x.flatten(1)[:, :2]


class ConstantLogits(nn.Module):
    def __init__(self, prob, width=10):
        super().__init__()
        self.logit = math.log(prob / (1 - prob))
        self.width = width

    def forward(self, x):
        return torch.full((x.shape[0], self.width), self.logit, dtype=x.dtype)


def filled(value, batch=3):
    return torch.full((batch, 1, 2, 2), value, dtype=torch.float64)


class TestPixel:
    def test_zero(self):
        x = torch.rand(2, 3, 4, 4)
        assert pixel_loss(x, x.clone(), 10.0, 40.0).item() == 0.0

    def test_hand_computed(self):
        x = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        assert pixel_loss(x, x + 0.5, 20.0, 25.0).item() == pytest.approx(0.05, abs=1e-15)
        assert pixel_loss(x, x + 0.5, 20.0, 30.0).item() == pytest.approx(0.025, abs=1e-15)

    def test_gap_clamped_at_one_year(self):
        x = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        assert pixel_loss(x, x + 0.5, 20.0, 20.0).item() == pytest.approx(0.25)
        assert pixel_loss(x, x + 0.5, 20.0, 20.5).item() == pytest.approx(0.25)

    def test_per_item_gaps(self):
        x = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
        loss = pixel_loss(x, x + 0.5, torch.tensor([0.0, 0.0]), torch.tensor([5.0, 10.0]))
        assert loss.item() == pytest.approx((0.05 + 0.025) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pixel_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4), 0, 5)

    @settings(deadline=None)
    @given(st.sampled_from([2.0, 4.0, 8.0, 16.0]), st.sampled_from([2.0, 3.0, 0.5]), st.integers(0, 1000))
    def test_scaling_law(self, gap, c, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(3, 3, 8, 8, generator=g, dtype=torch.float64)
        xh = torch.rand(3, 3, 8, 8, generator=g, dtype=torch.float64)
        base = pixel_loss(x, xh, 0.0, gap).item()
        scaled = pixel_loss(x, xh, 0.0, c * gap).item()
        assert scaled == pytest.approx(base / c, rel=1e-9)


class TestIdentity:
    def test_zero(self):
        x = torch.rand(2, 1, 2, 2)
        assert identity_loss(TwoUnitEncoder(), x, x.clone()).item() == 0.0

    def test_hand_computed(self):
        a = torch.tensor([[[[0.0, 1.0], [0.0, 0.0]]]])
        b = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
        assert identity_loss(TwoUnitEncoder(), a, b).item() == pytest.approx(2.0)

    def test_symmetric(self):
        a, b = torch.rand(4, 1, 2, 2), torch.rand(4, 1, 2, 2)
        enc = TwoUnitEncoder()
        assert identity_loss(enc, a, b).item() == pytest.approx(identity_loss(enc, b, a).item())


class TestGan:
    def test_d_half(self):
        loss = gan_d_loss(PixelProbe(), filled(0.5), 0.1, filled(0.5), 0.2)
        assert loss.item() == pytest.approx(2 * math.log(2))

    def test_d_optimum(self):
        loss = gan_d_loss(PixelProbe(), filled(1 - 1e-6), 0.1, filled(1e-6), 0.2)
        assert 0 < loss.item() < 1e-5

    def test_d_hand_computed(self):
        loss = gan_d_loss(PixelProbe(), filled(0.9), 0.1, filled(0.1), 0.2)
        assert loss.item() == pytest.approx(-2 * math.log(0.9))
        assert loss.item() == pytest.approx(0.2107, abs=1e-4)

    @pytest.mark.parametrize(
        "prob,variant,expected",
        [(0.5, "saturating", math.log(0.5)), (0.9, "saturating", math.log(0.1)), (0.5, "nonsaturating", math.log(2))],
    )
    def test_g_values(self, prob, variant, expected):
        assert gan_g_loss(PixelProbe(), filled(prob), 0.3, variant).item() == pytest.approx(expected)

    def test_g_unknown_variant(self):
        with pytest.raises(ValueError):
            gan_g_loss(PixelProbe(), filled(0.5), 0.3, "hinge")

    def test_discriminator_objective_alias(self):
        args = (PixelProbe(), filled(0.7), 0.1, filled(0.2), 0.4)
        assert discriminator_objective(*args).item() == gan_d_loss(*args).item()
        assert discriminator_objective(PixelProbe(), filled(0.5), 0.1, filled(0.5), 0.1).item() == pytest.approx(1.3863, abs=1e-4)

    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    def test_d_objective_positive(self, p_real, p_fake):
        assert discriminator_objective(PixelProbe(), filled(p_real), 0.1, filled(p_fake), 0.1).item() > 0


class TestRegression:
    def test_zero(self):
        loss = regression_loss(ConstantLogits(0.4), torch.zeros(3, 1, 2, 2, dtype=torch.float64), torch.full((3,), 0.4))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed(self):
        loss = regression_loss(ConstantLogits(0.6), torch.zeros(2, 1, 2, 2, dtype=torch.float64), torch.full((2,), 0.4))
        assert loss.item() == pytest.approx(0.04)

    def test_permutation_invariant(self):
        class Mean(nn.Module):
            def forward(self, x):
                return x.flatten(1)[:, :5] * 4 - 2

        x = torch.rand(6, 1, 4, 4, dtype=torch.float64)
        t = torch.rand(6, dtype=torch.float64)
        perm = torch.randperm(6)
        assert regression_loss(Mean(), x, t).item() == pytest.approx(regression_loss(Mean(), x[perm], t[perm]).item(), rel=1e-12)


class TestObjective:
    def test_zero_weights(self):
        total, _ = generator_objective(LossWeights(0, 0, 0, 0), 3.0, 4.0, -1.0, 9.0)
        assert total == 0

    def test_morph_preset(self):
        total, report = generator_objective(MORPH_WEIGHTS, 1.0, 1.0, 1.0, 1.0)
        assert total == pytest.approx(2.12)
        assert report.total_g == pytest.approx(2.12)

    def test_presets(self):
        assert MORPH_WEIGHTS == LossWeights(0.10, 1.00, 1.00, 0.02)
        assert UTKFACE_WEIGHTS == LossWeights(0.50, 1.00, 1.00, 0.01)

    def test_linear_in_pixel_weight(self):
        comps = (0.3, 0.7, -0.2, 0.05)
        base, _ = generator_objective(LossWeights(0.1, 1, 1, 0.02), *comps)
        doubled, _ = generator_objective(LossWeights(0.2, 1, 1, 0.02), *comps)
        assert doubled - base == pytest.approx(0.1 * 0.3, abs=1e-15)

    def test_report_recomputes_exactly(self):
        w = LossWeights(0.37, 0.9, 1.3, 0.011)
        _, r = generator_objective(w, torch.tensor(0.123), torch.tensor(0.456), torch.tensor(-0.7), torch.tensor(0.0031), 1.2)
        assert r.total_g == w.pixel * r.pixel + w.identity * r.identity + w.gan * r.gan_g + w.regression * r.regression
        assert r.gan_d == pytest.approx(1.2)

    @pytest.mark.parametrize("bad", [-0.1, float("inf"), float("nan")])
    def test_invalid_weights(self, bad):
        with pytest.raises(ValueError):
            LossWeights(bad, 1, 1, 1)


def test_permutation_invariance_all_losses():
    from cmaae.networks import NetworkSpec, freeze, init_params

    spec = NetworkSpec(image_size=16, latent_dim=8, base_filters=4, rank_count=6)
    E = freeze(init_params(spec, "E", 0).double())
    D = init_params(spec, "D", 1).double().eval()
    R = freeze(init_params(spec, "R", 2).double())
    g = torch.Generator().manual_seed(0)
    x = torch.rand(5, 3, 16, 16, generator=g, dtype=torch.float64)
    xh = torch.rand(5, 3, 16, 16, generator=g, dtype=torch.float64)
    a_in = torch.rand(5, generator=g, dtype=torch.float64)
    a_out = torch.rand(5, generator=g, dtype=torch.float64)
    p = torch.tensor([3, 0, 4, 1, 2])
    pairs = [
        (pixel_loss(x, xh, a_in * 60, a_out * 60), pixel_loss(x[p], xh[p], a_in[p] * 60, a_out[p] * 60)),
        (identity_loss(E, x, xh), identity_loss(E, x[p], xh[p])),
        (gan_d_loss(D, x, a_in, xh, a_out), gan_d_loss(D, x[p], a_in[p], xh[p], a_out[p])),
        (gan_g_loss(D, xh, a_out), gan_g_loss(D, xh[p], a_out[p])),
        (regression_loss(R, xh, a_out), regression_loss(R, xh[p], a_out[p])),
    ]
    for a, b in pairs:
        assert np.isfinite(a.item())
        assert a.item() == pytest.approx(b.item(), rel=1e-12)
