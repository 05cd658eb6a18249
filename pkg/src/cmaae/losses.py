"""Generator and discriminator losses.

Every loss reduces over the batch with a mean. Images are NCHW tensors in [0, 1];
``age`` arguments named ``*_norm`` are normalized to [0, 1], ``*_years`` are in years.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from .ordinal import soft_age

MIN_AGE_GAP = 1.0  # years; the pixel weight 1/gap is capped at this gap


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 0.10
    identity: float = 1.00
    gan: float = 1.00
    regression: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"loss weight {f.name}={v} must be finite and non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


MORPH_WEIGHTS = LossWeights(0.10, 1.00, 1.00, 0.02)
UTKFACE_WEIGHTS = LossWeights(0.50, 1.00, 1.00, 0.01)
PRESETS = {"morph": MORPH_WEIGHTS, "utkface": UTKFACE_WEIGHTS}


@dataclass
class LossReport:
    pixel: float
    identity: float
    gan_g: float
    regression: float
    total_g: float
    gan_d: float

    COLUMNS = ("pixel", "identity", "gan_g", "regression", "total_g", "gan_d")

    def as_row(self) -> list[float]:
        return [getattr(self, c) for c in self.COLUMNS]


def pixel_loss(x: torch.Tensor, x_hat: torch.Tensor, age_in_years, age_out_years) -> torch.Tensor:
    """Squared error over the image, divided by pixel count and by the age gap (floored at 1 year)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    gap = (torch.as_tensor(age_in_years, dtype=x.dtype) - torch.as_tensor(age_out_years, dtype=x.dtype)).abs()
    gap = gap.clamp_min(MIN_AGE_GAP).expand(x.shape[0])
    per_item = (x_hat - x).pow(2).flatten(1).sum(1) / x[0].numel()
    return (per_item / gap).mean()


def identity_loss(frozen_encoder, x: torch.Tensor, x_hat: torch.Tensor, z_ref: torch.Tensor | None = None) -> torch.Tensor:
    """Squared latent distance under the frozen encoder; ``z_ref`` may carry a precomputed E_pre(x)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if z_ref is None:
        z_ref = frozen_encoder(x)
    return (frozen_encoder(x_hat) - z_ref).pow(2).sum(1).mean()


def gan_d_loss(disc, x_real, age_real_norm, x_fake, age_fake_norm) -> torch.Tensor:
    d_real = disc(x_real, age_real_norm)
    d_fake = disc(x_fake.detach(), age_fake_norm)
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def gan_g_loss(disc, x_fake, age_fake_norm, variant: str = "saturating") -> torch.Tensor:
    d_fake = disc(x_fake, age_fake_norm)
    if variant == "saturating":
        return torch.log1p(-d_fake).mean()
    if variant == "nonsaturating":
        return -torch.log(d_fake).mean()
    raise ValueError(f"unknown generator loss variant {variant!r}")


def regression_loss(regressor, x_fake, target_norm, scale: float = 1.0) -> torch.Tensor:
    """Squared error between R's soft age and the target, both normalized then multiplied by ``scale``.

    ``scale=max_age`` measures the error in years.
    """
    target = torch.as_tensor(target_norm, dtype=x_fake.dtype)
    return ((soft_age(regressor(x_fake)) - target) * scale).pow(2).mean()


def generator_objective(weights: LossWeights, pixel, identity, gan_g, regression, gan_d=float("nan")):
    total = weights.pixel * pixel + weights.identity * identity + weights.gan * gan_g + weights.regression * regression
    parts = [_scalar(pixel), _scalar(identity), _scalar(gan_g), _scalar(regression)]
    report = LossReport(*parts, total_g=weights_total(weights, *parts), gan_d=_scalar(gan_d))
    return total, report


def _scalar(v) -> float:
    return v.item() if isinstance(v, torch.Tensor) else float(v)


def weights_total(weights: LossWeights, pixel: float, identity: float, gan_g: float, regression: float) -> float:
    return weights.pixel * pixel + weights.identity * identity + weights.gan * gan_g + weights.regression * regression


def discriminator_objective(disc, x_real, age_real_norm, x_fake, age_fake_norm) -> torch.Tensor:
    return gan_d_loss(disc, x_real, age_real_norm, x_fake, age_fake_norm)
