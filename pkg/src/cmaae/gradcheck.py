"""Central finite-difference checks of every training loss, in double precision."""
from __future__ import annotations

import copy

import numpy as np
import torch

from .losses import (
    LossWeights,
    discriminator_objective,
    gan_g_loss,
    generator_objective,
    identity_loss,
    pixel_loss,
    regression_loss,
)
from .networks import NetworkSpec, freeze, init_params
from .ordinal import rank_encode, rank_loss

TOLERANCE = 1e-4
STEP = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-10:
        return 0.0
    return abs(analytic - numeric) / scale


def check_function(fn, leaves: list[torch.Tensor], n_coords: int, rng: np.random.Generator, step: float = STEP) -> dict:
    """Compare autograd against central differences of ``fn()`` at ``n_coords`` random coordinates of ``leaves``."""
    for t in leaves:
        t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    sizes = np.array([t.numel() for t in leaves])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            t = leaves[k].view(-1)
            orig = t[j].item()
            t[j] = orig + step
            up = fn().item()
            t[j] = orig - step
            down = fn().item()
            t[j] = orig
            numeric = (up - down) / (2 * step)
            analytic = 0.0 if grads[k] is None else grads[k].reshape(-1)[j].item()
            worst = max(worst, relative_error(analytic, numeric))
    return {"max_rel_error": worst, "coords": int(len(picks)), "loss": loss.item()}


def run_gradcheck(seed: int = 0, n_coords: int = 64, step: float = STEP) -> dict[str, dict]:
    """Check pixel, identity, both GAN losses, regression, the generator objective and the rank loss."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(image_size=16, channels=3, latent_dim=8, base_filters=4, rank_count=6)
    max_age = 6.0
    E = init_params(spec, "E", seed).double()
    G = init_params(spec, "G", seed + 1).double()
    D = init_params(spec, "D", seed + 2).double()
    R = init_params(spec, "R", seed + 3).double()
    E_pre = freeze(copy.deepcopy(E))
    freeze(R)
    D.train()

    batch = 4
    x = torch.rand(batch, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)) * 0.9 + 0.05
    x.requires_grad_(True)
    age_in = torch.as_tensor(rng.uniform(0, max_age, batch))
    age_out = torch.as_tensor(rng.uniform(0, max_age, batch))
    l_in, l_out = age_in / max_age, age_out / max_age
    eg = [*E.parameters(), *G.parameters(), x]
    d_params = list(D.parameters())
    weights = LossWeights(0.10, 1.00, 1.00, 0.02)

    def fake():
        return G(E(x), l_out)

    with torch.no_grad():
        fixed_fake = fake()

    def total():
        xh = fake()
        t, _ = generator_objective(
            weights,
            pixel_loss(x, xh, age_in, age_out),
            identity_loss(E_pre, x, xh),
            gan_g_loss(D, xh, l_out),
            regression_loss(R, xh, l_out),
        )
        return t

    checks = {
        "pixel": (lambda: pixel_loss(x, fake(), age_in, age_out), eg),
        "identity": (lambda: identity_loss(E_pre, x, fake()), eg),
        "gan_d": (lambda: discriminator_objective(D, x, l_in, fixed_fake, l_out), d_params),
        "gan_g_saturating": (lambda: gan_g_loss(D, fake(), l_out, "saturating"), eg),
        "gan_g_nonsaturating": (lambda: gan_g_loss(D, fake(), l_out, "nonsaturating"), eg),
        "regression": (lambda: regression_loss(R, fake(), l_out), eg),
        "generator_objective": (total, eg),
    }

    R_train = init_params(spec, "R", seed + 4).double().train()
    targets = torch.as_tensor(rank_encode(age_in.numpy(), max_age, 1.0), dtype=torch.float64)
    x_const = x.detach()
    checks["rank"] = (lambda: rank_loss(R_train(x_const), targets), list(R_train.parameters()))

    return {name: check_function(fn, leaves, n_coords, rng, step) for name, (fn, leaves) in checks.items()}


def passed(results: dict[str, dict], tol: float = TOLERANCE) -> bool:
    return all(r["max_rel_error"] < tol for r in results.values())
