"""Encoder E, generator G, discriminator D and ordinal regressor R.

All four follow the same structural rules: 5x5 kernels, stride-2 (transposed)
convolutions instead of pooling, channel doubling from ``base_filters``, a 4x4
bottleneck, and ReLU between layers. Batch norm appears only in D and R.

Tensors here are NCHW; the data module uses HWC numpy arrays, see
:func:`to_nchw` / :func:`to_nhwc`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

PROB_EPS = 1e-6
KERNEL = 5
NETWORK_KINDS = ("E", "G", "D", "R")


@dataclass(frozen=True)
class NetworkSpec:
    image_size: int = 32
    channels: int = 3
    latent_dim: int = 64
    base_filters: int = 32
    rank_count: int = 60
    bn_policy: str = "D-only"

    def __post_init__(self):
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {self.image_size}")
        if self.latent_dim < 1 or self.rank_count < 1 or self.base_filters < 1:
            raise ValueError("latent_dim, rank_count and base_filters must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.image_size)) - 2

    @property
    def bottleneck_channels(self) -> int:
        return self.base_filters * 2**self.n_down

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def to_nchw(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(np.asarray(images), -1, -3)), dtype=dtype)


def to_nhwc(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().movedim(-3, -1).numpy()


def _conv_stack(spec: NetworkSpec, in_channels: int, batch_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    c = in_channels
    for i in range(spec.n_down):
        out = spec.base_filters * 2**i
        layers.append(nn.Conv2d(c, out, KERNEL, stride=2, padding=KERNEL // 2))
        if batch_norm:
            layers.append(nn.BatchNorm2d(out))
        layers.append(nn.ReLU())
        c = out
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


def _stack_features(spec: NetworkSpec) -> int:
    return spec.base_filters * 2 ** (spec.n_down - 1) * 16


class Encoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.features = _conv_stack(spec, spec.channels, batch_norm=False)
        self.fc = nn.Linear(_stack_features(spec), spec.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.spec, self.spec.channels)
        return torch.sigmoid(self.fc(self.features(x)))


class Generator(nn.Module):
    """Decodes ``z ++ [age]`` to an image. ``age_conditioned=False`` gives the pre-training decoder."""

    def __init__(self, spec: NetworkSpec, age_conditioned: bool = True):
        super().__init__()
        self.spec = spec
        self.age_conditioned = age_conditioned
        top = spec.bottleneck_channels
        self.fc = nn.Linear(spec.latent_dim + int(age_conditioned), top * 16)
        layers: list[nn.Module] = []
        c = top
        for i in range(spec.n_down):
            last = i == spec.n_down - 1
            out = spec.channels if last else c // 2
            layers.append(nn.ConvTranspose2d(c, out, KERNEL, stride=2, padding=KERNEL // 2, output_padding=1))
            if not last:
                layers.append(nn.ReLU())
            c = out
        self.deconv = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, age: torch.Tensor | None = None) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ValueError(f"expected latent codes of shape (B, {self.spec.latent_dim}), got {tuple(z.shape)}")
        if self.age_conditioned:
            age = _check_age(age, z.shape[0])
            z = torch.cat([z, age.to(z.dtype)[:, None]], dim=1)
        h = torch.relu(self.fc(z)).view(-1, self.spec.bottleneck_channels, 4, 4)
        return torch.sigmoid(self.deconv(h))


class Discriminator(nn.Module):
    """D(x, age): the age is appended as one constant input channel."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.features = _conv_stack(spec, spec.channels + 1, batch_norm=True)
        self.fc = nn.Linear(_stack_features(spec), 1)

    def forward(self, x: torch.Tensor, age: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.spec, self.spec.channels)
        age = _check_age(age, x.shape[0]).to(x.dtype)
        plane = age[:, None, None, None].expand(-1, 1, x.shape[2], x.shape[3])
        logit = self.fc(self.features(torch.cat([x, plane], dim=1))).squeeze(1)
        return torch.sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS)


class Regressor(nn.Module):
    """Ordinal regressor: one logit per rank task ``age >= k + 1 bins``."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.features = _conv_stack(spec, spec.channels, batch_norm=True)
        self.fc = nn.Linear(_stack_features(spec), spec.rank_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_images(x, self.spec, self.spec.channels)
        return self.fc(self.features(x))


def _check_images(x: torch.Tensor, spec: NetworkSpec, channels: int):
    expected = (channels, spec.image_size, spec.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")


def _check_age(age, batch: int) -> torch.Tensor:
    if age is None:
        raise ValueError("age conditioning required")
    age = torch.as_tensor(age)
    if age.ndim == 0:
        age = age.expand(batch)
    age = age.reshape(-1)
    if age.shape[0] != batch:
        raise ValueError(f"got {age.shape[0]} ages for a batch of {batch}")
    if bool((age < 0).any()) or bool((age > 1).any()):
        raise ValueError("normalized ages must lie in [0, 1]")
    return age


_BUILDERS = {"E": Encoder, "G": Generator, "D": Discriminator, "R": Regressor}


def init_params(spec: NetworkSpec, network: str, seed: int) -> nn.Module:
    """Build network ``network`` with fan-in scaled uniform weights and zero biases."""
    if network not in _BUILDERS:
        raise ValueError(f"unknown network {network!r}; expected one of {NETWORK_KINDS}")
    gen = torch.Generator().manual_seed(seed)
    net = _BUILDERS[network](spec)
    reset_parameters(net, gen)
    return net


def reset_parameters(net: nn.Module, gen: torch.Generator):
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                # each output pixel of a stride-2 transposed conv sees ~in*k*k/4 inputs
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] / 4
            else:
                fan_in = w[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=gen)
                m.bias.zero_()


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    net.frozen = True
    return net


def is_frozen(net: nn.Module) -> bool:
    return getattr(net, "frozen", False)


def param_digest(net: nn.Module) -> str:
    """Content hash over parameters and buffers, in state_dict order."""
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]
