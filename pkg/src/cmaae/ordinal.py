"""Ordinal age coding: K-1 binary rank tasks, hard/soft decoding, rank loss and MAE."""
from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn.functional as F

from .networks import to_nchw


def rank_count(max_age: float, bin_width: float = 1.0) -> int:
    k = max_age / bin_width
    if bin_width <= 0 or not math.isclose(k, round(k)) or round(k) < 1:
        raise ValueError(f"bin_width {bin_width} must evenly divide max_age {max_age}")
    return int(round(k))


def rank_encode(age, max_age: float, bin_width: float = 1.0) -> np.ndarray:
    """Bit k is 1 iff ``age >= (k + 1) * bin_width``. Vectorized over ``age``."""
    k = rank_count(max_age, bin_width)
    age = np.asarray(age, dtype=np.float64)
    if np.any(age < 0) or np.any(age > max_age):
        raise ValueError(f"age outside [0, {max_age}]")
    thresholds = (np.arange(k) + 1) * bin_width
    return (age[..., None] >= thresholds).astype(np.float32)


def rank_decode_hard(logits, bin_width: float = 1.0):
    """Age in years: bin_width times the number of tasks with sigmoid(logit) > 0.5."""
    if isinstance(logits, torch.Tensor):
        return bin_width * (logits > 0).sum(dim=-1).to(logits.dtype)
    return bin_width * (np.asarray(logits) > 0).sum(axis=-1)


def soft_age(logits: torch.Tensor) -> torch.Tensor:
    """Differentiable normalized age: mean of the task probabilities."""
    return torch.sigmoid(logits).mean(dim=-1)


def rank_loss(logits: torch.Tensor, targets) -> torch.Tensor:
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets)


@torch.no_grad()
def predict_ages(regressor, images: np.ndarray, bin_width: float = 1.0, batch_size: int = 256) -> np.ndarray:
    """Hard-decoded ages (years) for HWC images."""
    was_training = regressor.training
    regressor.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(rank_decode_hard(regressor(to_nchw(images[i : i + batch_size])), bin_width).numpy())
    regressor.train(was_training)
    return np.concatenate(out).astype(np.float64)


def mae_report(predicted, actual, name: str = "dataset") -> dict:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.size == 0:
        raise ValueError("cannot compute MAE of an empty set")
    err = np.abs(predicted - actual)
    decades = {}
    for d in np.unique(np.floor(actual / 10).astype(int)):
        sel = np.floor(actual / 10).astype(int) == d
        decades[f"{10 * d}-{10 * d + 9}"] = float(err[sel].mean())
    return {
        "dataset": name,
        "n": int(err.size),
        "mae_mean": float(err.mean()),
        "mae_std": float(err.std()),
        "per_decade_mae": decades,
    }


def evaluate_mae(regressor, dataset, bin_width: float = 1.0, name: str = "dataset") -> dict:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return mae_report(predict_ages(regressor, dataset.images, bin_width), dataset.ages, name)


def write_mae_report(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
