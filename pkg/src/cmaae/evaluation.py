"""Age sweeps, aging-accuracy and identity metrics, and the ordinal-regression ablation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import Dataset, oracle_age, oracle_identity_distance, to_uint8
from .networks import to_nchw, to_nhwc
from .ordinal import rank_decode_hard
from .training import TrainConfig, TrainState, load_checkpoint, run_pretraining, train

logger = logging.getLogger(__name__)

DEFAULT_AGES_PER_ITEM = 4


class AgingModel:
    """Inference wrapper: x_hat = G(E(x), age / max_age), plus the frozen E_pre and R."""

    def __init__(self, E, G, E_pre=None, R=None, max_age: float = 60.0, bin_width: float = 1.0, batch_size: int = 256):
        self.E, self.G, self.E_pre, self.R = E, G, E_pre, R
        self.max_age = max_age
        self.bin_width = bin_width
        self.batch_size = batch_size

    @classmethod
    def from_state(cls, state: TrainState) -> "AgingModel":
        cfg = state.config
        return cls(state.E, state.G, state.E_pre, state.R, cfg.max_age, cfg.bin_width)

    @classmethod
    def from_checkpoint(cls, path) -> "AgingModel":
        return cls.from_state(load_checkpoint(path))

    def _check_ages(self, ages):
        ages = np.asarray(ages, dtype=np.float64)
        if np.any(ages < 0) or np.any(ages > self.max_age):
            raise ValueError(f"target ages must lie in [0, {self.max_age}]")
        return ages

    @torch.no_grad()
    def generate(self, images: np.ndarray, target_years) -> np.ndarray:
        """HWC images and one target age per image -> HWC generated images."""
        target_years = self._check_ages(np.broadcast_to(target_years, (len(images),)))
        self.E.eval()
        self.G.eval()
        out = []
        for i in range(0, len(images), self.batch_size):
            x = to_nchw(images[i : i + self.batch_size])
            ages = torch.as_tensor(target_years[i : i + self.batch_size] / self.max_age, dtype=torch.float32)
            out.append(to_nhwc(self.G(self.E(x), ages)))
        return np.concatenate(out)

    @torch.no_grad()
    def _run(self, net, images: np.ndarray) -> torch.Tensor:
        net.eval()
        return torch.cat([net(to_nchw(images[i : i + self.batch_size])) for i in range(0, len(images), self.batch_size)])

    def latent(self, images: np.ndarray) -> np.ndarray:
        if self.E_pre is None:
            raise ValueError("model has no frozen encoder E_pre")
        return self._run(self.E_pre, images).double().numpy()

    def estimate_age(self, images: np.ndarray) -> np.ndarray:
        if self.R is None:
            raise ValueError("model has no regressor R")
        return rank_decode_hard(self._run(self.R, images), self.bin_width).double().numpy()


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepGrid:
    sources: np.ndarray  # (N, H, W, C)
    ages: list[float]
    generated: np.ndarray  # (N, A, H, W, C)
    gutter: int = 2

    def montage(self) -> np.ndarray:
        n, a, h, w, c = self.generated.shape
        g = self.gutter
        canvas = np.ones((n * h + (n + 1) * g, (a + 1) * w + (a + 2) * g, c))
        for r in range(n):
            cells = [self.sources[r], *self.generated[r]]
            for col, img in enumerate(cells):
                y, x = g + r * (h + g), g + col * (w + g)
                canvas[y : y + h, x : x + w] = img
        return canvas

    def cell_geometry(self) -> list[dict]:
        n, a, h, w, _ = self.generated.shape
        g = self.gutter
        cells = []
        for r in range(n):
            for col in range(a + 1):
                cells.append({
                    "row": r,
                    "col": col,
                    "x": g + col * (w + g),
                    "y": g + r * (h + g),
                    "width": w,
                    "height": h,
                    "age": None if col == 0 else self.ages[col - 1],
                })
        return cells

    def save(self, png_path, sources: list[str] | None = None) -> tuple[Path, Path]:
        png_path = Path(png_path)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(self.montage())).save(png_path)
        sidecar = png_path.with_suffix(".json")
        sidecar.write_text(json.dumps({
            "sources": sources or [f"source_{i}" for i in range(len(self.sources))],
            "ages": self.ages,
            "rows": len(self.sources),
            "columns": len(self.ages) + 1,
            "cells": self.cell_geometry(),
        }, indent=2))
        return png_path, sidecar


def synthesize_sweep(model: AgingModel, images: np.ndarray, target_ages) -> SweepGrid:
    """One row per source image: the source, then one generated face per target age (ascending)."""
    ages = sorted(float(a) for a in target_ages)
    if not ages:
        raise ValueError("need at least one target age")
    model._check_ages(ages)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n = len(images)
    flat_src = np.repeat(images, len(ages), axis=0)
    flat_age = np.tile(ages, n)
    generated = model.generate(flat_src, flat_age).reshape(n, len(ages), *images.shape[1:])
    return SweepGrid(images, ages, generated)


# ---------------------------------------------------------------------------
# metrics


def sample_target_ages(n: int, ages_per_item: int, max_age: float, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 8]).uniform(0.0, max_age, size=(n, ages_per_item))


def _summary(values: np.ndarray) -> dict:
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(values.size)}


def _expand(dataset: Dataset, ages_per_item: int, seed: int):
    targets = sample_target_ages(len(dataset), ages_per_item, dataset.max_age, seed)
    src = np.repeat(np.arange(len(dataset)), ages_per_item)
    return src, targets.reshape(-1)


def evaluate_aging_accuracy(model: AgingModel, dataset: Dataset, ages_per_item: int = DEFAULT_AGES_PER_ITEM, use_oracle: bool = True, seed: int = 0) -> dict:
    """MAE (years) between requested target ages and the age read back from the generated faces.

    The estimator is the analytic oracle (synthetic data only) or the hard-decoded regressor R.
    """
    if use_oracle and not dataset.is_synthetic:
        raise ValueError("the age oracle is only defined on synthetic datasets")
    src, targets = _expand(dataset, ages_per_item, seed)
    fakes = model.generate(dataset.images[src], targets)
    estimated = oracle_age(fakes, dataset.max_age) if use_oracle else model.estimate_age(fakes)
    err = np.abs(np.asarray(estimated) - targets)
    out = _summary(err)
    out["estimator"] = "oracle" if use_oracle else "regressor"
    return out


def evaluate_identity(model: AgingModel, dataset: Dataset, ages_per_item: int = DEFAULT_AGES_PER_ITEM, seed: int = 0) -> dict:
    """Mean latent distance ||E_pre(x_hat) - E_pre(x)|| and, on synthetic data, the oracle identity distance."""
    src, targets = _expand(dataset, ages_per_item, seed)
    x = dataset.images[src]
    fakes = model.generate(x, targets)
    out = {}
    if model.E_pre is not None:
        out["latent"] = _summary(np.linalg.norm(model.latent(fakes) - model.latent(x), axis=1))
    if dataset.is_synthetic:
        out["oracle"] = _summary(oracle_identity_distance(fakes, x))
    return out


@dataclass
class EvalReport:
    aging_oracle: dict | None
    aging_regressor: dict | None
    identity: dict
    n: int
    seeds: list[int] = field(default_factory=list)
    ages_per_item: int = DEFAULT_AGES_PER_ITEM

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate_model(model: AgingModel, dataset: Dataset, ages_per_item: int = DEFAULT_AGES_PER_ITEM, seed: int = 0) -> EvalReport:
    oracle = evaluate_aging_accuracy(model, dataset, ages_per_item, True, seed) if dataset.is_synthetic else None
    regressor = evaluate_aging_accuracy(model, dataset, ages_per_item, False, seed) if model.R is not None else None
    ident = evaluate_identity(model, dataset, ages_per_item, seed)
    return EvalReport(oracle, regressor, ident, len(dataset) * ages_per_item, [seed], ages_per_item)


# ---------------------------------------------------------------------------
# ablations


def run_arms(config: TrainConfig, train_set: Dataset, test_set: Dataset, seeds, arms: dict[str, dict], out_dir=None, ages_per_item: int = DEFAULT_AGES_PER_ITEM) -> dict:
    """Train one model per (seed, arm) and evaluate each on ``test_set``.

    ``arms`` maps an arm name to TrainConfig overrides (loss weights only). Pre-training
    does not depend on the loss weights, so it runs once per seed and is shared by the arms.
    """
    results: dict[str, dict[int, dict]] = {name: {} for name in arms}
    for seed in seeds:
        base = config.replace(seed=seed)
        pre = run_pretraining(TrainState.create(base), train_set)
        for name, overrides in arms.items():
            arm_cfg = base.replace(**overrides)
            state = TrainState.create(arm_cfg)
            state.set_regressor(pre.R)
            state.set_encoder(_clone(pre.E), pre.E_pre)
            arm_out = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            train(arm_cfg, train_set, arm_out, state=state)
            report = evaluate_model(AgingModel.from_state(state), test_set, ages_per_item, seed)
            results[name][seed] = report.to_dict()
            logger.info("arm %s seed %d: %s", name, seed, json.dumps(_headline(report.to_dict())))
    return results


def _clone(net):
    import copy

    return copy.deepcopy(net)


def _headline(report: dict) -> dict:
    out = {}
    if report.get("aging_oracle"):
        out["oracle_mae"] = round(report["aging_oracle"]["mean"], 3)
    if report.get("aging_regressor"):
        out["regressor_mae"] = round(report["aging_regressor"]["mean"], 3)
    if "oracle" in report["identity"]:
        out["identity_oracle"] = round(report["identity"]["oracle"]["mean"], 5)
    if "latent" in report["identity"]:
        out["identity_latent"] = round(report["identity"]["latent"]["mean"], 5)
    return out


def arm_means(results: dict, arm: str, key: str) -> list[float]:
    """Per-seed means of a metric path, e.g. ``key="aging_oracle"`` or ``"identity.oracle"``."""
    vals = []
    for report in results[arm].values():
        node = report
        for part in key.split("."):
            node = node[part]
        vals.append(node["mean"])
    return vals


ABLATION_RATIO_TARGET = 1 / 0.6


def ablation_with_without_R(config: TrainConfig, train_set: Dataset, test_set: Dataset, seeds=(0, 1, 2), out_dir=None, ages_per_item: int = DEFAULT_AGES_PER_ITEM, extra_arms: dict | None = None) -> dict:
    """Paired trainings differing only in the regression weight; reports MAE_without / MAE_with."""
    if not (train_set.is_synthetic and test_set.is_synthetic):
        raise ValueError("the ablation needs synthetic data for the oracle referee")
    arms = {"with_R": {}, "without_R": {"lambda_r": 0.0}}
    arms.update(extra_arms or {})
    results = run_arms(config, train_set, test_set, seeds, arms, out_dir, ages_per_item)
    with_r = float(np.mean(arm_means(results, "with_R", "aging_oracle")))
    without_r = float(np.mean(arm_means(results, "without_R", "aging_oracle")))
    ratio = without_r / with_r if with_r > 0 else float("inf")
    summary = {
        "seeds": list(seeds),
        "mae_with_R": with_r,
        "mae_without_R": without_r,
        "mae_with_R_std_over_runs": float(np.std(arm_means(results, "with_R", "aging_oracle"))),
        "mae_without_R_std_over_runs": float(np.std(arm_means(results, "without_R", "aging_oracle"))),
        "ratio": ratio,
        "pass": bool(with_r < 0.6 * without_r),
        "arms": results,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(summary, indent=2))
        (out / "summary.txt").write_text(f"ratio={ratio:.4f} pass={summary['pass']}\n")
    return summary
