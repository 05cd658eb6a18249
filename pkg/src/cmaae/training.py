"""Three-phase training: pre-train R, pre-train E (frozen copy E_pre), then alternate D / G+E updates."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .data import Dataset
from .losses import (
    LossReport,
    LossWeights,
    discriminator_objective,
    gan_g_loss,
    generator_objective,
    identity_loss,
    pixel_loss,
    regression_loss,
)
from .networks import Generator, NetworkSpec, freeze, init_params, param_digest, reset_parameters, to_nchw
from .ordinal import evaluate_mae, rank_count, rank_encode, rank_loss

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.csv"
MANIFEST = "manifest.json"
LOG_COLUMNS = ("epoch", "iteration", *LossReport.COLUMNS, "wall_seconds")


class DivergenceError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class PhaseError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 100
    epochs: int = 200
    pretrain_r_epochs: int = 200
    pretrain_e_epochs: int = 200
    lambda_p: float = 0.10
    lambda_i: float = 1.00
    lambda_g: float = 1.00
    lambda_r: float = 0.02
    seed: int = 0
    g_loss_variant: str = "saturating"
    regression_units: str = "normalized"
    target_ages: str = "uniform"
    image_size: int = 32
    channels: int = 3
    latent_dim: int = 64
    base_filters: int = 32
    max_age: float = 60.0
    bin_width: float = 1.0
    encoder_id_weight: float = 0.0
    checkpoint_every: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.pretrain_r_epochs < 0 or self.pretrain_e_epochs < 0:
            raise ValueError("pre-training epochs must be >= 0")
        if self.g_loss_variant not in ("saturating", "nonsaturating"):
            raise ValueError(f"unknown g_loss_variant {self.g_loss_variant!r}")
        if self.regression_units not in ("normalized", "years"):
            raise ValueError(f"unknown regression_units {self.regression_units!r}")
        if self.target_ages not in ("uniform", "input"):
            raise ValueError(f"unknown target_ages mode {self.target_ages!r}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        self.weights  # validates the lambdas
        self.spec  # validates the architecture fields

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.lambda_i, self.lambda_g, self.lambda_r)

    @property
    def spec(self) -> NetworkSpec:
        return NetworkSpec(
            image_size=self.image_size,
            channels=self.channels,
            latent_dim=self.latent_dim,
            base_filters=self.base_filters,
            rank_count=rank_count(self.max_age, self.bin_width),
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: 32x32 faces, batch 64, 30 epochs per phase."""
        base = dict(batch_size=64, epochs=30, pretrain_r_epochs=30, pretrain_e_epochs=20)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines into typed TrainConfig values."""
    types = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = types[key](value)
    return values


def format_config_text(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


def _sub_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def make_optimizer(params_or_modules, config: TrainConfig) -> torch.optim.Adam:
    """Adam with L2 decay on weight tensors only; biases and norm parameters are not decayed."""
    modules = params_or_modules if isinstance(params_or_modules, (list, tuple)) else [params_or_modules]
    decay, no_decay = [], []
    for m in modules:
        for p in m.parameters():
            if not p.requires_grad:
                continue
            (decay if p.ndim > 1 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.Adam(groups, lr=config.learning_rate, betas=(0.9, 0.999))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _check_finite(**values):
    for name, v in values.items():
        v = v.item() if isinstance(v, torch.Tensor) else float(v)
        if not np.isfinite(v):
            raise DivergenceError(f"non-finite {name} loss: {v}")


# ---------------------------------------------------------------------------
# phase 1 and 2


def pretrain_regressor(dataset: Dataset, config: TrainConfig, eval_dataset: Dataset | None = None) -> nn.Module:
    """Fit R on the rank tasks, then return it frozen. Final MAE is stored on ``R.final_mae``."""
    spec = config.spec
    R = init_params(spec, "R", _sub_seed(config.seed, 4))
    opt = make_optimizer(R, config)
    x_all = to_nchw(dataset.images)
    targets = torch.as_tensor(rank_encode(dataset.ages, config.max_age, config.bin_width))
    R.train()
    for epoch in range(config.pretrain_r_epochs):
        rng = np.random.default_rng([config.seed, 5, epoch])
        total, count = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            idx = torch.as_tensor(idx)
            loss = rank_loss(R(x_all[idx]), targets[idx])
            _check_finite(rank=loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        logger.info("pretrain R epoch %d/%d rank_loss %.5f", epoch + 1, config.pretrain_r_epochs, total / count)
    freeze(R)
    report = evaluate_mae(R, eval_dataset if eval_dataset is not None else dataset, config.bin_width)
    R.final_mae = report["mae_mean"]
    logger.info("pretrain R done: MAE %.3f +- %.3f years", report["mae_mean"], report["mae_std"])
    return R


def pretrain_encoder(dataset: Dataset, config: TrainConfig) -> tuple[nn.Module, nn.Module]:
    """Train E with a throwaway age-free decoder on mean squared reconstruction.

    Returns the still-trainable E and its frozen copy E_pre.
    """
    spec = config.spec
    E = init_params(spec, "E", _sub_seed(config.seed, 1))
    decoder = Generator(spec, age_conditioned=False)
    reset_parameters(decoder, torch.Generator().manual_seed(_sub_seed(config.seed, 6)))
    modules: list[nn.Module] = [E, decoder]
    id_head, id_targets = None, None
    if config.encoder_id_weight > 0:
        names = sorted(set(dataset.identities))
        lookup = {n: k for k, n in enumerate(names)}
        id_targets = torch.as_tensor([lookup[n] for n in dataset.identities])
        id_head = nn.Linear(spec.latent_dim, len(names))
        modules.append(id_head)
    opt = make_optimizer(modules, config)
    x_all = to_nchw(dataset.images)
    for epoch in range(config.pretrain_e_epochs):
        rng = np.random.default_rng([config.seed, 7, epoch])
        total, count = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            idx = torch.as_tensor(idx)
            x = x_all[idx]
            z = E(x)
            loss = (decoder(z) - x).pow(2).mean()
            if id_head is not None:
                loss = loss + config.encoder_id_weight * nn.functional.cross_entropy(id_head(z), id_targets[idx])
            _check_finite(reconstruction=loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        logger.info("pretrain E epoch %d/%d loss %.5f", epoch + 1, config.pretrain_e_epochs, total / count)
    E_pre = freeze(copy.deepcopy(E))
    E.decoder_psnr = reconstruction_psnr(lambda x: decoder(E(x)), dataset)
    logger.info("pretrain E done: reconstruction PSNR %.2f dB", E.decoder_psnr)
    return E, E_pre


@torch.no_grad()
def reconstruction_psnr(reconstruct, dataset: Dataset, batch_size: int = 256) -> float:
    """PSNR (peak 1.0) of ``reconstruct`` over the dataset, from the pooled MSE."""
    sq, n = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        x = to_nchw(dataset.images[i : i + batch_size])
        sq += float((reconstruct(x).double() - x.double()).pow(2).sum())
        n += x.numel()
    mse = sq / n
    return float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# phase 3


@dataclass
class TrainState:
    config: TrainConfig
    E: nn.Module
    G: nn.Module
    D: nn.Module
    E_pre: nn.Module | None = None
    R: nn.Module | None = None
    epoch: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)
    frozen_digests: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        spec = config.spec
        return cls(
            config=config,
            E=init_params(spec, "E", _sub_seed(config.seed, 1)),
            G=init_params(spec, "G", _sub_seed(config.seed, 2)),
            D=init_params(spec, "D", _sub_seed(config.seed, 3)),
        )

    @property
    def spec(self) -> NetworkSpec:
        return self.config.spec

    @property
    def ready(self) -> bool:
        return self.R is not None and self.E_pre is not None

    def set_regressor(self, R: nn.Module):
        self.R = freeze(R)
        self.frozen_digests["R"] = param_digest(R)

    def set_encoder(self, E: nn.Module, E_pre: nn.Module):
        self.E = E
        self.E_pre = freeze(E_pre)
        self.frozen_digests["E_pre"] = param_digest(E_pre)
        self.opt_g = None

    def optimizers(self):
        if self.opt_g is None:
            self.opt_g = make_optimizer([self.E, self.G], self.config)
        if self.opt_d is None:
            self.opt_d = make_optimizer(self.D, self.config)
        return self.opt_g, self.opt_d

    def check_frozen(self):
        for name in ("R", "E_pre"):
            net = getattr(self, name)
            if net is not None and param_digest(net) != self.frozen_digests.get(name):
                raise RuntimeError(f"frozen network {name} changed during training")

    def networks(self) -> dict[str, nn.Module]:
        nets = {"E": self.E, "G": self.G, "D": self.D}
        if self.E_pre is not None:
            nets["E_pre"] = self.E_pre
        if self.R is not None:
            nets["R"] = self.R
        return nets


def _norm(ages_years, max_age) -> torch.Tensor:
    return torch.as_tensor(np.asarray(ages_years, dtype=np.float64) / max_age, dtype=torch.float32)


def discriminator_backward(state: TrainState, x, age_in_norm, fake, age_out_norm) -> torch.Tensor:
    """Zero D's gradients and back-propagate the discriminator objective; fakes are detached."""
    state.D.zero_grad(set_to_none=True)
    loss = discriminator_objective(state.D, x, age_in_norm, fake, age_out_norm)
    _check_finite(gan_d=loss)
    loss.backward()
    return loss


def generator_backward(state: TrainState, x, fake, age_in_years, age_out_years, gan_d: float = float("nan")):
    """Zero E/G gradients and back-propagate the weighted generator objective into E and G only."""
    cfg = state.config
    age_out_norm = _norm(age_out_years, cfg.max_age)
    state.E.zero_grad(set_to_none=True)
    state.G.zero_grad(set_to_none=True)
    state.D.requires_grad_(False)
    try:
        pix = pixel_loss(x, fake, torch.as_tensor(age_in_years), torch.as_tensor(age_out_years))
        ident = identity_loss(state.E_pre, x, fake)
        adv = gan_g_loss(state.D, fake, age_out_norm, cfg.g_loss_variant)
        scale = cfg.max_age if cfg.regression_units == "years" else 1.0
        reg = regression_loss(state.R, fake, age_out_norm, scale)
        _check_finite(pixel=pix, identity=ident, gan_g=adv, regression=reg)
        total, report = generator_objective(cfg.weights, pix, ident, adv, reg, gan_d)
        total.backward()
    finally:
        state.D.requires_grad_(True)
    return total, report


def train_step(state: TrainState, x: torch.Tensor, age_in_years, target_years=None) -> LossReport:
    """One D update followed by one E+G update. Mutates ``state``; returns the losses."""
    if not state.ready:
        raise PhaseError("train_step requires both pre-training phases to have completed")
    cfg = state.config
    age_in_years = np.asarray(age_in_years, dtype=np.float64)
    if target_years is None:
        if cfg.target_ages == "input":
            target_years = age_in_years
        else:
            if state.rng is None:
                state.rng = np.random.default_rng([cfg.seed, 2, state.epoch])
            target_years = state.rng.uniform(0.0, cfg.max_age, size=len(age_in_years))
    target_years = np.asarray(target_years, dtype=np.float64)
    opt_g, opt_d = state.optimizers()
    state.E.train()
    state.G.train()
    state.D.train()

    fake = state.G(state.E(x), _norm(target_years, cfg.max_age))

    loss_d = discriminator_backward(state, x, _norm(age_in_years, cfg.max_age), fake, _norm(target_years, cfg.max_age))
    opt_d.step()

    _, report = generator_backward(state, x, fake, age_in_years, target_years, loss_d.item())
    opt_g.step()

    state.iteration += 1
    return report


def _append_log(path: Path, rows: list[list]):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerows(rows)


def run_pretraining(state: TrainState, dataset: Dataset, eval_dataset: Dataset | None = None) -> TrainState:
    if state.R is None:
        state.set_regressor(pretrain_regressor(dataset, state.config, eval_dataset))
    if state.E_pre is None:
        state.set_encoder(*pretrain_encoder(dataset, state.config))
    return state


def train_epoch(state: TrainState, x_all: torch.Tensor, ages: np.ndarray, log_path: Path | None = None, t0: float | None = None) -> dict:
    cfg = state.config
    t0 = time.time() if t0 is None else t0
    state.rng = np.random.default_rng([cfg.seed, 2, state.epoch])
    order_rng = np.random.default_rng([cfg.seed, 3, state.epoch])
    sums = np.zeros(len(LossReport.COLUMNS))
    count = 0
    rows = []
    for idx in _batches(len(ages), cfg.batch_size, order_rng):
        report = train_step(state, x_all[torch.as_tensor(idx)], ages[idx])
        sums += np.array(report.as_row()) * len(idx)
        count += len(idx)
        rows.append([state.epoch, state.iteration, *report.as_row(), round(time.time() - t0, 3)])
    state.epoch += 1
    state.check_frozen()
    means = dict(zip(LossReport.COLUMNS, (sums / count).tolist()))
    means["epoch"] = state.epoch
    state.history.append(means)
    if log_path is not None:
        _append_log(log_path, rows)
    return means


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    state: TrainState | None = None,
    eval_dataset: Dataset | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Run whatever phases remain for ``state`` (fresh if None) up to ``config.epochs`` phase-3 epochs.

    ``stop_after`` ends the run early after that many phase-3 epochs in this call,
    which is how interruption is simulated in tests.
    """
    if dataset.image_size != config.image_size or dataset.channels != config.channels:
        raise ValueError("dataset image shape does not match the configuration")
    if dataset.max_age != config.max_age:
        raise ValueError(f"dataset max_age {dataset.max_age} != config max_age {config.max_age}")
    state = state or TrainState.create(config)
    state.config = config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if not state.ready:
        run_pretraining(state, dataset, eval_dataset)
        if out is not None:
            save_checkpoint(state, out / "pretrained")

    x_all = to_nchw(dataset.images)
    t0 = time.time()
    done = 0
    while state.epoch < config.epochs:
        means = train_epoch(state, x_all, dataset.ages, out / LOG_NAME if out else None, t0)
        logger.info(
            "epoch %d/%d total_g %.4f pixel %.5f identity %.4f gan_g %.4f regression %.4f gan_d %.4f",
            state.epoch, config.epochs, means["total_g"], means["pixel"], means["identity"],
            means["gan_g"], means["regression"], means["gan_d"],
        )
        if out is not None and (state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs):
            save_checkpoint(state, out / f"epoch_{state.epoch:04d}")
            save_checkpoint(state, out / "latest")
        done += 1
        if stop_after is not None and done >= stop_after:
            break
    return state


# ---------------------------------------------------------------------------
# checkpoints

_BLOB_MAGIC = b"CMAB"
_BLOB_VERSION = 1


def write_blob(path, tensors: dict[str, torch.Tensor]):
    """Little-endian float32 blob: magic, version, count, then per tensor a length-prefixed
    name, ndim, dims and the raw values."""
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<II", _BLOB_VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_blob(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _BLOB_MAGIC:
        raise CheckpointError(f"{path} is not a parameter blob")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _BLOB_VERSION:
        raise CheckpointError(f"unsupported blob version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out


def _module_tensors(net: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.float() for k, v in net.state_dict().items()}


def _load_module(net: nn.Module, blob: dict[str, np.ndarray]):
    current = net.state_dict()
    if set(current) != set(blob):
        raise CheckpointError("parameter names in blob do not match the network")
    net.load_state_dict({k: torch.as_tensor(blob[k]).to(current[k].dtype) for k in current})


def _optimizer_tensors(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{idx}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def _load_optimizer(opt: torch.optim.Optimizer, blob: dict[str, np.ndarray]):
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in blob.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(arr)
    sd["state"] = state
    opt.load_state_dict(sd)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``manifest.json`` plus one blob per network (and optimizer) atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        files = {}
        for name, net in state.networks().items():
            write_blob(tmp / f"{name}.bin", _module_tensors(net))
            files[name] = {"file": f"{name}.bin", "digest": _file_digest(tmp / f"{name}.bin")}
        optim = {}
        if state.ready:
            for name, opt in zip(("opt_g", "opt_d"), state.optimizers()):
                write_blob(tmp / f"{name}.bin", _optimizer_tensors(opt))
                optim[name] = f"{name}.bin"
        metrics = state.history[-1] if state.history else {}
        digest = hashlib.sha256(json.dumps([files, metrics], sort_keys=True).encode()).hexdigest()[:16]
        manifest = {
            "format": "cmaae-checkpoint",
            "version": __version__,
            "spec": state.spec.to_dict(),
            "spec_fingerprint": state.spec.fingerprint(),
            "config": state.config.to_dict(),
            "loss_weights": state.config.weights.to_dict(),
            "epoch": state.epoch,
            "iteration": state.iteration,
            "phases": {"regressor": state.R is not None, "encoder": state.E_pre is not None},
            "frozen_digests": state.frozen_digests,
            "networks": files,
            "optimizers": optim,
            "metrics": metrics,
            "metrics_digest": digest,
            "history": state.history,
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2))
        old = None
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    f = Path(path) / MANIFEST
    if not f.exists():
        raise CheckpointError(f"no {MANIFEST} in {path}")
    return json.loads(f.read_text())


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState. A ``config`` whose architecture differs from the checkpoint is an error."""
    path = Path(path)
    manifest = read_manifest(path)
    saved = TrainConfig.from_dict(manifest["config"])
    if saved.spec.fingerprint() != manifest["spec_fingerprint"]:
        raise CheckpointError("manifest spec fingerprint does not match its recorded spec")
    if config is not None and config.spec.fingerprint() != manifest["spec_fingerprint"]:
        raise CheckpointError(
            f"spec fingerprint mismatch: checkpoint {manifest['spec_fingerprint']} vs config {config.spec.fingerprint()}"
        )
    config = config or saved
    state = TrainState.create(config)
    spec = config.spec
    for name, info in manifest["networks"].items():
        blob_path = path / info["file"]
        if _file_digest(blob_path) != info["digest"]:
            raise CheckpointError(f"{blob_path} is corrupt (digest mismatch)")
        blob = read_blob(blob_path)
        if name in ("E", "G", "D"):
            _load_module(getattr(state, name), blob)
        elif name == "E_pre":
            net = init_params(spec, "E", 0)
            _load_module(net, blob)
            state.E_pre = freeze(net)
        elif name == "R":
            net = init_params(spec, "R", 0)
            _load_module(net, blob)
            state.R = freeze(net)
    state.frozen_digests = dict(manifest.get("frozen_digests", {}))
    state.epoch = manifest["epoch"]
    state.iteration = manifest["iteration"]
    state.history = list(manifest.get("history", []))
    if state.ready:
        state.check_frozen()
        opt_g, opt_d = state.optimizers()
        for name, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
            if name in manifest["optimizers"]:
                _load_optimizer(opt, read_blob(path / manifest["optimizers"][name]))
    return state
