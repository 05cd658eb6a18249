"""Command-line entry point: ``cmaae <command> [options]``.

Exit codes: 0 success, 1 user error (bad arguments, missing data, incompatible
checkpoint), 2 internal error or training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from .data import DatasetError, SynthConfig, gen_synthetic_dataset, load_dataset, preprocess_image, save_dataset
from .training import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    TrainState,
    format_config_text,
    load_checkpoint,
    parse_config_text,
    pretrain_encoder,
    pretrain_regressor,
    save_checkpoint,
    train,
)

logger = logging.getLogger("cmaae")

COMMANDS = ("gen-synthetic", "pretrain-age", "pretrain-encoder", "train", "synthesize", "evaluate", "ablate", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--seed", type=int, help="random seed; a fresh one is chosen and printed when omitted")
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training configuration (overrides --config)")
    g.add_argument("--preset", choices=("full", "desk"), default="desk", help="base configuration before file/flag overrides")
    g.add_argument("--weights-preset", choices=("morph", "utkface"), help="loss-weight preset")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=type(f.default), default=None)


def _add_data_flags(p: argparse.ArgumentParser, split: str = "train"):
    p.add_argument("--data", type=Path, required=True, help="dataset root containing <split>/ folders")
    p.add_argument("--split", default=split)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmaae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="render a synthetic face dataset")
    _add_common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--n-identities", type=int, default=500)
    p.add_argument("--images-per-identity", type=int, default=10)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--max-age", type=float, default=60.0)
    p.add_argument("--channels", type=int, default=3, choices=(1, 3))

    p = sub.add_parser("pretrain-age", help="pre-train the ordinal age regressor R")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--eval-split", help="split for the reported MAE (default: the training split)")
    _add_train_flags(p)

    p = sub.add_parser("pretrain-encoder", help="pre-train the encoder E (and its frozen copy)")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint to extend, e.g. from pretrain-age")
    _add_train_flags(p)

    p = sub.add_parser("train", help="run all remaining phases, ending with adversarial training")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_train_flags(p)

    p = sub.add_parser("synthesize", help="age sweep montage for one or more images")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, action="append", required=True)
    p.add_argument("--ages", required=True, help="comma-separated target ages in years")

    p = sub.add_parser("evaluate", help="aging accuracy and identity metrics on a dataset split")
    _add_common(p)
    _add_data_flags(p, split="test")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--ages-per-item", type=int, default=4)

    p = sub.add_parser("ablate", help="paired trainings with and without the regression loss")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--test-split", default="test")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds, one paired run each")
    p.add_argument("--ages-per-item", type=int, default=4)
    p.add_argument("--identity-arm", action="store_true", help="also train a lambda_i = 0 arm")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _add_common(p, out_required=False)
    p.add_argument("--coords", type=int, default=64)
    return parser


# ---------------------------------------------------------------------------


def _resolve_seed(args, file_values: dict | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if file_values and "seed" in file_values:
        return file_values["seed"]
    seed = secrets.randbelow(2**31)
    print(f"seed: {seed}")
    return seed


def _file_values(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    if not args.config.exists():
        raise FileNotFoundError(f"config file not found: {args.config}")
    return parse_config_text(args.config.read_text())


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """defaults/preset < checkpoint config < config file < CLI flags."""
    values = (base.to_dict() if base is not None else
              (TrainConfig.desk() if getattr(args, "preset", "desk") == "desk" else TrainConfig()).to_dict())
    file_values = _file_values(args)
    values.update(file_values)
    if getattr(args, "weights_preset", None):
        from .losses import PRESETS

        w = PRESETS[args.weights_preset]
        values.update(lambda_p=w.pixel, lambda_i=w.identity, lambda_g=w.gan, lambda_r=w.regression)
    for key, val in vars(args).items():
        if key.startswith("cfg_") and val is not None:
            values[key[4:]] = val
    values["seed"] = _resolve_seed(args, file_values) if base is None or args.seed is not None else values["seed"]
    return TrainConfig.from_dict(values)


def _load(args, cfg: TrainConfig, split: str | None = None):
    return load_dataset(args.data, split or args.split, cfg.image_size, cfg.max_age, cfg.channels)


def _write_config(out: Path, cfg: TrainConfig):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config_text(cfg))


def cmd_gen_synthetic(args) -> int:
    cfg = SynthConfig(
        image_size=args.image_size,
        max_age=args.max_age,
        n_identities=args.n_identities,
        images_per_identity=args.images_per_identity,
        seed=_resolve_seed(args, _file_values(args)),
        channels=args.channels,
    )
    folder = save_dataset(gen_synthetic_dataset(cfg), args.out, args.split)
    print(f"wrote {cfg.n_identities * cfg.images_per_identity} images to {folder}")
    return 0


def cmd_pretrain_age(args) -> int:
    from .ordinal import evaluate_mae, write_mae_report

    cfg = resolve_config(args)
    ds = _load(args, cfg)
    eval_ds = _load(args, cfg, args.eval_split) if args.eval_split else None
    state = TrainState.create(cfg)
    state.set_regressor(pretrain_regressor(ds, cfg, eval_ds))
    _write_config(args.out, cfg)
    save_checkpoint(state, args.out / "checkpoint")
    report = evaluate_mae(state.R, eval_ds or ds, cfg.bin_width, name=args.eval_split or args.split)
    write_mae_report(report, args.out / "mae.json")
    print(f"MAE {report['mae_mean']:.3f} +- {report['mae_std']:.3f} years (n={report['n']})")
    return 0


def cmd_pretrain_encoder(args) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        cfg = resolve_config(args, base=state.config)
        if cfg.spec.fingerprint() != state.spec.fingerprint():
            raise CheckpointError("architecture flags differ from the checkpoint")
        state.config = cfg
    else:
        cfg = resolve_config(args)
        state = TrainState.create(cfg)
    ds = _load(args, cfg)
    E, E_pre = pretrain_encoder(ds, cfg)
    state.set_encoder(E, E_pre)
    _write_config(args.out, cfg)
    save_checkpoint(state, args.out / "checkpoint")
    print(f"reconstruction PSNR {E.decoder_psnr:.2f} dB")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        saved = load_checkpoint(args.resume)
        cfg = resolve_config(args, base=saved.config)
        state = load_checkpoint(args.resume, cfg)
    else:
        cfg = resolve_config(args)
        state = None
    ds = _load(args, cfg)
    _write_config(args.out, cfg)
    state = train(cfg, ds, args.out, state=state)
    last = state.history[-1] if state.history else {}
    print(f"finished epoch {state.epoch}; total_g {last.get('total_g', float('nan')):.4f}")
    return 0


def _parse_ages(text: str) -> list[float]:
    try:
        ages = [float(a) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(f"--ages must be comma-separated numbers: {exc}") from None
    if not ages:
        raise UsageError("--ages is empty")
    return ages


def cmd_synthesize(args) -> int:
    from PIL import Image

    from .evaluation import AgingModel, synthesize_sweep

    state = load_checkpoint(args.checkpoint)
    model = AgingModel.from_state(state)
    images = []
    for path in args.image:
        if not path.exists():
            raise FileNotFoundError(f"image not found: {path}")
        with Image.open(path) as im:
            images.append(preprocess_image(im, state.config.image_size, state.config.channels))
    grid = synthesize_sweep(model, np.stack(images), _parse_ages(args.ages))
    args.out.mkdir(parents=True, exist_ok=True)
    png, sidecar = grid.save(args.out / "montage.png", [str(p) for p in args.image])
    print(f"wrote {png} and {sidecar}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import AgingModel, evaluate_model
    from .ordinal import evaluate_mae, write_mae_report

    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    ds = _load(args, cfg)
    seed = _resolve_seed(args)
    report = evaluate_model(AgingModel.from_state(state), ds, args.ages_per_item, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    report.save(args.out / "eval.json")
    if state.R is not None:
        write_mae_report(evaluate_mae(state.R, ds, cfg.bin_width, name=args.split), args.out / "mae.json")
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ablation_with_without_R

    cfg = resolve_config(args)
    train_set = _load(args, cfg)
    test_set = _load(args, cfg, args.test_split)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise UsageError("--seeds must be comma-separated integers") from None
    extra = {"without_identity": {"lambda_i": 0.0}} if args.identity_arm else None
    _write_config(args.out, cfg)
    summary = ablation_with_without_R(cfg, train_set, test_set, seeds, args.out, args.ages_per_item, extra)
    print(f"ratio={summary['ratio']:.4f} pass={summary['pass']}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, passed, run_gradcheck

    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(seed=seed, n_coords=args.coords)
    for name, r in results.items():
        status = "ok" if r["max_rel_error"] < TOLERANCE else "FAIL"
        print(f"{name:22s} max_rel_error={r['max_rel_error']:.3e} coords={r['coords']} {status}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.json").write_text(json.dumps(results, indent=2))
    return 0 if passed(results) else 2


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain-age": cmd_pretrain_age,
    "pretrain-encoder": cmd_pretrain_encoder,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
