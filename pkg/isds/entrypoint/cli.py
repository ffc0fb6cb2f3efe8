"""
python -m isds.entrypoint.cli --seed 1227 --out outputs/setting_a generate --setting A
python -m isds.entrypoint.cli --out outputs/msm_a train --kind msm --data outputs/setting_a/train
python -m isds.entrypoint.cli --out outputs/msm_a evaluate --checkpoint outputs/msm_a/checkpoint.json --data outputs/setting_a/heldout
python -m isds.entrypoint.cli --workers 4 --out outputs/select select --kind msm --train outputs/d/train --heldout outputs/d/heldout --k-values 1 2 3 4 5
python -m isds.entrypoint.cli validate --checkpoint outputs/msm_a/checkpoint.json
"""
import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional

from omegaconf import OmegaConf

from isds.data.container import load_container, load_ground_truth, save_ground_truth
from isds.data.presets import ablation_config, setting_config
from isds.data.synthgen import GeneratorConfig, generate_dataset
from isds.metrics.report import EvalConfig, evaluate_model, write_metric_rows
from isds.models.msm.assumptions import CheckConfig, validate_assumptions
from isds.models.msm.configuration_msm import MsmConfig
from isds.models.msm.modeling_msm import MsmModel
from isds.models.sds.configuration_sds import SdsConfig
from isds.models.sds.modeling_sds import SdsModel
from isds.selection.sweep import MODEL_KINDS, GridSpec, select_from_grid, sweep
from isds.trainer.msm_trainer import OptimizerConfig, fit_msm
from isds.trainer.sds_trainer import TrainSchedule, train_sds
from isds.utils.checkpoint import load_checkpoint, save_checkpoint
from isds.utils.config import load_config
from isds.utils.exceptions import ConfigError, IsdsError, NumericError
from isds.utils.io import dump_json
from isds.utils.logging import get_logger, set_logging
from isds.utils.seed import set_seed
from isds.utils.vars import (
    ABLATIONS,
    CHECKPOINT_NAME,
    EXIT_OK,
    EXIT_TRAINING_FAIL,
    EXIT_USAGE,
    EXIT_VALIDATION_FAIL,
    FIT_REPORT_NAME,
    GROUND_TRUTH_SIDECAR_NAME,
    METRIC_CSV_NAME,
    METRIC_REPORT_NAME,
    SETTINGS,
)

logger = get_logger(__name__)

# eta of the sds stages on synthetic data
SYNTHETIC_ETA = 0.05


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_value(filepath: Optional[str], key: str):
    if filepath is None or not Path(filepath).exists():
        return None
    return OmegaConf.to_container(OmegaConf.load(filepath)).get(key)


def _maybe_load(stem: Path, role: str):
    if not stem.with_suffix(".json").exists():
        return None
    tensor, header = load_container(stem)
    if header.role != role:
        raise ConfigError(f"{stem} holds {header.role} data, expected {role}", field="data")
    return tensor


def generator_config_from_args(args) -> GeneratorConfig:
    """Defaults < setting or ablation preset < config file < flags."""
    setting = args.setting or _file_value(args.config, "setting")
    ablation = args.ablation or _file_value(args.config, "ablation")
    if setting not in (None, "custom") and setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}, expected one of {SETTINGS}", field="setting")
    if ablation not in (None, "none") and ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}", field="ablation")
    if ablation not in (None, "none"):
        base = ablation_config(ablation, lag=args.lag or 1)
    elif setting not in (None, "custom"):
        base = setting_config(setting)
    else:
        base = GeneratorConfig
    overrides = {"seed": args.seed, "num_sequences": args.num_sequences, "num_heldout": args.num_heldout}
    if args.lag is not None and ablation in (None, "none"):
        overrides["lag"] = args.lag
    return load_config(base, args.config, overrides)


def cmd_generate(args) -> int:
    config = generator_config_from_args(args)
    out = _out_dir(args, f"outputs/generate_{config.setting}_{config.seed}")
    train = generate_dataset(config, "train")
    save_ground_truth(train, out / "train")
    if config.num_heldout > 0:
        heldout = generate_dataset(config, "heldout", generator=train.generator)
        save_ground_truth(heldout, out / "heldout")
    dump_json(dataclasses.asdict(config), out / "config.json", indent=2)
    logger.info(f"datasets written to {out}")
    return EXIT_OK


def _model_for(kind: str, args, data_dim: int):
    overrides = {"seed": args.seed}
    if kind == "msm":
        overrides.update(latent_dim=data_dim, num_regimes=args.num_regimes, lag=args.lag)
        config = load_config(MsmConfig, args.model_config, overrides)
        return MsmModel(config)
    msm = {
        k: v
        for k, v in (("num_regimes", args.num_regimes), ("lag", args.lag), ("latent_dim", args.latent_dim))
        if v is not None
    }
    overrides.update(obs_dim=data_dim, msm=msm or None)
    config = load_config(SdsConfig, args.model_config, overrides)
    if "num_initial" not in (_file_value(args.model_config, "msm") or {}):
        # K0 follows the final K unless the file pins it
        config.msm = dataclasses.replace(config.msm, num_initial=None)
    return SdsModel(config)


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    role = "latent" if args.kind == "msm" else "observed"
    stem = data_dir / ("latents" if args.kind == "msm" else "observations")
    if not stem.with_suffix(".json").exists():
        raise FileNotFoundError(f"no {role} container in {data_dir}")
    data, header = load_container(stem)
    model = _model_for(args.kind, args, data.shape[-1])
    out = _out_dir(args, f"outputs/train_{args.kind}")
    if args.kind == "msm":
        trainer = load_config(OptimizerConfig, args.config, {"seed": args.seed})
        report = fit_msm(model, data, trainer)
    else:
        trainer = load_config(TrainSchedule(eta=SYNTHETIC_ETA), args.config, {"seed": args.seed})
        report = train_sds(model, data, trainer)
    metadata = {
        "stage": "msm" if args.kind == "msm" else "final",
        "seed": args.seed,
        "data": str(data_dir),
        "data_crc32": header.crc32,
        "trainer": dataclasses.asdict(trainer),
        "best_restart": report.best_restart,
        "best_objective": report.best_objective,
    }
    save_checkpoint(model, out / CHECKPOINT_NAME, metadata)
    report.save(out / FIT_REPORT_NAME)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, metadata = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    observations = _maybe_load(data_dir / "observations", "observed")
    latents = _maybe_load(data_dir / "latents", "latent")
    regimes = _maybe_load(data_dir / "regimes", "regime")
    truth_dir = Path(args.truth) if args.truth else data_dir
    truth = None
    if (truth_dir / GROUND_TRUTH_SIDECAR_NAME).exists():
        truth = load_ground_truth(truth_dir)

    is_sds = isinstance(model, SdsModel)
    data = observations if is_sds else latents
    if data is None:
        raise FileNotFoundError(f"no {'observed' if is_sds else 'latent'} container in {data_dir}")
    expected = model.obs_dim if is_sds else model.latent_dim
    if data.shape[-1] != expected:
        raise ConfigError(f"data dim {data.shape[-1]} does not match the model's {expected}", field="data")

    config = load_config(EvalConfig, args.config, {"seed": metadata.get("seed", args.seed)})
    report = evaluate_model(model, observations, latents, regimes, truth, config)
    out = _out_dir(args, Path(args.checkpoint).parent)
    report.save(out / METRIC_REPORT_NAME)
    setting = truth.config.setting if truth is not None else config.setting
    write_metric_rows([report.to_row(seed=config.seed, setting=setting)], out / METRIC_CSV_NAME)
    print(report.to_row(seed=config.seed, setting=setting))
    return EXIT_OK


def cmd_select(args) -> int:
    overrides = {
        "kind": args.kind,
        "workers": args.workers,
        "k_values": args.k_values,
        "m_values": args.m_values,
    }
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    grid_spec = load_config(GridSpec, args.config, overrides)
    stem = "latents" if grid_spec.kind == "msm" else "observations"
    train, _ = load_container(Path(args.train) / stem)
    heldout, _ = load_container(Path(args.heldout) / stem)
    base = OmegaConf.to_container(OmegaConf.load(args.model_config)) if args.model_config else {}
    if grid_spec.kind == "msm":
        base.setdefault("latent_dim", train.shape[-1])
    else:
        base.setdefault("obs_dim", train.shape[-1])
    trainer = OmegaConf.to_container(OmegaConf.load(args.trainer_config)) if args.trainer_config else {}

    grid = sweep(train, heldout, grid_spec, base, trainer)
    out = _out_dir(args, "outputs/select")
    grid.save_csv(out / "selection.csv")
    choice = select_from_grid(grid, grid_spec.rho)
    dump_json(dataclasses.asdict(choice), out / "choice.json", indent=2)
    print(f"selected K={choice.num_regimes} M={choice.lag}")
    return EXIT_OK


def cmd_validate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    check = load_config(CheckConfig, args.config, {"seed": args.seed})
    prior = model.prior if isinstance(model, SdsModel) else model
    report = validate_assumptions(prior, check)
    print(report.format())
    if args.out:
        dump_json(report.to_dict(), _out_dir(args, args.out) / "assumptions.json", indent=2)
    return EXIT_OK if report.passed else EXIT_VALIDATION_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isds", description="Identifiable switching models.")
    parser.add_argument("--seed", type=int, default=None, help="Top-level seed.")
    parser.add_argument("--workers", type=int, default=1, help="Parallel workers of the selection grid.")
    parser.add_argument("--config", type=str, default=None, help="JSON/YAML config of the subcommand.")
    parser.add_argument("--out", type=str, default=None, help="Output directory.")
    parser.add_argument("--log-level", dest="log_level", type=str, default="INFO", help="Level of the isds loggers.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="Sample a synthetic dataset.")
    generate.add_argument("--setting", type=str, default=None, help=f"Preset, one of {SETTINGS}.")
    generate.add_argument("--ablation", type=str, default=None, help="zero or overlap.")
    generate.add_argument("--lag", type=int, default=None)
    generate.add_argument("--num-sequences", dest="num_sequences", type=int, default=None)
    generate.add_argument("--num-heldout", dest="num_heldout", type=int, default=None)
    generate.set_defaults(handler=cmd_generate)

    train = subparsers.add_parser("train", help="Fit an MSM on latents or an SDS on observations.")
    train.add_argument("--kind", choices=MODEL_KINDS, required=True)
    train.add_argument("--data", type=str, required=True, help="Split directory.")
    train.add_argument("--model-config", dest="model_config", type=str, default=None)
    train.add_argument("--num-regimes", dest="num_regimes", type=int, default=None)
    train.add_argument("--lag", type=int, default=None)
    train.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    train.set_defaults(handler=cmd_train)

    evaluate = subparsers.add_parser("evaluate", help="Score a checkpoint on a held-out split.")
    evaluate.add_argument("--checkpoint", type=str, required=True)
    evaluate.add_argument("--data", type=str, required=True, help="Split directory.")
    evaluate.add_argument("--truth", type=str, default=None, help="Sidecar directory, defaults to --data.")
    evaluate.set_defaults(handler=cmd_evaluate)

    select = subparsers.add_parser("select", help="Sweep K and M and pick the elbow.")
    select.add_argument("--kind", choices=MODEL_KINDS, default=None)
    select.add_argument("--train", type=str, required=True)
    select.add_argument("--heldout", type=str, required=True)
    select.add_argument("--k-values", dest="k_values", type=int, nargs="*", default=None)
    select.add_argument("--m-values", dest="m_values", type=int, nargs="*", default=None)
    select.add_argument("--model-config", dest="model_config", type=str, default=None)
    select.add_argument("--trainer-config", dest="trainer_config", type=str, default=None)
    select.set_defaults(handler=cmd_select)

    validate = subparsers.add_parser("validate", help="Check the identifiability assumptions of a checkpoint.")
    validate.add_argument("--checkpoint", type=str, required=True)
    validate.set_defaults(handler=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command in ("generate", "train"):
        args.seed = 0
    set_logging(args.log_level.upper())
    if args.seed is not None:
        set_seed(args.seed)
    try:
        return args.handler(args)
    except NumericError as err:
        logger.error(f"training failed: {err}")
        return EXIT_TRAINING_FAIL
    except (IsdsError, FileNotFoundError) as err:
        logger.error(str(err))
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
