# harmctl/main.py

import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
from pydantic import ValidationError
import numpy as np
import pandas as pd

from harmctl import __version__
from harmctl.config import RunConfig, Settings, build_predictor, load_run_config
from harmctl.data.loaders import load_dataset, load_set_records, split_dataset
from harmctl.data.models import Dataset, SetPredictionRecord
from harmctl.errors import ConfigInvalid, HarmCtlError, LambdaOutOfRange
from harmctl.services.calibration import (
    ControlMode,
    harm_controlling_set_cf,
    harm_controlling_set_interv,
    select_alpha_prime,
)
from harmctl.services.experiments import (
    coverage_and_size,
    run_tradeoff,
    sweep_calibration_fraction,
    tradeoff_summary,
)
from harmctl.services.expert_mnl import accuracy_curve, empirical_accuracy, fit_confusion, stratify_difficulty
from harmctl.services.harm_risk import risk_table
from harmctl.services.monotonicity import verify_interventional_monotonicity
from harmctl.services.report_service import FLOAT_FORMAT, ReportService, to_json
from harmctl.services.scm_oracle import coverage_trial, generate_world, simulate_set_records, world_to_dataset
from harmctl.services.set_predictors import SetValuedPredictor

logger = logging.getLogger("harmctl")


# click >= 8.2 signals a bare `harmctl` through a UsageError subclass; that still prints help.
_HELP_ERRORS = tuple(filter(None, [getattr(click.exceptions, "NoArgsIsHelpError", None)]))


def _usage_failure(ctx: click.Context, exc: click.UsageError) -> None:
    click.echo(to_json(ConfigInvalid(exc.format_message()).to_dict()))
    ctx.exit(ConfigInvalid.exit_code)


class HarmCtlGroup(click.Group):
    """Renders every failure as a JSON error object on stdout with its exit code."""

    def parse_args(self, ctx: click.Context, args: List[str]) -> List[str]:
        try:
            return super().parse_args(ctx, args)
        except click.UsageError as exc:
            if isinstance(exc, _HELP_ERRORS):
                raise
            _usage_failure(ctx, exc)

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except HarmCtlError as exc:
            logger.error(f"--- Main: {exc.code}: {exc.message} ---")
            click.echo(to_json(exc.to_dict()))
            ctx.exit(exc.exit_code)
        except click.UsageError as exc:
            _usage_failure(ctx, exc)
        except (click.exceptions.Exit, click.Abort):
            raise
        except Exception as exc:
            logger.exception("--- Main: Unexpected failure ---")
            click.echo(to_json({"error": "InternalError", "message": str(exc), "details": {}}))
            ctx.exit(4)


def _setup_logging(level: str) -> None:
    if not isinstance(logging.getLevelName(level.upper()), int):
        raise ConfigInvalid(f"unknown log level '{level}'", log_level=level)
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
        root.addHandler(handler)
    root.setLevel(level.upper())


# --- Shared options ---

def _float_list(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[List[float]]:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got '{value}'") from None


def _lambda_grid(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[Dict[str, float]]:
    """START:STOP[:STEP] onto the lambda_start / lambda_stop / lambda_step keys."""
    if value is None:
        return None
    parts = value.split(":")
    if len(parts) not in (2, 3):
        raise click.BadParameter(f"expected START:STOP[:STEP], got '{value}'")
    try:
        numbers = [float(p) for p in parts]
    except ValueError:
        raise click.BadParameter(f"expected START:STOP[:STEP], got '{value}'") from None
    return dict(zip(("lambda_start", "lambda_stop", "lambda_step"), numbers))


_OPTIONS: Dict[str, Callable] = {
    "scores": click.option("--scores", "scores_path", type=click.Path(dir_okay=False, path_type=Path)),
    "humans": click.option("--humans", "humans_path", type=click.Path(dir_okay=False, path_type=Path)),
    "set_records": click.option(
        "--set-records", "set_records_path", type=click.Path(dir_okay=False, path_type=Path),
        help="CSV of predictions made with prediction sets.",
    ),
    "noise_filter": click.option("--noise-filter", type=int, help="Keep only instances at this noise level."),
    "strict": click.option("--strict/--no-strict", default=None, help="Reject score rows not summing to 1."),
    "synthetic": click.option("--synthetic", is_flag=True, help="Use a synthetic world instead of CSV inputs."),
    "regime": click.option("--regime", help="Synthetic world regime: cf or interv."),
    "predictor": click.option("--predictor", help="threshold or saps."),
    "saps_w": click.option("--saps-w", type=float),
    "saps_w_grid": click.option(
        "--saps-w-grid", callback=_float_list, help="Comma-separated w candidates for SAPS.",
    ),
    "lambda_max": click.option("--lambda-max", type=float, help="Upper end of the SAPS lambda domain."),
    "alpha": click.option("--alpha", type=float),
    "mode": click.option("--mode", help="counterfactual or interventional."),
    "alpha_prime": click.option("--alpha-prime", type=float),
    "auto_alpha_prime": click.option(
        "--auto-alpha-prime", is_flag=True, help="Pick alpha' for the longest interval."
    ),
    "calib_frac": click.option("--calib-frac", type=float),
    "repetitions": click.option("--repetitions", "--reps", "repetitions", type=int),
    "lambda_step": click.option("--lambda-step", type=float),
    "lambda_grid": click.option("--lambda-grid", callback=_lambda_grid, help="START:STOP[:STEP]."),
    "cuts": click.option(
        "--cuts", "difficulty_cuts", callback=_float_list, help="Difficulty quantile cuts, e.g. 0.5.",
    ),
    "epsilon": click.option("--epsilon", "mnl_epsilon", type=float, help="Confusion-matrix smoothing."),
    "lam": click.option("--lam", type=float, help="A single lambda instead of the grid."),
    "n_calib": click.option("--n-calib", type=int),
    "n_test": click.option("--n-test", type=int),
    "output_dir": click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path)),
}


def with_options(*names: str):
    def decorate(fn):
        for name in reversed(names):
            fn = _OPTIONS[name](fn)
        return fn
    return decorate


_DATA = (
    "scores", "humans", "noise_filter", "strict", "synthetic", "regime",
    "predictor", "saps_w", "saps_w_grid", "lambda_max",
)


def _resolve(ctx: click.Context, **flags: Any) -> RunConfig:
    overrides = dict(ctx.obj["global"])
    synthetic = flags.pop("synthetic", False)
    regime = flags.pop("regime", None)
    if flags.pop("auto_alpha_prime", False):
        overrides["alpha_prime_policy"] = "auto"
    if flags.get("alpha_prime") is not None and "alpha_prime_policy" not in overrides:
        overrides["alpha_prime_policy"] = "fixed"
    grid = flags.pop("lambda_grid", None) or {}
    overrides.update(flags)
    overrides.update(grid)
    if synthetic or regime is not None:
        overrides["world_overrides"] = {"regime": regime} if regime is not None else {}
    config, _ = load_run_config(ctx.obj["config_path"], overrides)
    return config


def _load_inputs(config: RunConfig) -> Dataset:
    if config.world is not None:
        return world_to_dataset(generate_world(config.world))
    if config.scores_path is None or config.humans_path is None:
        raise ConfigInvalid("give --scores and --humans, or --synthetic / a world in the config file")
    return load_dataset(config.scores_path, config.humans_path, config.noise_filter, config.strict)


def _predictor_for(config: RunConfig, dataset: Dataset) -> Tuple[SetValuedPredictor, Dataset]:
    """The predictor and the data left for calibration once a SAPS validation split is set aside."""
    if not config.predictor_spec().needs_validation:
        return build_predictor(config), dataset
    validation, rest = split_dataset(dataset, config.validation_frac, config.seed or 0)
    return build_predictor(config, validation), rest


def _set_records(config: RunConfig, dataset: Dataset, predictor: SetValuedPredictor) -> Optional[List[SetPredictionRecord]]:
    if config.set_records_path is not None:
        return load_set_records(config.set_records_path, dataset.label_space)
    if config.world is not None:
        world = generate_world(config.world)
        rng = np.random.default_rng([config.seed or 0, 1])
        return simulate_set_records(world, predictor, rng, config.lambda_grid())
    return None


def _grid(config: RunConfig) -> np.ndarray:
    if config.lam is None:
        return config.lambda_grid()
    if config.lam > config.domain_max:
        raise LambdaOutOfRange(config.lam, config.domain_max)
    return np.asarray([config.lam])


def _emit_table(config: RunConfig, name: str, columns: Dict[str, Any], command: str) -> None:
    if config.output_dir is not None:
        service = ReportService(config.output_dir)
        service.write_table(name, columns)
        service.write_report(command, config.model_dump(mode="json"), [config.seed or 0])
    else:
        frame = pd.DataFrame({k: list(v) for k, v in columns.items()})
        click.echo(frame.to_csv(index=False, float_format=FLOAT_FORMAT, na_rep=""), nl=False)


def _emit_json(config: RunConfig, name: str, payload: Any, command: str) -> None:
    click.echo(to_json(payload))
    if config.output_dir is not None:
        service = ReportService(config.output_dir)
        service.write_json(name, payload)
        service.write_report(command, config.model_dump(mode="json"), [config.seed or 0])


# --- Commands ---

@click.group(cls=HarmCtlGroup)
@click.version_option(version=__version__, prog_name="harmctl")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), help="JSON run config.")
@click.option("--log-level", help="Logging level for stderr (default WARNING).")
@click.option("--jobs", type=int, help="Parallel repetitions (-1 = all cores).")
@click.option("--seed", type=int, help="Master seed (falls back to HARMCTL_SEED).")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], log_level: Optional[str], jobs: Optional[int], seed: Optional[int]):
    """Harm-controlling prediction sets for expert decision support."""
    try:
        settings = Settings()
    except ValidationError as e:
        raise ConfigInvalid("invalid HARMCTL_* environment", reason=str(e)) from None
    _setup_logging(log_level or settings.LOG_LEVEL)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["global"] = {k: v for k, v in {"jobs": jobs, "seed": seed}.items() if v is not None}


@cli.command()
@with_options(*_DATA, "alpha", "mode", "alpha_prime", "auto_alpha_prime", "output_dir")
@click.pass_context
def calibrate(ctx: click.Context, **flags):
    """Certify the lambda values that keep counterfactual harm below alpha."""
    config = _resolve(ctx, **flags)
    predictor, calibration = _predictor_for(config, _load_inputs(config))
    if config.mode is ControlMode.COUNTERFACTUAL:
        result = harm_controlling_set_cf(calibration, predictor, config.alpha)
    else:
        alpha_prime = config.fixed_alpha_prime()
        if alpha_prime is None:
            alpha_prime = select_alpha_prime(calibration, predictor, config.alpha, config.alpha_prime_step)
        result = harm_controlling_set_interv(calibration, predictor, config.alpha, alpha_prime)
    _emit_json(config, "calibration.json", {**result.model_dump(mode="json"), **predictor.describe()}, "calibrate")


@cli.command()
@with_options(
    *_DATA, "set_records", "alpha", "mode", "alpha_prime", "auto_alpha_prime",
    "calib_frac", "repetitions", "lambda_step", "lambda_grid", "cuts", "epsilon", "output_dir",
)
@click.pass_context
def tradeoff(ctx: click.Context, **flags):
    """Accuracy and harm per lambda over repeated calibration/test splits."""
    config = _resolve(ctx, **flags)
    dataset = _load_inputs(config)
    records = None
    if config.set_records_path is not None:
        records = load_set_records(config.set_records_path, dataset.label_space)

    report = run_tradeoff(
        dataset,
        config.predictor_spec(),
        config.alpha,
        config.mode,
        config.lambda_grid(),
        config.repetitions,
        config.seed or 0,
        calib_frac=config.calib_frac,
        validation_frac=config.validation_frac,
        alpha_prime=config.fixed_alpha_prime(),
        alpha_prime_policy=config.alpha_prime_policy,
        alpha_prime_step=config.alpha_prime_step,
        difficulty_cuts=config.difficulty_cuts,
        epsilon=config.mnl_epsilon,
        set_records=records,
        jobs=config.jobs if config.jobs is not None else -1,
    )
    service = ReportService(config.output_dir or Path("results"))
    service.write_tradeoff(report)
    summary = {**tradeoff_summary(report), "metadata": report.metadata}
    service.write_report("tradeoff", config.model_dump(mode="json"), report.metadata["repetition_seeds"], summary)
    click.echo(to_json({"output_dir": service.output_dir, "rows": len(report.rows), **tradeoff_summary(report)}))


@cli.command()
@with_options(*_DATA, "lambda_step", "lambda_grid", "lam", "output_dir")
@click.pass_context
def risk(ctx: click.Context, **flags):
    """Empirical harm and benefit-loss curves with the monotonicity bounds."""
    config = _resolve(ctx, **flags)
    predictor, dataset = _predictor_for(config, _load_inputs(config))
    _emit_table(config, "risk.csv", risk_table(dataset, predictor, _grid(config)), "risk")


@cli.command()
@with_options(
    *_DATA, "set_records", "calib_frac", "lambda_step", "lambda_grid", "lam", "cuts", "epsilon", "output_dir",
)
@click.pass_context
def accuracy(ctx: click.Context, **flags):
    """Modeled (and, with set records, measured) expert accuracy per lambda on one split."""
    config = _resolve(ctx, **flags)
    dataset = _load_inputs(config)
    spec = config.predictor_spec()
    strata = stratify_difficulty(dataset, config.difficulty_cuts)
    validation = None
    if spec.needs_validation:
        validation, dataset = split_dataset(dataset, config.validation_frac, config.seed or 0)
    calibration, test = split_dataset(dataset, config.calib_frac, config.seed or 0)
    predictor = spec.build(validation)
    mixture = fit_confusion(calibration, strata, config.mnl_epsilon)

    grid = _grid(config)
    columns: Dict[str, Any] = {"lambda": grid, "A": accuracy_curve(mixture, strata, test, predictor, grid)}
    if config.set_records_path is not None:
        records = load_set_records(config.set_records_path, dataset.label_space)
        columns["accuracy_real"] = empirical_accuracy(records, test, predictor, grid)
    _emit_table(config, "accuracy.csv", columns, "accuracy")


@cli.command("fit-mnl")
@with_options(*_DATA, "cuts", "epsilon", "output_dir")
@click.pass_context
def fit_mnl(ctx: click.Context, **flags):
    """Fit the per-difficulty confusion matrices of experts on their own."""
    config = _resolve(ctx, **flags)
    dataset = _load_inputs(config)
    strata = stratify_difficulty(dataset, config.difficulty_cuts)
    mixture = fit_confusion(dataset, strata, config.mnl_epsilon)
    payload = {
        "labels": list(dataset.label_space.labels),
        "quantile_cuts": strata.quantile_cuts,
        "thresholds": strata.thresholds,
        "n_strata": strata.n_strata,
        "epsilon": mixture.epsilon,
        "theta": mixture.theta,
    }
    _emit_json(config, "mnl.json", payload, "fit-mnl")


@cli.command()
@with_options(
    "regime", "predictor", "saps_w", "saps_w_grid", "lambda_max", "alpha", "mode", "alpha_prime",
    "auto_alpha_prime", "repetitions", "n_calib", "n_test", "output_dir",
)
@click.pass_context
def simulate(ctx: click.Context, **flags):
    """Coverage of the harm guarantee on a synthetic world with known counterfactuals."""
    flags["synthetic"] = True
    config = _resolve(ctx, **flags)
    spec = config.predictor_spec()
    predictor = spec.build(world_to_dataset(generate_world(config.world)) if spec.needs_validation else None)
    stats = coverage_trial(
        config.world,
        config.alpha,
        config.n_calib,
        config.n_test,
        config.repetitions,
        predictor=predictor,
        mode=config.mode,
        alpha_prime=config.fixed_alpha_prime(),
        alpha_prime_step=config.alpha_prime_step,
        jobs=config.jobs if config.jobs is not None else -1,
    )
    _emit_json(config, "coverage.json", stats.model_dump(mode="json"), "simulate")


@cli.command("verify-monotonicity")
@with_options(*_DATA, "set_records", "output_dir")
@click.option("--min-count", "min_cell_count", type=int, help="Smallest cell reported (default 5).")
@click.pass_context
def verify_monotonicity(ctx: click.Context, **flags):
    """Per set size success rates, to check interventional monotonicity on real records."""
    config = _resolve(ctx, **flags)
    dataset = _load_inputs(config)
    predictor, _ = _predictor_for(config, dataset)
    records = _set_records(config, dataset, predictor)
    if records is None:
        raise ConfigInvalid("verify-monotonicity needs --set-records or a synthetic world")
    report = verify_interventional_monotonicity(
        records, dataset, config.min_cell_count, config.monotonicity_cuts
    )
    if config.output_dir is not None:
        service = ReportService(config.output_dir)
        service.write_monotonicity(report)
        service.write_report(
            "verify-monotonicity",
            config.model_dump(mode="json"),
            [config.seed or 0],
            {"violations": [v.model_dump() for v in report.violations], "insufficient": report.insufficient},
        )
    click.echo(to_json({
        "cells": len(report.cells),
        "insufficient": len(report.insufficient),
        "violations": [v.model_dump() for v in report.violations],
    }))


@cli.command()
@with_options(*_DATA, "lambda_step", "lambda_grid", "lam", "output_dir")
@click.pass_context
def coverage(ctx: click.Context, **flags):
    """Empirical coverage and mean set size per lambda."""
    config = _resolve(ctx, **flags)
    predictor, dataset = _predictor_for(config, _load_inputs(config))
    _emit_table(config, "coverage.csv", coverage_and_size(dataset, predictor, _grid(config)), "coverage")


@cli.command("sweep-calibration")
@with_options(*_DATA, "alpha", "repetitions", "lambda_step", "lambda_grid", "output_dir")
@click.pass_context
def sweep_calibration(ctx: click.Context, **flags):
    """How lambda_hat and the certified set change with the calibration fraction."""
    config = _resolve(ctx, **flags)
    table = sweep_calibration_fraction(
        _load_inputs(config),
        config.predictor_spec(),
        config.alpha,
        config.calib_fracs,
        config.lambda_grid(),
        config.repetitions,
        config.seed or 0,
        validation_frac=config.validation_frac,
        jobs=config.jobs if config.jobs is not None else -1,
    )
    columns = {key: [row[key] for row in table] for key in table[0]}
    _emit_table(config, "sweep_calibration.csv", columns, "sweep-calibration")


if __name__ == "__main__":
    cli()
