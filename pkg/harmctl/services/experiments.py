# harmctl/services/experiments.py

import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from harmctl.data.loaders import split_dataset, split_dataset_three_way
from harmctl.data.models import Dataset, SetPredictionRecord
from harmctl.errors import EmptyDataset, EmptyGrid
from harmctl.services.calibration import (
    ControlMode,
    HarmControlResult,
    control_counterfactual,
    control_interventional,
    lambda_hat,
    select_alpha_prime_pooled,
)
from harmctl.services.expert_mnl import (
    DEFAULT_CUTS,
    DEFAULT_EPSILON,
    DifficultyStrata,
    accuracy_curve,
    empirical_accuracy,
    fit_confusion,
    modeled_alone_accuracy,
    stratify_difficulty,
)
from harmctl.services.harm_risk import risk_curves
from harmctl.services.set_predictors import PredictorSpec, SetValuedPredictor

logger = logging.getLogger(__name__)

Z_95 = 1.96


class TradeoffRow(BaseModel):
    lam: float
    accuracy: float
    accuracy_ci: Optional[float] = None
    harm: float
    harm_ci: Optional[float] = None
    harm_upper: Optional[float] = None
    harm_upper_ci: Optional[float] = None
    accuracy_real: Optional[float] = None
    accuracy_real_ci: Optional[float] = None
    membership_frequency: float = Field(ge=0, le=1)
    mean_set_size: float
    empirical_coverage: float


class TradeoffReport(BaseModel):
    """
    Per-lambda rows sorted by lambda. In interventional mode `harm` is the
    lower bound and `harm_upper` the upper bound on counterfactual harm.
    CI columns are half-widths, None with a single repetition.
    """
    model_config = ConfigDict(frozen=True)

    rows: List[TradeoffRow]
    metadata: Dict[str, Any]

    def columns(self) -> Dict[str, List[Optional[float]]]:
        fields = list(TradeoffRow.model_fields)
        return {f: [getattr(r, f) for r in self.rows] for f in fields}


def _check_grid(grid: Sequence[float]) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise EmptyGrid("lambda grid is empty")
    if np.any(np.diff(grid) < 0):
        raise EmptyGrid("lambda grid must be sorted")
    return grid


def repetition_seed(seed: int, repetition: int) -> int:
    """Seed of one repetition, derived from (seed, repetition) only."""
    return int(np.random.SeedSequence([seed, repetition]).generate_state(1)[0])


def _mean_and_ci(values: np.ndarray) -> tuple:
    """Column-wise mean and 1.96 * sd / sqrt(R), ignoring NaN; CI is None for R = 1."""
    counts = (~np.isnan(values)).sum(axis=0)
    empty = np.full(values.shape[1], np.nan)
    mean = np.divide(np.nansum(values, axis=0), counts, out=empty.copy(), where=counts > 0)
    if values.shape[0] < 2:
        return mean, None
    squares = np.nansum((values - mean) ** 2, axis=0)
    variance = np.divide(squares, counts - 1, out=empty.copy(), where=counts > 1)
    return mean, Z_95 * np.sqrt(variance) / np.sqrt(np.maximum(counts, 1))


def _optional(value: float) -> Optional[float]:
    return None if value is None or not np.isfinite(value) else float(value)


def _split(dataset: Dataset, spec: PredictorSpec, calib_frac: float, validation_frac: float, seed: int):
    if spec.needs_validation:
        return split_dataset_three_way(dataset, calib_frac, validation_frac, seed)
    calibration, test = split_dataset(dataset, calib_frac, seed)
    return calibration, None, test


def _coverage_and_size(test: Dataset, predictor: SetValuedPredictor, grid: np.ndarray) -> Dict[str, np.ndarray]:
    critical = predictor.critical_matrix(test.scores, test.instance_ids)
    true_critical = np.sort(critical[np.arange(len(test)), test.true_labels])
    all_critical = np.sort(critical.ravel())
    return {
        "empirical_coverage": np.searchsorted(true_critical, grid, side="right") / len(test),
        "mean_set_size": np.searchsorted(all_critical, grid, side="right") / len(test),
    }


def coverage_and_size(dataset: Dataset, predictor: SetValuedPredictor, grid: Sequence[float]) -> Dict[str, np.ndarray]:
    """Per lambda: fraction of samples whose set holds the true label, and mean set size."""
    if len(dataset) == 0:
        raise EmptyDataset()
    grid = _check_grid(grid)
    return {"lambda": grid, **_coverage_and_size(dataset, predictor, grid)}


def _tradeoff_repetition(
    dataset: Dataset,
    spec: PredictorSpec,
    strata: DifficultyStrata,
    grid: np.ndarray,
    calib_frac: float,
    validation_frac: float,
    seed: int,
    epsilon: float,
    set_records: Optional[Sequence[SetPredictionRecord]],
) -> Dict[str, Any]:
    calibration, validation, test = _split(dataset, spec, calib_frac, validation_frac, seed)
    predictor = spec.build(validation)
    mixture = fit_confusion(calibration, strata, epsilon)

    test_harm, test_benefit = risk_curves(test, predictor)
    out: Dict[str, Any] = {
        "seed": seed,
        "predictor": predictor.describe(),
        "curves": risk_curves(calibration, predictor),
        "harm": test_harm(grid),
        "benefit_loss": test_benefit(grid),
        "accuracy": accuracy_curve(mixture, strata, test, predictor, grid),
        "alone_accuracy": modeled_alone_accuracy(mixture, strata, test),
        **_coverage_and_size(test, predictor, grid),
    }
    if set_records is not None:
        out["accuracy_real"] = empirical_accuracy(set_records, test, predictor, grid)
    return out


def _certify(
    curves: tuple,
    mode: ControlMode,
    alpha: float,
    alpha_prime: Optional[float],
    alpha_prime_step: float,
) -> HarmControlResult:
    harm, benefit = curves
    if mode is ControlMode.COUNTERFACTUAL:
        return control_counterfactual(harm, alpha)
    if alpha_prime is None:
        alpha_prime = select_alpha_prime_pooled([curves], alpha, alpha_prime_step)
    return control_interventional(harm, benefit, alpha, alpha_prime)


def run_tradeoff(
    dataset: Dataset,
    spec: PredictorSpec,
    alpha: float,
    mode: ControlMode,
    grid: Sequence[float],
    repetitions: int,
    seed: int,
    calib_frac: float = 0.1,
    validation_frac: float = 0.1,
    alpha_prime: Optional[float] = None,
    alpha_prime_policy: str = "pooled",
    alpha_prime_step: float = 0.001,
    difficulty_cuts: Sequence[float] = DEFAULT_CUTS,
    epsilon: float = DEFAULT_EPSILON,
    set_records: Optional[Sequence[SetPredictionRecord]] = None,
    jobs: int = 1,
) -> TradeoffReport:
    """
    Repeats split, MNL fit, calibration and test evaluation, then averages
    per grid lambda. With the pooled policy one alpha' is chosen from all
    calibration splits at once; with auto each split picks its own.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    grid = _check_grid(grid)
    strata = stratify_difficulty(dataset, difficulty_cuts)
    seeds = [repetition_seed(seed, r) for r in range(repetitions)]

    logger.info(f"--- Experiments: Running {repetitions} trade-off repetitions on {len(grid)} lambda values ---")
    runs = Parallel(n_jobs=jobs)(
        delayed(_tradeoff_repetition)(
            dataset, spec, strata, grid, calib_frac, validation_frac, s, epsilon, set_records
        )
        for s in seeds
    )

    chosen = alpha_prime
    if mode is ControlMode.INTERVENTIONAL and alpha_prime_policy == "pooled" and chosen is None:
        chosen = select_alpha_prime_pooled([r["curves"] for r in runs], alpha, alpha_prime_step)
    results = [_certify(r["curves"], mode, alpha, chosen, alpha_prime_step) for r in runs]
    membership = np.mean([res.contains(grid) for res in results], axis=0)

    def stacked(key: str) -> np.ndarray:
        return np.vstack([np.asarray(r[key], dtype=float) for r in runs])

    accuracy, accuracy_ci = _mean_and_ci(stacked("accuracy"))
    harm, harm_ci = _mean_and_ci(stacked("harm"))
    upper, upper_ci = _mean_and_ci(stacked("harm") + stacked("benefit_loss"))
    if set_records is not None:
        real, real_ci = _mean_and_ci(stacked("accuracy_real"))
    coverage = stacked("empirical_coverage").mean(axis=0)
    size = stacked("mean_set_size").mean(axis=0)
    interventional = mode is ControlMode.INTERVENTIONAL

    rows = []
    for g, lam in enumerate(grid):
        rows.append(TradeoffRow(
            lam=float(lam),
            accuracy=float(accuracy[g]),
            accuracy_ci=None if accuracy_ci is None else _optional(accuracy_ci[g]),
            harm=float(harm[g]),
            harm_ci=None if harm_ci is None else _optional(harm_ci[g]),
            harm_upper=float(upper[g]) if interventional else None,
            harm_upper_ci=(_optional(upper_ci[g]) if upper_ci is not None else None) if interventional else None,
            accuracy_real=_optional(real[g]) if set_records is not None else None,
            accuracy_real_ci=(
                _optional(real_ci[g]) if set_records is not None and real_ci is not None else None
            ),
            membership_frequency=float(membership[g]),
            mean_set_size=float(size[g]),
            empirical_coverage=float(coverage[g]),
        ))

    metadata = {
        "alpha": alpha,
        "mode": mode.value,
        "alpha_prime": chosen if interventional else None,
        "alpha_prime_policy": alpha_prime_policy if interventional else None,
        "alpha_prime_per_repetition": [res.alpha_prime for res in results] if interventional else None,
        "predictor": [r["predictor"] for r in runs],
        "seed": seed,
        "repetition_seeds": seeds,
        "repetitions": repetitions,
        "calib_frac": calib_frac,
        "human_alone_accuracy": float(dataset.human_correct.mean()),
        "modeled_alone_accuracy": float(np.mean([r["alone_accuracy"] for r in runs])),
        "lower_per_repetition": [res.lower for res in results],
        "feasible_rate": float(np.mean([res.feasible for res in results])),
    }
    logger.info(f"--- Experiments: Trade-off done, {sum(m == 1.0 for m in membership)} lambda values always certified ---")
    return TradeoffReport(rows=rows, metadata=metadata)


def tradeoff_summary(report: TradeoffReport) -> Dict[str, Any]:
    """
    Acceptance view of a trade-off: among lambda values certified in every
    repetition, the largest excess of measured harm over alpha + CI.
    """
    alpha = report.metadata["alpha"]
    certified = [r for r in report.rows if r.membership_frequency == 1.0]
    excess = [r.harm - (alpha + (r.harm_ci or 0.0)) for r in certified]
    ci_widths = [2 * c for r in report.rows for c in (r.accuracy_ci, r.harm_ci) if c is not None]
    return {
        "always_certified": len(certified),
        "max_harm_excess": max(excess) if excess else None,
        "harm_controlled": all(e <= 0 for e in excess),
        "max_ci_width": max(ci_widths) if ci_widths else None,
        "human_alone_accuracy": report.metadata.get("human_alone_accuracy"),
    }


def _sweep_repetition(
    dataset: Dataset,
    spec: PredictorSpec,
    alpha: float,
    calib_frac: float,
    validation_frac: float,
    grid: np.ndarray,
    seed: int,
) -> Dict[str, float]:
    calibration, validation, test = _split(dataset, spec, calib_frac, validation_frac, seed)
    predictor = spec.build(validation)
    harm, _ = risk_curves(calibration, predictor)
    lower = lambda_hat(harm, alpha)
    test_harm, _ = risk_curves(test, predictor)

    controlled = test_harm(grid) <= alpha
    certified = controlled & (grid >= lower)
    return {
        "n_calib": len(calibration),
        "lambda_hat": lower,
        "captured": float(certified.sum() / controlled.sum()) if controlled.any() else math.nan,
    }


def sweep_calibration_fraction(
    dataset: Dataset,
    spec: PredictorSpec,
    alpha: float,
    fractions: Sequence[float],
    grid: Sequence[float],
    repetitions: int,
    seed: int,
    validation_frac: float = 0.1,
    jobs: int = 1,
) -> List[Dict[str, Any]]:
    """
    For each calibration fraction: the mean lambda_hat and the share of
    grid lambdas with test harm <= alpha that the certified set captures.
    Larger calibration sets certify more of them.
    """
    grid = _check_grid(grid)
    if not fractions:
        raise EmptyGrid("no calibration fractions to sweep")
    table = []
    for frac in fractions:
        runs = Parallel(n_jobs=jobs)(
            delayed(_sweep_repetition)(
                dataset, spec, alpha, frac, validation_frac, grid, repetition_seed(seed, r)
            )
            for r in range(repetitions)
        )
        captured = [r["captured"] for r in runs if not math.isnan(r["captured"])]
        table.append({
            "calib_frac": float(frac),
            "n_calib": float(np.mean([r["n_calib"] for r in runs])),
            "mean_lambda_hat": float(np.mean([r["lambda_hat"] for r in runs])),
            "captured_fraction": float(np.mean(captured)) if captured else None,
        })
        logger.info(f"--- Experiments: calib_frac={frac} gives mean lambda_hat {table[-1]['mean_lambda_hat']:.4f} ---")
    return table
