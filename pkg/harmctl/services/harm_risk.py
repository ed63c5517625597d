# harmctl/services/harm_risk.py

import logging
from enum import Enum
from functools import cached_property
from typing import Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from harmctl.data.models import Dataset, PredictionSet, Sample
from harmctl.errors import EmptyDataset
from harmctl.services.set_predictors import SetValuedPredictor

logger = logging.getLogger(__name__)


class CurveKind(str, Enum):
    HARM_NONINCREASING = "harm"
    BENEFIT_LOSS_NONDECREASING = "benefit_loss"


class RiskCurve(BaseModel):
    """
    Exact representation of an empirical risk curve as sorted per-sample
    critical thresholds.

    harm:          value(lam) = #{breakpoints >  lam} / n   (nonincreasing)
    benefit_loss:  value(lam) = #{breakpoints <= lam} / n   (nondecreasing)

    Both are right-continuous because membership is `lam >= critical`.
    """
    model_config = ConfigDict(frozen=True)

    kind: CurveKind
    breakpoints: Tuple[float, ...]
    n: int
    domain_max: float

    @model_validator(mode="after")
    def _sorted_in_domain(self) -> "RiskCurve":
        bp = np.asarray(self.breakpoints, dtype=float)
        if self.n < 1:
            raise ValueError("a risk curve needs n >= 1")
        if len(bp) > self.n:
            raise ValueError("more breakpoints than samples")
        if len(bp) and (np.any(np.diff(bp) < 0) or bp[0] < 0 or bp[-1] > self.domain_max):
            raise ValueError("breakpoints must be sorted and lie in [0, domain_max]")
        return self

    @cached_property
    def points(self) -> np.ndarray:
        return np.asarray(self.breakpoints, dtype=float)

    def counts(self, lam: Union[float, np.ndarray]) -> np.ndarray:
        """Number of samples contributing to the risk at lam."""
        at_or_below = np.searchsorted(self.points, lam, side="right")
        if self.kind is CurveKind.HARM_NONINCREASING:
            return len(self.points) - at_or_below
        return at_or_below

    def __call__(self, lam: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        value = self.counts(lam) / self.n
        return float(value) if np.ndim(value) == 0 else value

    @classmethod
    def from_critical(
        cls,
        kind: CurveKind,
        critical: np.ndarray,
        n: int,
        domain_max: float,
    ) -> "RiskCurve":
        return cls(
            kind=kind,
            breakpoints=tuple(np.sort(np.asarray(critical, dtype=float)).tolist()),
            n=n,
            domain_max=domain_max,
        )


def per_sample_harm_cf(sample: Sample, prediction_set: PredictionSet) -> int:
    """1 when the expert was right on their own and the set hides the true label."""
    return int(sample.human_correct and sample.true_label not in prediction_set)


def curves_from_arrays(
    critical_true: np.ndarray,
    human_correct: np.ndarray,
    domain_max: float,
) -> Tuple[RiskCurve, RiskCurve]:
    n = len(critical_true)
    if n == 0:
        raise EmptyDataset("calibration set is empty")
    harm = RiskCurve.from_critical(CurveKind.HARM_NONINCREASING, critical_true[human_correct], n, domain_max)
    benefit = RiskCurve.from_critical(
        CurveKind.BENEFIT_LOSS_NONDECREASING, critical_true[~human_correct], n, domain_max
    )
    return harm, benefit


def risk_curves(calibration: Dataset, predictor: SetValuedPredictor) -> Tuple[RiskCurve, RiskCurve]:
    """Both empirical curves from one pass over the calibration set."""
    if len(calibration) == 0:
        raise EmptyDataset("calibration set is empty")
    critical = predictor.true_label_critical(calibration)
    return curves_from_arrays(critical, calibration.human_correct, predictor.domain_max)


def harm_curve(calibration: Dataset, predictor: SetValuedPredictor) -> RiskCurve:
    return risk_curves(calibration, predictor)[0]


def benefit_loss_curve(calibration: Dataset, predictor: SetValuedPredictor) -> RiskCurve:
    return risk_curves(calibration, predictor)[1]


def harm_bounds(test: Dataset, predictor: SetValuedPredictor, lam: float) -> Tuple[float, float]:
    """
    Empirical bounds on the counterfactual harm at lam under interventional
    monotonicity: the lower bound is the plug-in harm, the upper bound adds
    the rate of wrong-alone predictions whose true label is covered.
    """
    predictor.check_lambda(lam)
    harm, benefit = risk_curves(test, predictor)
    lower = harm(lam)
    return lower, lower + benefit(lam)


def risk_table(
    dataset: Dataset,
    predictor: SetValuedPredictor,
    grid: Sequence[float],
) -> dict:
    """Columns lambda, H_hat, G_hat, lower, upper evaluated on a lambda grid."""
    harm, benefit = risk_curves(dataset, predictor)
    grid = np.asarray(grid, dtype=float)
    h, g = harm(grid), benefit(grid)
    return {"lambda": grid, "H_hat": h, "G_hat": g, "lower": h, "upper": h + g}
