# harmctl/services/calibration.py

import logging
import math
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from harmctl.data.models import Dataset
from harmctl.errors import AlphaSplitInvalid, AlphaTooSmall, Infeasible
from harmctl.services.harm_risk import CurveKind, RiskCurve, risk_curves
from harmctl.services.set_predictors import SetValuedPredictor

logger = logging.getLogger(__name__)

# Absorbs floating error in alpha * (n + 1) when it is exactly an integer.
_ALPHA_SLACK = 1e-9


class ControlMode(str, Enum):
    COUNTERFACTUAL = "counterfactual"
    INTERVENTIONAL = "interventional"


class HarmControlResult(BaseModel):
    """
    The lambda values certified to keep average counterfactual harm below
    alpha: [lower, upper] or [lower, upper) when upper_inclusive is false.
    """
    model_config = ConfigDict(frozen=True)

    mode: ControlMode
    alpha: float
    alpha_prime: Optional[float] = None
    lower: float
    upper: float
    upper_inclusive: bool
    feasible: bool
    n: int
    domain_max: float

    @model_validator(mode="after")
    def _well_formed(self) -> "HarmControlResult":
        if self.feasible and self.lower > self.upper:
            raise ValueError("a feasible result needs lower <= upper")
        if self.mode is ControlMode.COUNTERFACTUAL and not (
            self.upper == self.domain_max and self.upper_inclusive
        ):
            raise ValueError("counterfactual results extend to domain_max inclusive")
        return self

    def contains(self, lam: Union[float, np.ndarray]) -> Union[bool, np.ndarray]:
        lam = np.asarray(lam, dtype=float)
        if not self.feasible:
            inside = np.zeros(lam.shape, dtype=bool)
        elif self.upper_inclusive:
            inside = (lam >= self.lower) & (lam <= self.upper)
        else:
            inside = (lam >= self.lower) & (lam < self.upper)
        return bool(inside) if inside.ndim == 0 else inside

    @property
    def length(self) -> float:
        return max(self.upper - self.lower, 0.0) if self.feasible else 0.0


def _budget(alpha: float, n: int) -> int:
    """
    Largest number K of contributing samples with n/(n+1) * K/n + 1/(n+1) <= alpha.
    Negative when alpha < 1/(n+1).
    """
    return math.floor(alpha * (n + 1) - 1 + _ALPHA_SLACK)


def lambda_hat(curve: RiskCurve, alpha: float) -> float:
    """
    Smallest lambda whose inflated empirical harm is at most alpha.
    The infimum is attained at 0 or at a breakpoint: it is the (m-K)-th
    smallest of the m harm breakpoints, since exactly the breakpoints
    above lambda still count.
    """
    if curve.kind is not CurveKind.HARM_NONINCREASING:
        raise ValueError("lambda_hat needs a harm curve")
    budget = _budget(alpha, curve.n)
    if budget < 0:
        raise AlphaTooSmall(alpha, curve.n)
    points = curve.points
    if len(points) <= budget:
        return 0.0
    return float(points[len(points) - budget - 1])


def lambda_check(curve: RiskCurve, alpha: float) -> Tuple[float, bool]:
    """
    Supremum of lambda whose inflated benefit loss is at most alpha,
    with a flag telling whether the supremum itself qualifies.
    The feasible region is [0, t) where t is the (K+1)-th smallest
    breakpoint, or all of [0, domain_max] when there are at most K.
    """
    if curve.kind is not CurveKind.BENEFIT_LOSS_NONDECREASING:
        raise ValueError("lambda_check needs a benefit-loss curve")
    budget = _budget(alpha, curve.n)
    if budget < 0:
        raise AlphaTooSmall(alpha, curve.n)
    points = curve.points
    if len(points) <= budget:
        return curve.domain_max, True
    t = float(points[budget])
    if t <= 0.0:
        raise Infeasible(
            f"no lambda satisfies the benefit-loss condition at alpha={alpha}",
            alpha=alpha,
            n=curve.n,
        )
    return t, False


def control_counterfactual(harm: RiskCurve, alpha: float) -> HarmControlResult:
    lower = lambda_hat(harm, alpha)
    return HarmControlResult(
        mode=ControlMode.COUNTERFACTUAL,
        alpha=alpha,
        lower=lower,
        upper=harm.domain_max,
        upper_inclusive=True,
        feasible=True,
        n=harm.n,
        domain_max=harm.domain_max,
    )


def _check_alpha_split(alpha: float, alpha_prime: float, n: int) -> None:
    minimum = 1.0 / (n + 1)
    if alpha_prime < minimum - _ALPHA_SLACK or alpha - alpha_prime < minimum - _ALPHA_SLACK:
        raise AlphaSplitInvalid(
            f"alpha'={alpha_prime} and alpha-alpha'={alpha - alpha_prime} must both be at least {minimum:.6g}",
            alpha=alpha,
            alpha_prime=alpha_prime,
            n=n,
        )


def control_interventional(
    harm: RiskCurve,
    benefit: RiskCurve,
    alpha: float,
    alpha_prime: float,
) -> HarmControlResult:
    """[lambda_hat(alpha'), lambda_check(alpha - alpha')], empty when the ends cross."""
    _check_alpha_split(alpha, alpha_prime, harm.n)
    lower = lambda_hat(harm, alpha_prime)
    try:
        upper, inclusive = lambda_check(benefit, alpha - alpha_prime)
        feasible = lower < upper or (lower == upper and inclusive)
    except Infeasible:
        upper, inclusive, feasible = 0.0, False, False

    return HarmControlResult(
        mode=ControlMode.INTERVENTIONAL,
        alpha=alpha,
        alpha_prime=alpha_prime,
        lower=lower,
        upper=upper,
        upper_inclusive=inclusive,
        feasible=feasible,
        n=harm.n,
        domain_max=harm.domain_max,
    )


def harm_controlling_set_cf(
    calibration: Dataset,
    predictor: SetValuedPredictor,
    alpha: float,
) -> HarmControlResult:
    harm, _ = risk_curves(calibration, predictor)
    result = control_counterfactual(harm, alpha)
    logger.info(f"--- Calibration: Counterfactual set at alpha={alpha} is [{result.lower:.6g}, {result.upper:.6g}] ---")
    return result


def harm_controlling_set_interv(
    calibration: Dataset,
    predictor: SetValuedPredictor,
    alpha: float,
    alpha_prime: float,
) -> HarmControlResult:
    harm, benefit = risk_curves(calibration, predictor)
    result = control_interventional(harm, benefit, alpha, alpha_prime)
    logger.info(
        f"--- Calibration: Interventional interval at alpha={alpha}, alpha'={alpha_prime} is "
        f"[{result.lower:.6g}, {result.upper:.6g}{']' if result.upper_inclusive else ')'} "
        f"(feasible={result.feasible}) ---"
    )
    return result


def alpha_prime_candidates(alpha: float, n: int, grid_step: float) -> np.ndarray:
    """alpha' from 1/(n+1) to alpha - 1/(n+1) in steps of grid_step."""
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    low = 1.0 / (n + 1)
    high = alpha - low
    if high < low - _ALPHA_SLACK:
        raise AlphaTooSmall(alpha, n, minimum=2.0 / (n + 1))
    count = int(math.floor((high - low) / grid_step + _ALPHA_SLACK)) + 1
    return low + grid_step * np.arange(count)


def _interval_length(harm: RiskCurve, benefit: RiskCurve, alpha: float, alpha_prime: float) -> float:
    return control_interventional(harm, benefit, alpha, alpha_prime).length


def select_alpha_prime_pooled(
    curve_pairs: Sequence[Tuple[RiskCurve, RiskCurve]],
    alpha: float,
    grid_step: float = 0.001,
) -> float:
    """
    One alpha' for a batch of calibration sets: the candidate with the
    largest mean interval length (0 for empty intervals). Ties go to the
    smaller alpha'.
    """
    if not curve_pairs:
        raise ValueError("no calibration curves to pool")
    n = min(h.n for h, _ in curve_pairs)
    candidates = alpha_prime_candidates(alpha, n, grid_step)
    lengths: List[float] = [
        float(np.mean([_interval_length(h, g, alpha, a) for h, g in curve_pairs])) for a in candidates
    ]
    best = int(np.argmax(lengths))
    logger.info(
        f"--- Calibration: Selected alpha'={candidates[best]:.6g} "
        f"(mean interval length {lengths[best]:.6g} over {len(curve_pairs)} calibration sets) ---"
    )
    return float(candidates[best])


def select_alpha_prime(
    calibration: Dataset,
    predictor: SetValuedPredictor,
    alpha: float,
    grid_step: float = 0.001,
) -> float:
    return select_alpha_prime_pooled([risk_curves(calibration, predictor)], alpha, grid_step)
