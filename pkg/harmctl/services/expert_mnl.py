# harmctl/services/expert_mnl.py

import logging
from collections import defaultdict
from functools import cached_property
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from harmctl.data.models import Dataset, PredictionSet, SetPredictionRecord
from harmctl.errors import DegenerateRow, EmptyDataset, EmptyStratum
from harmctl.services.set_predictors import SetValuedPredictor

logger = logging.getLogger(__name__)

DEFAULT_CUTS = (0.5,)
DEFAULT_EPSILON = 1e-6


class DifficultyStrata(BaseModel):
    """
    Difficulty levels of instances by the quantiles of human-alone accuracy.
    An instance whose accuracy is at or below the value of a cut falls in
    the lower (harder) stratum.
    """
    model_config = ConfigDict(frozen=True)

    quantile_cuts: Tuple[float, ...]
    thresholds: Tuple[float, ...]
    assignment: Dict[str, int]
    n_strata: int

    @field_validator("quantile_cuts")
    @classmethod
    def _sorted_open_unit(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(not (0.0 < c < 1.0) for c in v) or list(v) != sorted(v):
            raise ValueError("quantile cuts must be sorted and lie in (0, 1)")
        return v

    def stratum_of(self, instance_ids: Sequence[str]) -> np.ndarray:
        return np.asarray([self.assignment[i] for i in instance_ids], dtype=int)


def stratify_difficulty(dataset: Dataset, quantile_cuts: Sequence[float] = DEFAULT_CUTS) -> DifficultyStrata:
    """
    Quantiles use linear interpolation (numpy's default, Hyndman-Fan
    type 7). Occupied strata are renumbered to stay contiguous from 0.
    """
    instances = dataset.unique_instances
    if not instances:
        raise EmptyDataset()
    accuracy = np.asarray([dataset.per_instance_accuracy[i] for i in instances], dtype=float)
    cuts = tuple(float(c) for c in quantile_cuts)
    thresholds = np.quantile(accuracy, cuts, method="linear") if cuts else np.zeros(0)

    raw = np.searchsorted(thresholds, accuracy, side="left")
    occupied = np.unique(raw)
    renumber = {int(r): k for k, r in enumerate(occupied)}
    strata = DifficultyStrata(
        quantile_cuts=cuts,
        thresholds=tuple(float(t) for t in thresholds),
        assignment={iid: renumber[int(r)] for iid, r in zip(instances, raw)},
        n_strata=len(occupied),
    )
    logger.info(f"--- Expert MNL: {len(instances)} instances in {strata.n_strata} difficulty strata ---")
    return strata


class MnlMixture(BaseModel):
    """
    One confusion matrix per difficulty stratum, theta[d][y][y'] = P(y' | y, d)
    for an expert predicting on their own. Predictions from a set are the
    row restricted to the set and renormalized.
    """
    model_config = ConfigDict(frozen=True)

    theta: List[List[List[float]]]
    epsilon: float = Field(ge=0)

    @cached_property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)

    @property
    def n_strata(self) -> int:
        return len(self.theta)

    @property
    def n_labels(self) -> int:
        return len(self.theta[0]) if self.theta else 0

    def row(self, y: int, stratum: int) -> np.ndarray:
        return self.matrix[stratum, y]


def fit_confusion(dataset: Dataset, strata: DifficultyStrata, epsilon: float = DEFAULT_EPSILON) -> MnlMixture:
    """theta[d][y][y'] = (count(y' | y, d) + eps) / (count(y, d) + eps * L)."""
    L = dataset.n_labels
    counts = np.zeros((strata.n_strata, L, L))
    if len(dataset):
        d = strata.stratum_of(dataset.instance_ids)
        np.add.at(counts, (d, dataset.true_labels, dataset.human_predictions), 1.0)

    for stratum in range(strata.n_strata):
        if counts[stratum].sum() == 0:
            raise EmptyStratum(stratum)

    smoothed = counts + epsilon
    totals = smoothed.sum(axis=2, keepdims=True)
    theta = np.divide(smoothed, totals, out=np.zeros_like(smoothed), where=totals > 0)
    logger.info(f"--- Expert MNL: Fitted {strata.n_strata} confusion matrices on {len(dataset)} predictions ---")
    return MnlMixture(theta=theta.tolist(), epsilon=epsilon)


def _restricted_row(mixture: MnlMixture, y: int, stratum: int, members: Sequence[int]) -> np.ndarray:
    weights = mixture.row(y, stratum)[list(members)]
    total = weights.sum()
    if total <= 0:
        raise DegenerateRow(stratum, y)
    return weights / total


def success_probability(mixture: MnlMixture, y: int, stratum: int, prediction_set: PredictionSet) -> float:
    if y not in prediction_set:
        return 0.0
    members = list(prediction_set.members)
    return float(_restricted_row(mixture, y, stratum, members)[members.index(y)])


def predict_distribution(
    mixture: MnlMixture, y: int, stratum: int, prediction_set: PredictionSet
) -> Dict[int, float]:
    members = list(prediction_set.members)
    return dict(zip(members, _restricted_row(mixture, y, stratum, members).tolist()))


def sample_prediction(
    mixture: MnlMixture,
    y: int,
    stratum: int,
    prediction_set: PredictionSet,
    rng: np.random.Generator,
) -> int:
    members = list(prediction_set.members)
    if len(members) == 1:
        return members[0]
    return int(rng.choice(members, p=_restricted_row(mixture, y, stratum, members)))


def _success_by_set_size(
    mixture: MnlMixture,
    strata: DifficultyStrata,
    test: Dataset,
    critical: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per unique instance: its sorted critical thresholds, the success
    probability when the first k labels are shown (k = 1..L), and the
    number of test samples on the instance. Success only depends on the
    instance, so participants on one instance share a table.
    """
    rows = test.first_rows
    crit = critical[rows]
    y = test.true_labels[rows]
    d = strata.stratum_of([test.instance_ids[int(r)] for r in rows])

    order = np.argsort(crit, axis=1, kind="stable")
    sorted_crit = np.take_along_axis(crit, order, axis=1)
    theta_rows = mixture.matrix[d, y]
    weights = np.take_along_axis(theta_rows, order, axis=1)
    cumulative = np.cumsum(weights, axis=1)
    y_position = np.argmax(order == y[:, None], axis=1)
    y_weight = theta_rows[np.arange(len(y)), y]

    k = np.arange(1, critical.shape[1] + 1)[None, :]
    covered = k > y_position[:, None]
    if np.any(covered & (cumulative <= 0)):
        bad = int(np.argmax(np.any(covered & (cumulative <= 0), axis=1)))
        raise DegenerateRow(int(d[bad]), int(y[bad]))
    success = np.where(covered, y_weight[:, None] / np.where(cumulative > 0, cumulative, 1.0), 0.0)

    count_of = dict(zip(*np.unique(test.instance_ids, return_counts=True)))
    multiplicity = np.asarray([count_of[test.instance_ids[int(r)]] for r in rows], dtype=float)
    return sorted_crit, success, multiplicity


def accuracy_curve(
    mixture: MnlMixture,
    strata: DifficultyStrata,
    test: Dataset,
    predictor: SetValuedPredictor,
    grid: Sequence[float],
) -> np.ndarray:
    """A(lambda) on every grid point, exact (no sampling)."""
    if len(test) == 0:
        raise EmptyDataset("test set is empty")
    critical = predictor.critical_matrix(test.scores, test.instance_ids)
    sorted_crit, success, multiplicity = _success_by_set_size(mixture, strata, test, critical)
    grid = np.asarray(grid, dtype=float)

    # Set size at lam is the number of critical values <= lam.
    sizes = (sorted_crit[:, :, None] <= grid[None, None, :]).sum(axis=1)
    per_instance = np.take_along_axis(success, sizes - 1, axis=1)
    return (per_instance * multiplicity[:, None]).sum(axis=0) / multiplicity.sum()


def estimate_accuracy(
    mixture: MnlMixture,
    strata: DifficultyStrata,
    test: Dataset,
    predictor: SetValuedPredictor,
    lam: float,
) -> float:
    predictor.check_lambda(lam)
    return float(accuracy_curve(mixture, strata, test, predictor, [lam])[0])


def modeled_alone_accuracy(mixture: MnlMixture, strata: DifficultyStrata, test: Dataset) -> float:
    """Mean of theta_d[y][y] over test samples: the modeled accuracy of experts on their own."""
    if len(test) == 0:
        raise EmptyDataset("test set is empty")
    d = strata.stratum_of(test.instance_ids)
    return float(mixture.matrix[d, test.true_labels, test.true_labels].mean())


def empirical_accuracy(
    set_records: Sequence[SetPredictionRecord],
    test: Dataset,
    predictor: SetValuedPredictor,
    grid: Sequence[float],
) -> np.ndarray:
    """
    Accuracy of real predictions made under C_lambda: per test instance,
    the mean correctness of the records shown exactly C_lambda(x),
    averaged over instances that have such records. NaN where no
    instance does.
    """
    if len(test) == 0:
        raise EmptyDataset("test set is empty")
    rows = test.first_rows
    ids = [test.instance_ids[int(r)] for r in rows]
    truth = dict(zip(ids, test.true_labels[rows].tolist()))

    # (instance, shown set) -> [correct, total]
    tally: Dict[Tuple[str, FrozenSet[int]], List[int]] = defaultdict(lambda: [0, 0])
    for r in set_records:
        if r.instance_id not in truth:
            continue
        cell = tally[(r.instance_id, frozenset(r.set_members))]
        cell[0] += int(r.human_prediction == truth[r.instance_id])
        cell[1] += 1

    critical = predictor.critical_matrix(test.scores[rows], ids)
    result = np.full(len(grid), np.nan)
    for g, lam in enumerate(grid):
        members = critical <= lam
        rates = []
        for i, iid in enumerate(ids):
            cell = tally.get((iid, frozenset(np.flatnonzero(members[i]).tolist())))
            if cell and cell[1]:
                rates.append(cell[0] / cell[1])
        if rates:
            result[g] = float(np.mean(rates))
    return result
