# harmctl/services/monotonicity.py

import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from harmctl.data.models import Dataset, SetPredictionRecord
from harmctl.errors import EmptyDataset, OrphanPrediction

logger = logging.getLogger(__name__)

DEFAULT_DIFFICULTY_CUTS = (0.25, 0.5, 0.75)
DEFAULT_MIN_COUNT = 5
COMPETENCE_GROUPS = ("all", "low", "high")
_QUARTILE_NAMES = ("high", "medium_high", "medium_low", "low")


class MonotonicityCell(BaseModel):
    """Success rate of one (label, difficulty, competence) group at one set size."""
    label: str
    difficulty: str
    competence: str
    set_size: int = Field(ge=2)
    n: int
    successes: int
    success_probability: Optional[float] = None
    standard_error: Optional[float] = None

    @property
    def sufficient(self) -> bool:
        return self.success_probability is not None


class MonotonicityViolation(BaseModel):
    label: str
    difficulty: str
    competence: str
    smaller_size: int
    larger_size: int
    increase: float
    threshold: float


class VerificationReport(BaseModel):
    min_count: int
    difficulty_cuts: Tuple[float, ...]
    cells: List[MonotonicityCell]
    violations: List[MonotonicityViolation]
    insufficient: List[str]

    def groups(self) -> Dict[Tuple[str, str, str], List[MonotonicityCell]]:
        grouped: Dict[Tuple[str, str, str], List[MonotonicityCell]] = defaultdict(list)
        for cell in self.cells:
            grouped[(cell.label, cell.difficulty, cell.competence)].append(cell)
        return dict(grouped)


def difficulty_names(n_levels: int) -> List[str]:
    """Level names from hardest to easiest."""
    if n_levels == len(_QUARTILE_NAMES):
        return list(_QUARTILE_NAMES)
    return [f"level_{i}" for i in range(n_levels)]


def binomial_cell(successes: int, n: int, min_count: int) -> Tuple[Optional[float], Optional[float]]:
    """Success rate and its binomial standard error; (None, None) below min_count."""
    if n < min_count:
        return None, None
    p = successes / n
    return p, math.sqrt(p * (1.0 - p) / n)


def _instance_accuracy(records: Sequence[SetPredictionRecord], truth: Dict[str, int]) -> Dict[str, float]:
    tally: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        cell = tally[r.instance_id]
        cell[0] += int(r.human_prediction == truth[r.instance_id])
        cell[1] += 1
    return {iid: c / n for iid, (c, n) in tally.items()}


def _competence(records: Sequence[SetPredictionRecord], truth: Dict[str, int]) -> Dict[str, str]:
    """The better half of participants (by accuracy, ties by id) is 'high'; an odd count favours 'high'."""
    tally: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        cell = tally[r.participant_id or ""]
        cell[0] += int(r.human_prediction == truth[r.instance_id])
        cell[1] += 1
    ranked = sorted(tally, key=lambda p: (-tally[p][0] / tally[p][1], p))
    n_high = (len(ranked) + 1) // 2
    return {p: ("high" if i < n_high else "low") for i, p in enumerate(ranked)}


def _violations(
    key: Tuple[str, str, str],
    cells: List[MonotonicityCell],
) -> List[MonotonicityViolation]:
    found = []
    usable = sorted((c for c in cells if c.sufficient), key=lambda c: c.set_size)
    for small, large in zip(usable, usable[1:]):
        increase = large.success_probability - small.success_probability
        threshold = 1.96 * math.hypot(small.standard_error, large.standard_error)
        if increase > threshold:
            found.append(MonotonicityViolation(
                label=key[0], difficulty=key[1], competence=key[2],
                smaller_size=small.set_size, larger_size=large.set_size,
                increase=increase, threshold=threshold,
            ))
    return found


def verify_interventional_monotonicity(
    set_records: Sequence[SetPredictionRecord],
    dataset: Dataset,
    min_count: int = DEFAULT_MIN_COUNT,
    difficulty_cuts: Sequence[float] = DEFAULT_DIFFICULTY_CUTS,
) -> VerificationReport:
    """
    Empirical success probability per set size, per ground-truth label,
    difficulty level and competence group, using only sets that contain
    the true label. Singletons are left out since they always succeed.
    Difficulty is the quantile level of an instance's accuracy among
    instances with the same label; competence is computed per label.
    """
    if not set_records:
        raise EmptyDataset("no set-valued prediction records")
    rows = dataset.first_rows
    truth = {dataset.instance_ids[int(r)]: int(dataset.true_labels[int(r)]) for r in rows}
    for r in set_records:
        if r.instance_id not in truth:
            raise OrphanPrediction(r.instance_id)

    accuracy = _instance_accuracy(set_records, truth)
    names = difficulty_names(len(difficulty_cuts) + 1)
    by_label: Dict[int, List[SetPredictionRecord]] = defaultdict(list)
    for r in set_records:
        by_label[truth[r.instance_id]].append(r)

    # (label, difficulty, competence, size) -> [successes, n]
    counts: Dict[Tuple[str, str, str, int], List[int]] = defaultdict(lambda: [0, 0])
    for y, records in sorted(by_label.items()):
        label = dataset.label_space.name(y)
        instances = sorted({r.instance_id for r in records})
        values = np.asarray([accuracy[i] for i in instances])
        thresholds = np.quantile(values, list(difficulty_cuts), method="linear")
        level = dict(zip(instances, np.searchsorted(thresholds, values, side="left").tolist()))
        competence = _competence(records, truth)

        for r in records:
            k = len(r.set_members)
            if k < 2 or y not in r.set_members:
                continue
            success = int(r.human_prediction == y)
            for group in ("all", competence[r.participant_id or ""]):
                cell = counts[(label, names[level[r.instance_id]], group, k)]
                cell[0] += success
                cell[1] += 1

    cells, insufficient = [], []
    for (label, difficulty, group, k), (successes, n) in sorted(counts.items()):
        p, se = binomial_cell(successes, n, min_count)
        if p is None:
            insufficient.append(f"{label}/{difficulty}/{group} at size {k} has {n} < {min_count} records")
        cells.append(MonotonicityCell(
            label=label, difficulty=difficulty, competence=group, set_size=k,
            n=n, successes=successes, success_probability=p, standard_error=se,
        ))

    report = VerificationReport(
        min_count=min_count,
        difficulty_cuts=tuple(difficulty_cuts),
        cells=cells,
        violations=[],
        insufficient=insufficient,
    )
    violations = [v for key, group in report.groups().items() for v in _violations(key, group)]
    logger.info(
        f"--- Monotonicity: {len(cells)} cells, {len(insufficient)} below min count, "
        f"{len(violations)} violations ---"
    )
    return report.model_copy(update={"violations": violations})
