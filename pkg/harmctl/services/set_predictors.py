# harmctl/services/set_predictors.py

import hashlib
import logging
from abc import ABC, abstractmethod
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from harmctl.data.models import Dataset, PredictionSet, PredictorKind, SapsParams
from harmctl.errors import EmptyDataset, EmptyGrid, LambdaOutOfRange

logger = logging.getLogger(__name__)

DEFAULT_SAPS_W_GRID = (0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35)
DEFAULT_LAMBDA_MAX = 6.25


def rank_labels(scores: Sequence[float]) -> List[int]:
    """Labels by descending score; ties go to the smaller label index."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable").tolist()


def _rank_matrix(scores: np.ndarray) -> np.ndarray:
    """Row-wise rank position (0 = top) of every label, same tie rule as rank_labels."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(scores.shape[1])[None, :]
    return ranks


def _check_lambda(lam: float, upper: float) -> None:
    if not (0.0 <= lam <= upper):
        raise LambdaOutOfRange(lam, upper)


def _set_from_critical(critical: np.ndarray, order: List[int], lam: float, kind: PredictorKind) -> PredictionSet:
    members = tuple(int(j) for j in order if lam >= critical[j])
    return PredictionSet(members=members, lam=lam, predictor_id=kind)


# --- Threshold predictor ---

def threshold_critical(scores: Sequence[float]) -> np.ndarray:
    """
    Smallest lambda at which each label enters the threshold set:
    0 for the top-ranked label, 1 - score otherwise. Membership is
    always decided as `lam >= critical`, never as `score >= 1 - lam`,
    so both views agree bit for bit.
    """
    scores = np.asarray(scores, dtype=float)
    critical = 1.0 - scores
    critical[rank_labels(scores)[0]] = 0.0
    return critical


def critical_lambda(scores: Sequence[float], label: int) -> float:
    return float(threshold_critical(scores)[label])


def threshold_set(scores: Sequence[float], lam: float) -> PredictionSet:
    """The top-ranked label plus every label with score >= 1 - lam, in rank order."""
    _check_lambda(lam, 1.0)
    return _set_from_critical(threshold_critical(scores), rank_labels(scores), lam, PredictorKind.THRESHOLD)


# --- SAPS predictor ---

def saps_score(scores: Sequence[float], label: int, params: SapsParams) -> float:
    order = rank_labels(scores)
    m_top = float(scores[order[0]])
    rank = order.index(label) + 1
    if rank == 1:
        return params.u * m_top
    return m_top + (rank - 2 + params.u) * params.w


def saps_critical(scores: Sequence[float], params: SapsParams) -> np.ndarray:
    """
    Critical lambda per label under SAPS. The top label is always shown;
    every other label enters once its score is <= lambda. Values are
    clipped to lambda_max, which is the full-set endpoint.
    """
    order = rank_labels(scores)
    critical = np.array([saps_score(scores, j, params) for j in range(len(order))])
    critical[order[0]] = 0.0
    return np.minimum(critical, params.lambda_max)


def saps_set(scores: Sequence[float], lam: float, params: SapsParams) -> PredictionSet:
    """
    The k labels with smallest SAPS score, where k is one plus the number
    of non-top labels whose score is <= lambda.
    """
    _check_lambda(lam, params.lambda_max)
    return _set_from_critical(saps_critical(scores, params), rank_labels(scores), lam, PredictorKind.SAPS)


def instance_uniform(seed: int, instance_id: str) -> float:
    """
    The per-instance SAPS draw u in (0, 1). It depends only on the seed
    and the instance id, so an instance keeps its u in every split.
    """
    digest = hashlib.blake2b(instance_id.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng([seed, int.from_bytes(digest, "little")])
    return float(rng.integers(1, 2**53)) / 2**53


# --- Predictor objects used by the pipelines ---

class SetValuedPredictor(ABC):
    """
    A set-valued predictor reduced to its critical-threshold matrix:
    label j of instance i is in the set at lambda iff lambda >= C[i, j].
    """
    kind: PredictorKind
    domain_max: float

    @abstractmethod
    def critical_matrix(self, scores: np.ndarray, instance_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        ...

    @abstractmethod
    def prediction_set(self, scores: Sequence[float], lam: float, instance_id: Optional[str] = None) -> PredictionSet:
        ...

    def check_lambda(self, lam: float) -> None:
        _check_lambda(lam, self.domain_max)

    def true_label_critical(self, dataset: Dataset) -> np.ndarray:
        critical = self.critical_matrix(dataset.scores, dataset.instance_ids)
        return critical[np.arange(len(dataset)), dataset.true_labels]

    def set_sizes(self, critical: np.ndarray, lam: float) -> np.ndarray:
        return (critical <= lam).sum(axis=1)

    def contains_label(self, critical: np.ndarray, labels: np.ndarray, lam: float) -> np.ndarray:
        return critical[np.arange(critical.shape[0]), labels] <= lam

    def describe(self) -> dict:
        return {"predictor": self.kind.value, "domain_max": self.domain_max}


class ThresholdPredictor(SetValuedPredictor):
    kind = PredictorKind.THRESHOLD
    domain_max = 1.0

    def critical_matrix(self, scores: np.ndarray, instance_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        scores = np.asarray(scores, dtype=float)
        critical = 1.0 - scores
        critical[np.arange(scores.shape[0]), np.argmax(scores, axis=1)] = 0.0
        return critical

    def prediction_set(self, scores: Sequence[float], lam: float, instance_id: Optional[str] = None) -> PredictionSet:
        return threshold_set(scores, lam)


class SapsPredictor(SetValuedPredictor):
    kind = PredictorKind.SAPS

    def __init__(self, w: float, lambda_max: float = DEFAULT_LAMBDA_MAX, seed: int = 0):
        if w <= 0:
            raise ValueError("SAPS weight w must be positive")
        if lambda_max < 1:
            raise ValueError("lambda_max must be at least 1")
        self.w = w
        self.domain_max = lambda_max
        self.seed = seed

    def params_for(self, instance_id: str) -> SapsParams:
        return SapsParams(w=self.w, u=instance_uniform(self.seed, instance_id), lambda_max=self.domain_max)

    def uniforms(self, instance_ids: Sequence[str]) -> np.ndarray:
        cache = {}
        for iid in instance_ids:
            if iid not in cache:
                cache[iid] = instance_uniform(self.seed, iid)
        return np.array([cache[iid] for iid in instance_ids])

    def critical_matrix(self, scores: np.ndarray, instance_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        if instance_ids is None:
            raise ValueError("SAPS needs instance ids to draw its per-instance u")
        scores = np.asarray(scores, dtype=float)
        ranks = _rank_matrix(scores)
        m_top = scores.max(axis=1, keepdims=True)
        u = self.uniforms(instance_ids)[:, None]
        critical = m_top + (ranks - 1 + u) * self.w
        critical[ranks == 0] = 0.0
        return np.minimum(critical, self.domain_max)

    def prediction_set(self, scores: Sequence[float], lam: float, instance_id: Optional[str] = None) -> PredictionSet:
        if instance_id is None:
            raise ValueError("SAPS needs an instance id to draw its per-instance u")
        return saps_set(scores, lam, self.params_for(instance_id))

    def describe(self) -> dict:
        return {**super().describe(), "w": self.w, "seed": self.seed}


def saps_select_w(
    validation: Dataset,
    lam: float,
    grid: Sequence[float] = DEFAULT_SAPS_W_GRID,
    lambda_max: float = DEFAULT_LAMBDA_MAX,
    seed: int = 0,
) -> float:
    """
    The grid w with the smallest mean set size over validation instances
    at one reference lambda (1.0 by default); ties go to the smaller w.
    The chosen w is then used for every lambda of the run, so a lambda
    sweep sees one nested family of sets.
    """
    if not grid:
        raise EmptyGrid("the SAPS w grid is empty")
    if len(validation) == 0:
        raise EmptyDataset("validation set is empty")

    rows = validation.first_rows
    scores = validation.scores[rows]
    ids = [validation.instance_ids[int(r)] for r in rows]
    best_w, best_size = None, np.inf
    for w in sorted(grid):
        predictor = SapsPredictor(w, lambda_max, seed)
        size = predictor.set_sizes(predictor.critical_matrix(scores, ids), lam).mean()
        logger.debug(f"--- Set Predictors: w={w} gives mean set size {size:.4f} ---")
        if size < best_size:
            best_w, best_size = w, size
    logger.info(f"--- Set Predictors: Selected SAPS w={best_w} (mean set size {best_size:.4f}) ---")
    return best_w


class PredictorSpec(BaseModel):
    """
    How to build the predictor of a run. A SAPS spec without a fixed w
    selects it on a validation split at saps_reference_lambda.
    """
    model_config = ConfigDict(frozen=True)

    kind: PredictorKind = PredictorKind.THRESHOLD
    saps_w: Optional[float] = Field(default=None, gt=0)
    saps_w_grid: Tuple[float, ...] = DEFAULT_SAPS_W_GRID
    saps_reference_lambda: float = Field(default=1.0, ge=0)
    lambda_max: float = Field(default=DEFAULT_LAMBDA_MAX, ge=1)
    seed: int = 0

    @property
    def needs_validation(self) -> bool:
        return self.kind is PredictorKind.SAPS and self.saps_w is None

    @property
    def domain_max(self) -> float:
        return 1.0 if self.kind is PredictorKind.THRESHOLD else self.lambda_max

    def build(self, validation: Optional[Dataset] = None) -> SetValuedPredictor:
        if self.kind is PredictorKind.THRESHOLD:
            return ThresholdPredictor()
        w = self.saps_w
        if w is None:
            if validation is None:
                raise ValueError("a SAPS predictor without a fixed w needs a validation set")
            w = saps_select_w(
                validation, self.saps_reference_lambda, self.saps_w_grid, self.lambda_max, self.seed
            )
        return SapsPredictor(w, self.lambda_max, self.seed)
