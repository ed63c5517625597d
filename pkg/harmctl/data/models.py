# harmctl/data/models.py

from enum import Enum
from functools import cached_property
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from harmctl.errors import UnknownLabel


class LabelSpace(BaseModel):
    """The ordered label names of a dataset. Index of a name is its label id."""
    model_config = ConfigDict(frozen=True)

    labels: Tuple[str, ...]

    @field_validator("labels")
    @classmethod
    def _unique_and_plural(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        if len(v) < 2:
            raise ValueError("a label space needs at least two labels")
        if len(set(v)) != len(v):
            raise ValueError("label names must be unique")
        return v

    @property
    def size(self) -> int:
        return len(self.labels)

    @cached_property
    def _lookup(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.labels)}

    def index(self, name: str, row: Optional[int] = None) -> int:
        try:
            return self._lookup[name]
        except KeyError:
            raise UnknownLabel(name, row) from None

    def name(self, index: int) -> str:
        return self.labels[index]

    @classmethod
    def numbered(cls, size: int, prefix: str = "class_") -> "LabelSpace":
        return cls(labels=tuple(f"{prefix}{i}" for i in range(size)))


class ScoreVector(BaseModel):
    """Classifier scores for one instance, indexed by label id."""
    model_config = ConfigDict(frozen=True)

    scores: Tuple[float, ...]
    noise: Optional[int] = None

    @field_validator("scores")
    @classmethod
    def _in_unit_interval(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(not (0.0 <= s <= 1.0) for s in v):
            raise ValueError("scores must lie in [0, 1]")
        return v


class Sample(BaseModel):
    """One (instance, participant) prediction made by a human on their own."""
    model_config = ConfigDict(frozen=True)

    instance_id: str
    noise: Optional[int] = None
    scores: Tuple[float, ...]
    true_label: int = Field(ge=0)
    human_prediction: int = Field(ge=0)
    participant_id: Optional[str] = None

    @property
    def human_correct(self) -> bool:
        return self.human_prediction == self.true_label


class HumanPrediction(BaseModel):
    """A row of the humans CSV, resolved to label ids."""
    model_config = ConfigDict(frozen=True)

    instance_id: str
    participant_id: str
    true_label: int
    prediction: int


class SetPredictionRecord(BaseModel):
    """A prediction a participant made while shown a prediction set."""
    model_config = ConfigDict(frozen=True)

    instance_id: str
    participant_id: str
    set_members: Tuple[int, ...]
    human_prediction: int

    @model_validator(mode="after")
    def _prediction_in_set(self) -> "SetPredictionRecord":
        if not self.set_members:
            raise ValueError("set_members must not be empty")
        if len(set(self.set_members)) != len(self.set_members):
            raise ValueError("set_members must not contain duplicates")
        if self.human_prediction not in self.set_members:
            raise ValueError("the prediction must be a member of the shown set")
        return self


class Dataset(BaseModel):
    """
    The joined calibration/test material: every human-alone prediction
    together with the classifier scores of its instance.
    """
    model_config = ConfigDict(frozen=True)

    label_space: LabelSpace
    samples: Tuple[Sample, ...]
    per_instance_accuracy: Dict[str, float]

    @model_validator(mode="after")
    def _consistent(self) -> "Dataset":
        L = self.label_space.size
        for s in self.samples:
            if len(s.scores) != L:
                raise ValueError(f"instance '{s.instance_id}' has {len(s.scores)} scores, expected {L}")
            if s.true_label >= L or s.human_prediction >= L:
                raise ValueError(f"instance '{s.instance_id}' has a label index outside the label space")
            if s.instance_id not in self.per_instance_accuracy:
                raise ValueError(f"instance '{s.instance_id}' has no accuracy entry")
        if any(not (0.0 <= a <= 1.0) for a in self.per_instance_accuracy.values()):
            raise ValueError("per-instance accuracy must lie in [0, 1]")
        return self

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_labels(self) -> int:
        return self.label_space.size

    # Array views used by the vectorized services. Cached; the model is frozen.

    @cached_property
    def scores(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.n_labels))
        return np.asarray([s.scores for s in self.samples], dtype=float)

    @cached_property
    def true_labels(self) -> np.ndarray:
        return np.asarray([s.true_label for s in self.samples], dtype=int)

    @cached_property
    def human_predictions(self) -> np.ndarray:
        return np.asarray([s.human_prediction for s in self.samples], dtype=int)

    @cached_property
    def instance_ids(self) -> List[str]:
        return [s.instance_id for s in self.samples]

    @cached_property
    def human_correct(self) -> np.ndarray:
        return self.human_predictions == self.true_labels

    @cached_property
    def unique_instances(self) -> List[str]:
        """Instance ids in first-appearance order."""
        return list(dict.fromkeys(self.instance_ids))

    @cached_property
    def first_rows(self) -> np.ndarray:
        """Row index of the first sample of every unique instance."""
        seen: Dict[str, int] = {}
        for row, iid in enumerate(self.instance_ids):
            seen.setdefault(iid, row)
        return np.asarray([seen[i] for i in self.unique_instances], dtype=int)

    def restrict(self, instance_ids) -> "Dataset":
        """The sub-dataset holding every sample of the given instances."""
        keep = set(instance_ids)
        return Dataset(
            label_space=self.label_space,
            samples=tuple(s for s in self.samples if s.instance_id in keep),
            per_instance_accuracy={
                k: v for k, v in self.per_instance_accuracy.items() if k in keep
            },
        )


class PredictorKind(str, Enum):
    THRESHOLD = "threshold"
    SAPS = "saps"


class PredictionSet(BaseModel):
    """Labels shown to the expert for one instance, in rank order."""
    model_config = ConfigDict(frozen=True)

    members: Tuple[int, ...]
    lam: float
    predictor_id: PredictorKind

    @field_validator("members")
    @classmethod
    def _non_empty_unique(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v:
            raise ValueError("a prediction set is never empty")
        if len(set(v)) != len(v):
            raise ValueError("a prediction set has no duplicates")
        return v

    def __contains__(self, label: int) -> bool:
        return label in self.members

    def __len__(self) -> int:
        return len(self.members)


class SapsParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    w: float = Field(gt=0)
    u: float = Field(gt=0, lt=1)
    lambda_max: float = Field(default=6.25, ge=1)


class Regime(str, Enum):
    COUNTERFACTUAL_MONOTONE = "cf"
    INTERVENTIONAL_ONLY = "interv"


class WorldConfig(BaseModel):
    """
    Parameters of the synthetic structural causal model.
    The default world has a classifier with top-1 accuracy around 0.7
    and experts whose success rate falls linearly from 0.95 (singleton
    sets) to 0.75 (experts alone).
    """
    model_config = ConfigDict(extra="forbid")

    n_labels: int = Field(default=16, ge=2)
    n_instances: int = Field(default=2000, ge=1)
    n_experts: int = Field(default=10, ge=1)
    score_model: Literal["dirichlet", "tabulated"] = "dirichlet"
    concentration: float = Field(default=0.15, gt=0)
    peak: float = Field(default=2.5, ge=0)
    tabulated_scores: Optional[List[List[float]]] = None
    success_profile: Optional[List[float]] = None
    success_first: float = Field(default=0.95, ge=0, le=1)
    success_last: float = Field(default=0.75, ge=0, le=1)
    regime: Regime = Regime.COUNTERFACTUAL_MONOTONE
    offsets: Optional[List[float]] = None
    expert_skill_spread: float = Field(default=0.0, ge=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _tabulated_needs_rows(self) -> "WorldConfig":
        if self.score_model == "tabulated" and not self.tabulated_scores:
            raise ValueError("score_model 'tabulated' needs tabulated_scores")
        return self

    def profile(self) -> List[float]:
        """q(k) for k = 1..L, as a list indexed by k - 1."""
        if self.success_profile is not None:
            return list(self.success_profile)
        L = self.n_labels
        step = (self.success_first - self.success_last) / max(L - 1, 1)
        return [self.success_first - step * i for i in range(L)]
