# tests/conftest.py

from collections import defaultdict
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
import pytest

from harmctl.data.loaders import write_dataset
from harmctl.data.models import Dataset, LabelSpace, Regime, Sample, WorldConfig

LABELS = ("cat", "dog", "truck")

Row = Tuple[str, Sequence[float], int, int, Optional[str]]


def dataset_from_rows(rows: Iterable[Row], labels: Sequence[str] = LABELS) -> Dataset:
    """rows: (instance_id, scores, true_label, prediction, participant_id)."""
    samples, hits = [], defaultdict(list)
    for iid, scores, y, pred, pid in rows:
        samples.append(Sample(
            instance_id=iid, scores=tuple(scores), true_label=y, human_prediction=pred, participant_id=pid,
        ))
        hits[iid].append(int(y == pred))
    return Dataset(
        label_space=LabelSpace(labels=tuple(labels)),
        samples=tuple(samples),
        per_instance_accuracy={k: sum(v) / len(v) for k, v in hits.items()},
    )


def random_dataset(n_instances: int, n_experts: int, n_labels: int, seed: int) -> Dataset:
    """Dirichlet scores, labels drawn from the scores, experts right 70% of the time."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        scores = rng.dirichlet(np.full(n_labels, 0.5))
        y = int(rng.choice(n_labels, p=scores))
        for e in range(n_experts):
            pred = y if rng.random() < 0.7 else int(rng.integers(n_labels))
            rows.append((f"img_{i}", scores.tolist(), y, pred, f"p{e}"))
    return dataset_from_rows(rows, [f"class_{j}" for j in range(n_labels)])


@pytest.fixture
def make_dataset() -> Callable[..., Dataset]:
    return dataset_from_rows


@pytest.fixture
def toy_dataset() -> Dataset:
    return random_dataset(n_instances=60, n_experts=4, n_labels=4, seed=11)


@pytest.fixture
def small_world_config() -> WorldConfig:
    return WorldConfig(n_labels=6, n_instances=200, n_experts=5, seed=3)


@pytest.fixture
def interventional_world_config() -> WorldConfig:
    return WorldConfig(
        n_labels=6, n_instances=300, n_experts=5, regime=Regime.INTERVENTIONAL_ONLY, seed=5,
    )


@pytest.fixture
def csv_inputs(tmp_path: Path, toy_dataset: Dataset) -> Tuple[Path, Path]:
    return write_dataset(toy_dataset, tmp_path / "data")
