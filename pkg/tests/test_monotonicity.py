# tests/test_monotonicity.py

import math

import numpy as np
import pytest

from harmctl.data.models import SetPredictionRecord
from harmctl.errors import EmptyDataset, OrphanPrediction
from harmctl.services.monotonicity import (
    binomial_cell,
    difficulty_names,
    verify_interventional_monotonicity,
)
from harmctl.services.scm_oracle import generate_world, simulate_set_records, world_to_dataset
from harmctl.services.set_predictors import ThresholdPredictor



@pytest.fixture
def two_cats(make_dataset):
    return make_dataset([
        ("a", (0.6, 0.3, 0.1), 0, 0, "p0"),
        ("b", (0.5, 0.4, 0.1), 0, 1, "p0"),
        ("c", (0.2, 0.7, 0.1), 1, 1, "p0"),
    ])


def _record(iid, members, prediction, pid="p0"):
    return SetPredictionRecord(
        instance_id=iid, participant_id=pid, set_members=tuple(members), human_prediction=prediction,
    )


def _all_cells(report, label, size):
    return [c for c in report.cells if c.label == label and c.competence == "all" and c.set_size == size]


def test_binomial_cell():
    p, se = binomial_cell(8, 10, min_count=5)
    assert p == 0.8
    assert se == pytest.approx(math.sqrt(0.016))
    assert binomial_cell(3, 4, min_count=5) == (None, None)


def test_difficulty_names():
    assert difficulty_names(4) == ["high", "medium_high", "medium_low", "low"]
    assert difficulty_names(2) == ["level_0", "level_1"]


def test_success_rate_per_set_size(two_cats):
    records = [_record("a", (0, 1), 0 if i < 8 else 1, pid=f"p{i}") for i in range(10)]
    report = verify_interventional_monotonicity(records, two_cats, min_count=5, difficulty_cuts=())
    (cell,) = _all_cells(report, "cat", 2)
    assert (cell.n, cell.successes) == (10, 8)
    assert cell.success_probability == 0.8
    assert cell.standard_error == pytest.approx(math.sqrt(0.016))


def test_sets_without_true_label_and_singletons_are_skipped(two_cats):
    records = [_record("a", (1, 2), 1), _record("a", (0,), 0), _record("a", (0, 1, 2), 0)]
    report = verify_interventional_monotonicity(records, two_cats, min_count=1, difficulty_cuts=())
    sizes = {c.set_size for c in report.cells}
    assert sizes == {3}


def test_small_cells_are_reported_insufficient(two_cats):
    records = [_record("a", (0, 1), 0), _record("a", (0, 1), 1)]
    report = verify_interventional_monotonicity(records, two_cats, min_count=5, difficulty_cuts=())
    assert report.insufficient
    assert all(not c.sufficient for c in report.cells)
    assert report.violations == []


def test_rising_success_is_a_violation(two_cats):
    records = [_record("c", (1, 0), 1 if i < 5 else 0, pid=f"p{i}") for i in range(50)]
    records += [_record("c", (1, 0, 2), 1, pid=f"p{i}") for i in range(50)]
    report = verify_interventional_monotonicity(records, two_cats, min_count=5, difficulty_cuts=())
    found = [v for v in report.violations if v.competence == "all"]
    assert len(found) == 1
    assert (found[0].label, found[0].smaller_size, found[0].larger_size) == ("dog", 2, 3)
    assert found[0].increase == pytest.approx(0.9)


def test_competence_groups_split_participants(two_cats):
    records = [_record("a", (0, 1), 0, pid="good") for _ in range(6)]
    records += [_record("a", (0, 1), 1, pid="bad") for _ in range(6)]
    report = verify_interventional_monotonicity(records, two_cats, min_count=5, difficulty_cuts=())
    by_group = {c.competence: c.success_probability for c in report.cells}
    assert by_group == {"all": 0.5, "high": 1.0, "low": 0.0}


def test_records_must_reference_known_instances(two_cats):
    with pytest.raises(OrphanPrediction):
        verify_interventional_monotonicity([_record("zzz", (0, 1), 0)], two_cats)
    with pytest.raises(EmptyDataset):
        verify_interventional_monotonicity([], two_cats)


def test_simulated_interventional_world_is_monotone(interventional_world_config):
    world = generate_world(interventional_world_config.model_copy(update={"n_instances": 600}))
    records = simulate_set_records(world, ThresholdPredictor(), np.random.default_rng(0), np.linspace(0, 1, 11))
    report = verify_interventional_monotonicity(records, world_to_dataset(world), min_count=20, difficulty_cuts=())
    all_groups = [v for v in report.violations if v.competence == "all"]
    assert len(all_groups) <= 2
