# tests/test_set_predictors.py

import numpy as np
import pytest

from harmctl.data.models import PredictorKind, SapsParams
from harmctl.errors import EmptyGrid, LambdaOutOfRange
from harmctl.services.set_predictors import (
    PredictorSpec,
    SapsPredictor,
    ThresholdPredictor,
    critical_lambda,
    instance_uniform,
    rank_labels,
    saps_critical,
    saps_score,
    saps_select_w,
    saps_set,
    threshold_set,
)

from conftest import dataset_from_rows


@pytest.mark.parametrize(
    "scores, expected",
    [
        ((0.2, 0.5, 0.3), [1, 2, 0]),
        ((0.4, 0.4, 0.2), [0, 1, 2]),
        ((0.25, 0.25, 0.25, 0.25), [0, 1, 2, 3]),
    ],
)
def test_rank_labels(scores, expected):
    assert rank_labels(scores) == expected


def test_threshold_set_example():
    assert threshold_set((0.5, 0.3, 0.15, 0.05), 0.8).members == (0, 1)


def test_threshold_set_endpoints():
    rng = np.random.default_rng(0)
    for _ in range(50):
        scores = rng.dirichlet(np.ones(6))
        assert threshold_set(scores, 0.0).members == (rank_labels(scores)[0],)
        assert sorted(threshold_set(scores, 1.0).members) == list(range(6))


def test_threshold_rejects_lambda_outside_domain():
    with pytest.raises(LambdaOutOfRange):
        threshold_set((0.5, 0.5), 1.5)


def test_critical_lambda_values():
    scores = (0.5, 0.3, 0.2)
    assert critical_lambda(scores, 1) == pytest.approx(0.7)
    assert critical_lambda(scores, 0) == 0.0
    assert critical_lambda(scores, 2) == pytest.approx(0.8)


def test_critical_lambda_matches_grid_scan():
    scores = (0.5, 0.3, 0.2)
    grid = np.round(np.arange(0, 10001) * 1e-4, 10)
    for label in range(3):
        first = next(lam for lam in grid if label in threshold_set(scores, lam))
        assert abs(first - critical_lambda(scores, label)) <= 1e-4


def test_saps_score_branches():
    scores = (0.6, 0.25, 0.15)
    assert saps_score(scores, 0, SapsParams(w=0.1, u=0.5)) == pytest.approx(0.3)
    assert saps_score(scores, 1, SapsParams(w=0.1, u=0.5)) == pytest.approx(0.65)
    assert saps_score(scores, 2, SapsParams(w=0.1, u=1e-12)) == pytest.approx(0.7)


def test_saps_set_counts_non_top_scores():
    # non-top SAPS scores are 0.65 and 0.75
    scores = (0.6, 0.25, 0.15)
    params = SapsParams(w=0.1, u=0.5)
    assert saps_set(scores, 0.7, params).members == (0, 1)
    assert saps_set(scores, 0.0, params).members == (0,)
    assert sorted(saps_set(scores, params.lambda_max, params).members) == [0, 1, 2]


def test_saps_critical_is_clipped():
    params = SapsParams(w=5.0, u=0.5, lambda_max=6.25)
    assert saps_critical((0.6, 0.25, 0.15), params).max() == 6.25


def test_instance_uniform_is_stable_and_open():
    u = instance_uniform(3, "img_1")
    assert u == instance_uniform(3, "img_1")
    assert 0.0 < u < 1.0
    assert u != instance_uniform(4, "img_1")


def test_matrix_agrees_with_scalar_sets():
    rng = np.random.default_rng(1)
    scores = rng.dirichlet(np.ones(5), size=20)
    ids = [f"img_{i}" for i in range(20)]
    for predictor in (ThresholdPredictor(), SapsPredictor(0.1, seed=2)):
        critical = predictor.critical_matrix(scores, ids)
        for lam in np.linspace(0, predictor.domain_max, 23):
            for i in range(20):
                members = predictor.prediction_set(scores[i], float(lam), ids[i]).members
                assert set(members) == set(np.flatnonzero(critical[i] <= lam))


def test_sets_are_nested():
    rng = np.random.default_rng(2)
    scores = rng.dirichlet(np.ones(6), size=30)
    ids = [f"img_{i}" for i in range(30)]
    for predictor in (ThresholdPredictor(), SapsPredictor(0.2, seed=0)):
        critical = predictor.critical_matrix(scores, ids)
        grid = np.linspace(0, predictor.domain_max, 40)
        sizes = np.stack([predictor.set_sizes(critical, lam) for lam in grid])
        assert (np.diff(sizes, axis=0) >= 0).all()
        assert (sizes[0] == 1).all()
        assert (sizes[-1] == 6).all()


def _validation():
    rows = [
        ("a", (0.6, 0.3, 0.1), 0, 0, "p1"),
        ("b", (0.5, 0.45, 0.05), 1, 1, "p1"),
        ("c", (0.4, 0.35, 0.25), 2, 2, "p1"),
    ]
    return dataset_from_rows(rows)


def test_select_w_single_candidate():
    assert saps_select_w(_validation(), 1.0, grid=(0.1,)) == 0.1


def test_select_w_prefers_smaller_sets():
    validation = _validation()
    # a large w pushes every non-top label above lambda
    assert saps_select_w(validation, 0.7, grid=(0.01, 0.5)) == 0.5


def test_select_w_empty_grid():
    with pytest.raises(EmptyGrid):
        saps_select_w(_validation(), 1.0, grid=())


def test_spec_builds_predictors():
    assert isinstance(PredictorSpec().build(), ThresholdPredictor)
    fixed = PredictorSpec(kind=PredictorKind.SAPS, saps_w=0.2).build()
    assert isinstance(fixed, SapsPredictor) and fixed.w == 0.2
    tuned = PredictorSpec(kind=PredictorKind.SAPS, saps_w_grid=(0.1,)).build(_validation())
    assert tuned.w == 0.1
    with pytest.raises(ValueError):
        PredictorSpec(kind=PredictorKind.SAPS).build()


def test_select_w_ties_go_to_smaller_w():
    # at lambda 0 every w gives singletons
    assert saps_select_w(_validation(), 0.0, grid=(0.3, 0.1, 0.2)) == 0.1
