# tests/test_expert_mnl.py

from itertools import combinations

import numpy as np
import pytest

from harmctl.data.models import PredictionSet, PredictorKind, SetPredictionRecord
from harmctl.errors import EmptyStratum
from harmctl.services.expert_mnl import (
    MnlMixture,
    accuracy_curve,
    empirical_accuracy,
    estimate_accuracy,
    fit_confusion,
    modeled_alone_accuracy,
    predict_distribution,
    sample_prediction,
    stratify_difficulty,
    success_probability,
)
from harmctl.services.set_predictors import SapsPredictor, ThresholdPredictor

from conftest import dataset_from_rows

SCORES = (0.5, 0.3, 0.2)


def _set(*members: int) -> PredictionSet:
    return PredictionSet(members=members, lam=0.5, predictor_id=PredictorKind.THRESHOLD)


def _accuracy_fixture():
    # instance accuracies 0.2, 0.4, 0.9, 1.0 from 10 predictions each
    rows = []
    for iid, right in (("a", 2), ("b", 4), ("c", 9), ("d", 10)):
        rows += [(iid, SCORES, 0, 0 if k < right else 1, f"p{k}") for k in range(10)]
    return dataset_from_rows(rows)


def test_median_split():
    strata = stratify_difficulty(_accuracy_fixture(), [0.5])
    assert strata.thresholds == pytest.approx((0.65,))
    assert [strata.assignment[i] for i in "abcd"] == [0, 0, 1, 1]


def test_no_cuts_single_stratum():
    strata = stratify_difficulty(_accuracy_fixture(), [])
    assert strata.n_strata == 1
    assert set(strata.assignment.values()) == {0}


def test_constant_accuracy_single_stratum():
    rows = [(iid, SCORES, 0, 0, "p") for iid in "abcd"]
    strata = stratify_difficulty(dataset_from_rows(rows), [0.25, 0.5, 0.75])
    assert strata.n_strata == 1
    assert set(strata.assignment.values()) == {0}


def test_confusion_counts():
    rows = [("x", SCORES, 1, 1, f"p{k}") for k in range(8)] + [("x", SCORES, 1, 0, f"q{k}") for k in range(2)]
    dataset = dataset_from_rows(rows)
    mixture = fit_confusion(dataset, stratify_difficulty(dataset, []), epsilon=0.0)
    assert mixture.row(1, 0) == pytest.approx([0.2, 0.8, 0.0])


def test_unseen_label_gets_uniform_row():
    rows = [("x", SCORES, 1, 1, "p")]
    dataset = dataset_from_rows(rows)
    mixture = fit_confusion(dataset, stratify_difficulty(dataset, []), epsilon=1e-6)
    assert mixture.row(2, 0) == pytest.approx([1 / 3] * 3)


def test_heavy_smoothing_is_uniform():
    dataset = _accuracy_fixture()
    mixture = fit_confusion(dataset, stratify_difficulty(dataset, []), epsilon=1e9)
    assert mixture.matrix == pytest.approx(np.full((1, 3, 3), 1 / 3), abs=1e-6)


def test_empty_stratum():
    dataset = _accuracy_fixture()
    strata = stratify_difficulty(dataset, [0.5])
    with pytest.raises(EmptyStratum):
        fit_confusion(dataset.restrict(["a", "b"]), strata)


def _mixture():
    # labels: dog, cat, truck
    theta = [[[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]]]
    return MnlMixture(theta=theta, epsilon=0.0)


def test_success_probability_examples():
    mixture = _mixture()
    assert success_probability(mixture, 0, 0, _set(0)) == 1.0
    assert success_probability(mixture, 0, 0, _set(1, 2)) == 0.0
    assert success_probability(mixture, 0, 0, _set(0, 1)) == pytest.approx(0.8 / 0.95)


def test_success_shrinks_as_sets_grow():
    rng = np.random.default_rng(0)
    theta = rng.dirichlet(np.ones(5), size=(2, 5))
    mixture = MnlMixture(theta=theta.tolist(), epsilon=0.0)
    labels = range(5)
    for y in labels:
        for d in range(2):
            for size in range(1, 5):
                for small in combinations(labels, size):
                    if y not in small:
                        continue
                    for extra in labels:
                        if extra in small:
                            continue
                        p_small = success_probability(mixture, y, d, _set(*small))
                        p_large = success_probability(mixture, y, d, _set(*small, extra))
                        assert p_large <= p_small + 1e-15
                    dist = predict_distribution(mixture, y, d, _set(*small))
                    assert abs(sum(dist.values()) - 1.0) <= 1e-12


def test_sampling_singleton_and_full_set():
    mixture = _mixture()
    rng = np.random.default_rng(1)
    assert sample_prediction(mixture, 2, 0, _set(1), rng) == 1

    draws = np.array([sample_prediction(mixture, 0, 0, _set(0, 1, 2), rng) for _ in range(4000)])
    for label, p in enumerate(mixture.row(0, 0)):
        sigma = np.sqrt(p * (1 - p) / len(draws))
        assert abs((draws == label).mean() - p) <= 3 * sigma + 1e-12


def test_accuracy_endpoints(toy_dataset):
    strata = stratify_difficulty(toy_dataset, [0.5])
    mixture = fit_confusion(toy_dataset, strata)
    for predictor in (ThresholdPredictor(), SapsPredictor(0.1, seed=0)):
        curve = accuracy_curve(mixture, strata, toy_dataset, predictor, [0.0, predictor.domain_max])
        top1 = toy_dataset.scores.argmax(axis=1) == toy_dataset.true_labels
        assert curve[0] == pytest.approx(top1.mean())
        assert curve[1] == pytest.approx(modeled_alone_accuracy(mixture, strata, toy_dataset))


def test_grid_curve_matches_pointwise(toy_dataset):
    strata = stratify_difficulty(toy_dataset, [0.5])
    mixture = fit_confusion(toy_dataset, strata)
    predictor = ThresholdPredictor()
    grid = [0.1, 0.45, 0.8]
    curve = accuracy_curve(mixture, strata, toy_dataset, predictor, grid)
    for lam, value in zip(grid, curve):
        expected = np.mean([
            success_probability(
                mixture, s.true_label, strata.assignment[s.instance_id], predictor.prediction_set(s.scores, lam)
            )
            for s in toy_dataset.samples
        ])
        assert value == pytest.approx(expected)
        assert estimate_accuracy(mixture, strata, toy_dataset, predictor, lam) == pytest.approx(expected)


def test_empirical_accuracy_uses_matching_sets():
    rows = [("a", SCORES, 0, 0, "p1"), ("b", SCORES, 1, 1, "p1")]
    test = dataset_from_rows(rows)
    records = [
        SetPredictionRecord(instance_id="a", participant_id="p2", set_members=(0,), human_prediction=0),
        SetPredictionRecord(instance_id="a", participant_id="p3", set_members=(0, 1), human_prediction=1),
        SetPredictionRecord(instance_id="a", participant_id="p4", set_members=(0, 1), human_prediction=0),
        SetPredictionRecord(instance_id="b", participant_id="p2", set_members=(0, 1), human_prediction=1),
    ]
    # lam = 0 shows {0}; lam = 0.75 shows {0, 1}; lam = 1 shows all three
    result = empirical_accuracy(records, test, ThresholdPredictor(), [0.0, 0.75, 1.0])
    assert result[0] == 1.0
    assert result[1] == pytest.approx((0.5 + 1.0) / 2)
    assert np.isnan(result[2])
