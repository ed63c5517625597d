# tests/test_loaders.py

from pathlib import Path

import pytest

from harmctl.data.loaders import (
    label_space_from_scores,
    load_dataset,
    load_human_predictions,
    load_scores,
    load_set_records,
    split_dataset,
    split_dataset_three_way,
    true_labels_from,
    write_dataset,
)
from harmctl.data.models import HumanPrediction, LabelSpace
from harmctl.errors import (
    ConfigInvalid,
    ConflictingLabel,
    DataError,
    DuplicateInstance,
    MissingColumn,
    OrphanPrediction,
    ScoreOutOfRange,
    UnknownLabel,
    UnreadableFile,
)

from conftest import random_dataset

SPACE = LabelSpace(labels=("cat", "dog", "truck"))


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def test_load_scores_single_row(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat,dog,truck\nimg_1,110,0.5,0.3,0.2\n")
    scores = load_scores(path, SPACE)
    assert list(scores) == ["img_1"]
    assert scores["img_1"].scores == (0.5, 0.3, 0.2)
    assert scores["img_1"].noise == 110


def test_load_scores_rejects_out_of_range(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat,dog,truck\nimg_1,,1.2,0.3,0.2\n")
    with pytest.raises(ScoreOutOfRange):
        load_scores(path, SPACE)


def test_load_scores_clamps_rounding_noise(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat,dog,truck\nimg_1,,1.0000000001,0,0\n")
    assert load_scores(path, SPACE)["img_1"].scores[0] == 1.0


def test_load_scores_rejects_duplicates(tmp_path):
    body = "instance_id,noise,cat,dog,truck\nimg_7,,0.5,0.3,0.2\nimg_7,,0.5,0.3,0.2\n"
    with pytest.raises(DuplicateInstance):
        load_scores(_write(tmp_path / "scores.csv", body), SPACE)


def test_strict_scores_must_sum_to_one(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat,dog,truck\nimg_1,,0.5,0.3,0.1\n")
    assert load_scores(path, SPACE)["img_1"].scores == (0.5, 0.3, 0.1)
    with pytest.raises(ScoreOutOfRange):
        load_scores(path, SPACE, strict=True)


def test_label_space_comes_from_header(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat,dog,truck\n")
    assert label_space_from_scores(path).labels == ("cat", "dog", "truck")


def test_missing_column(tmp_path):
    path = _write(tmp_path / "humans.csv", "instance_id,participant_id,prediction\n")
    with pytest.raises(MissingColumn):
        load_human_predictions(path, SPACE)


def test_human_predictions_resolve_names(tmp_path):
    path = _write(tmp_path / "humans.csv", "instance_id,participant_id,true_label,prediction\nimg_1,p9,dog,dog\n")
    (pred,) = load_human_predictions(path, SPACE)
    assert pred.prediction == SPACE.index("dog") == 1


def test_unknown_label(tmp_path):
    path = _write(tmp_path / "humans.csv", "instance_id,participant_id,true_label,prediction\nimg_1,p9,dog,zebra\n")
    with pytest.raises(UnknownLabel):
        load_human_predictions(path, SPACE)


def test_empty_body_gives_empty_list(tmp_path):
    path = _write(tmp_path / "humans.csv", "instance_id,participant_id,true_label,prediction\n")
    assert load_human_predictions(path, SPACE) == []


def test_conflicting_true_labels():
    rows = [
        HumanPrediction(instance_id="img_1", participant_id="a", true_label=0, prediction=0),
        HumanPrediction(instance_id="img_1", participant_id="b", true_label=1, prediction=0),
    ]
    with pytest.raises(ConflictingLabel):
        true_labels_from(rows)


def _study_files(tmp_path):
    scores = _write(
        tmp_path / "scores.csv",
        "instance_id,noise,cat,dog,truck\n"
        "img_1,110,0.5,0.3,0.2\n"
        "img_2,80,0.1,0.6,0.3\n",
    )
    humans = _write(
        tmp_path / "humans.csv",
        "instance_id,participant_id,true_label,prediction\n"
        "img_1,p1,cat,cat\n"
        "img_1,p2,cat,dog\n"
        "img_1,p3,cat,cat\n"
        "img_2,p1,dog,dog\n",
    )
    return scores, humans


def test_join_per_instance_accuracy(tmp_path):
    dataset = load_dataset(*_study_files(tmp_path))
    assert len(dataset) == 4
    assert dataset.per_instance_accuracy["img_1"] == pytest.approx(2 / 3)
    assert dataset.per_instance_accuracy["img_2"] == 1.0


def test_noise_filter(tmp_path):
    dataset = load_dataset(*_study_files(tmp_path), noise_filter=110)
    assert set(dataset.instance_ids) == {"img_1"}


def test_orphan_prediction(tmp_path):
    scores, humans = _study_files(tmp_path)
    with open(humans, "a") as fh:
        fh.write("img_9,p1,cat,cat\n")
    with pytest.raises(OrphanPrediction):
        load_dataset(scores, humans)


def test_set_records(tmp_path):
    path = _write(
        tmp_path / "sets.csv",
        "instance_id,participant_id,set_members,prediction\nimg_1,p1,cat|dog,dog\n",
    )
    (record,) = load_set_records(path, SPACE)
    assert record.set_members == (0, 1)
    assert record.human_prediction == 1


def test_set_record_prediction_must_be_member(tmp_path):
    path = _write(
        tmp_path / "sets.csv",
        "instance_id,participant_id,set_members,prediction\nimg_1,p1,cat|dog,truck\n",
    )
    with pytest.raises(DataError):
        load_set_records(path, SPACE)


def test_split_sizes_and_determinism():
    dataset = random_dataset(n_instances=1200, n_experts=1, n_labels=3, seed=0)
    calibration, test = split_dataset(dataset, 0.1, seed=4)
    assert len(set(calibration.instance_ids)) == 120
    assert len(set(test.instance_ids)) == 1080

    again, _ = split_dataset(dataset, 0.1, seed=4)
    assert again.instance_ids == calibration.instance_ids


def test_split_half_is_disjoint():
    dataset = random_dataset(n_instances=10, n_experts=3, n_labels=3, seed=1)
    calibration, test = split_dataset(dataset, 0.5, seed=0)
    assert len(set(calibration.instance_ids)) == len(set(test.instance_ids)) == 5
    assert not set(calibration.instance_ids) & set(test.instance_ids)


def test_split_rejects_bad_fraction(toy_dataset):
    with pytest.raises(ConfigInvalid):
        split_dataset(toy_dataset, 1.0, seed=0)


def test_three_way_split(toy_dataset):
    calibration, validation, test = split_dataset_three_way(toy_dataset, 0.1, 0.1, seed=2)
    ids = [set(d.instance_ids) for d in (calibration, validation, test)]
    assert [len(s) for s in ids] == [6, 6, 48]
    assert not (ids[0] & ids[1]) and not (ids[1] & ids[2]) and not (ids[0] & ids[2])


def test_write_then_load_keeps_dataset(tmp_path, toy_dataset):
    scores, humans = write_dataset(toy_dataset, tmp_path)
    reloaded = load_dataset(scores, humans)
    assert reloaded == toy_dataset
    assert (reloaded.scores == toy_dataset.scores).all()


def test_scores_are_read_back_exactly(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat,dog,truck\nimg_1,,0.1234567890123456789,0.3,0.5765432109876543\n")
    vector = load_scores(path, SPACE)["img_1"]
    assert vector.scores == (float("0.1234567890123456789"), 0.3, float("0.5765432109876543"))


@pytest.mark.parametrize("noise", ["high", "1.5"])
def test_bad_noise_level_is_a_data_error(tmp_path, noise):
    path = _write(tmp_path / "scores.csv", f"instance_id,noise,cat,dog,truck\nimg_1,{noise},0.2,0.3,0.5\n")
    with pytest.raises(DataError, match="noise"):
        load_scores(path, SPACE)


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(UnreadableFile):
        load_dataset(tmp_path / "nope.csv", tmp_path / "humans.csv")


def test_single_label_header_is_a_data_error(tmp_path):
    path = _write(tmp_path / "scores.csv", "instance_id,noise,cat\nimg_1,,1.0\n")
    with pytest.raises(DataError):
        label_space_from_scores(path)


@pytest.mark.parametrize("seed", [0, 1, 2, 17, 123])
@pytest.mark.parametrize("calib_frac", [0.1, 0.37, 0.5, 0.9])
def test_split_is_a_partition_of_instances(toy_dataset, seed, calib_frac):
    calibration, test = split_dataset(toy_dataset, calib_frac, seed)
    a, b = set(calibration.instance_ids), set(test.instance_ids)
    assert not a & b
    assert a | b == set(toy_dataset.instance_ids)
    assert len(calibration) + len(test) == len(toy_dataset)
    assert len(a) == int(calib_frac * 60 + 0.5)


@pytest.mark.parametrize("seed", [0, 5, 9])
def test_per_instance_accuracy_is_mean_over_its_predictions(tmp_path, seed):
    dataset = load_dataset(*write_dataset(random_dataset(n_instances=20, n_experts=7, n_labels=4, seed=seed), tmp_path))
    for iid, accuracy in dataset.per_instance_accuracy.items():
        rows = [s for s in dataset.samples if s.instance_id == iid]
        assert accuracy == pytest.approx(sum(s.human_prediction == s.true_label for s in rows) / len(rows))
    # splits count instances, not predictions
    calibration, _ = split_dataset(dataset, 0.5, seed)
    assert len(set(calibration.instance_ids)) == 10
    assert len(calibration) == 70
