# harmctl/data/loaders.py

import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from harmctl.data.models import (
    Dataset,
    HumanPrediction,
    LabelSpace,
    Sample,
    ScoreVector,
    SetPredictionRecord,
)
from harmctl.errors import (
    ConfigInvalid,
    ConflictingLabel,
    DataError,
    DuplicateInstance,
    EmptyDataset,
    MissingColumn,
    OrphanPrediction,
    ScoreOutOfRange,
    UnreadableFile,
)

logger = logging.getLogger(__name__)

SCORE_ID_COLUMNS = ("instance_id", "noise")
HUMANS_COLUMNS = ("instance_id", "participant_id", "true_label", "prediction")
SET_RECORD_COLUMNS = ("instance_id", "participant_id", "set_members", "prediction")

# Scores this close outside [0, 1] are rounding artifacts and get clamped.
CLAMP_TOLERANCE = 1e-9
SET_SEPARATOR = "|"


def _read_csv(path: Path, required: Iterable[str], **kwargs) -> pd.DataFrame:
    """Reads a CSV as text so every conversion error can name its row."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, **kwargs)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise UnreadableFile(str(path), str(e)) from None
    for column in required:
        if column not in frame.columns:
            raise MissingColumn(column, str(path))
    return frame


def label_space_from_scores(path: Path) -> LabelSpace:
    """Label names are the scores header minus the id columns, in file order."""
    header = _read_csv(path, SCORE_ID_COLUMNS, nrows=0).columns.tolist()
    try:
        return LabelSpace(labels=tuple(c for c in header if c not in SCORE_ID_COLUMNS))
    except ValidationError as e:
        raise DataError(f"invalid label columns in {path}", path=str(path), reason=str(e)) from None


def _parse_noise(raw: str, row: int) -> Optional[int]:
    raw = raw.strip()
    if not raw:
        return None
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"row {row}: noise level '{raw}' is not a number", row=row) from None
    if not value.is_integer():
        raise DataError(f"row {row}: noise level '{raw}' is not an integer", row=row)
    return int(value)


def _parse_score(raw: str) -> float:
    # float() reads the shortest repr back exactly; pandas' fast parser may not
    try:
        return float(raw)
    except ValueError:
        return math.nan


def load_scores(
    path: Path,
    label_space: LabelSpace,
    strict: bool = False,
    sum_tolerance: float = 1e-3,
) -> Dict[str, ScoreVector]:
    """
    Reads the scores CSV (`instance_id,noise,<label_1>,...,<label_L>`).
    Scores are kept as given, never renormalized.
    """
    path = Path(path)
    frame = _read_csv(path, (*SCORE_ID_COLUMNS, *label_space.labels))
    logger.info(f"--- Loaders: Reading {len(frame)} score rows from {path} ---")

    values = np.array(
        [[_parse_score(raw) for raw in row] for row in frame[list(label_space.labels)].itertuples(index=False)],
        dtype=float,
    ).reshape(len(frame), label_space.size)
    result: Dict[str, ScoreVector] = {}
    for row, instance_id in enumerate(frame["instance_id"]):
        scores = values[row]
        if np.isnan(scores).any():
            raise ScoreOutOfRange(row + 1, "non-numeric score")
        low, high = scores.min(), scores.max()
        if low < -CLAMP_TOLERANCE or high > 1.0 + CLAMP_TOLERANCE:
            raise ScoreOutOfRange(row + 1, f"score outside [0, 1] (min={low}, max={high})")
        scores = np.clip(scores, 0.0, 1.0)
        if strict and abs(scores.sum() - 1.0) > sum_tolerance:
            raise ScoreOutOfRange(row + 1, f"scores sum to {scores.sum():.6f}, expected 1 ± {sum_tolerance}")
        if instance_id in result:
            raise DuplicateInstance(instance_id)
        result[instance_id] = ScoreVector(
            scores=tuple(float(s) for s in scores),
            noise=_parse_noise(frame["noise"].iat[row], row + 1),
        )
    return result


def load_human_predictions(path: Path, label_space: LabelSpace) -> List[HumanPrediction]:
    """Reads the humans CSV (`instance_id,participant_id,true_label,prediction`)."""
    path = Path(path)
    frame = _read_csv(path, HUMANS_COLUMNS)
    logger.info(f"--- Loaders: Reading {len(frame)} human predictions from {path} ---")
    return [
        HumanPrediction(
            instance_id=rec.instance_id,
            participant_id=rec.participant_id,
            true_label=label_space.index(rec.true_label, row + 1),
            prediction=label_space.index(rec.prediction, row + 1),
        )
        for row, rec in enumerate(frame.itertuples(index=False))
    ]


def load_set_records(path: Path, label_space: LabelSpace) -> List[SetPredictionRecord]:
    """Reads predictions made under prediction sets; members are pipe-separated names."""
    path = Path(path)
    frame = _read_csv(path, SET_RECORD_COLUMNS)
    logger.info(f"--- Loaders: Reading {len(frame)} set-prediction records from {path} ---")
    records = []
    for row, rec in enumerate(frame.itertuples(index=False)):
        members = tuple(
            label_space.index(name.strip(), row + 1)
            for name in rec.set_members.split(SET_SEPARATOR)
            if name.strip()
        )
        try:
            records.append(
                SetPredictionRecord(
                    instance_id=rec.instance_id,
                    participant_id=rec.participant_id,
                    set_members=members,
                    human_prediction=label_space.index(rec.prediction, row + 1),
                )
            )
        except ValidationError as e:
            raise DataError(f"row {row + 1}: invalid set record", row=row + 1, reason=str(e)) from None
    return records


def true_labels_from(predictions: Iterable[HumanPrediction]) -> Dict[str, int]:
    labels: Dict[str, int] = {}
    for p in predictions:
        known = labels.setdefault(p.instance_id, p.true_label)
        if known != p.true_label:
            raise ConflictingLabel(p.instance_id)
    return labels


def join_dataset(
    label_space: LabelSpace,
    scores: Mapping[str, ScoreVector],
    predictions: Sequence[HumanPrediction],
    true_labels: Mapping[str, int],
    noise_filter: Optional[int] = None,
) -> Dataset:
    """
    Attaches scores and ground truth to every human prediction.
    Per-instance accuracy is the unweighted mean correctness over all
    predictions of the instance (not averaged per participant first).
    """
    samples: List[Sample] = []
    hits: Dict[str, List[int]] = defaultdict(list)
    for p in predictions:
        if p.instance_id not in scores or p.instance_id not in true_labels:
            raise OrphanPrediction(p.instance_id)
        vector = scores[p.instance_id]
        if noise_filter is not None and vector.noise != noise_filter:
            continue
        y = true_labels[p.instance_id]
        samples.append(
            Sample(
                instance_id=p.instance_id,
                noise=vector.noise,
                scores=vector.scores,
                true_label=y,
                human_prediction=p.prediction,
                participant_id=p.participant_id,
            )
        )
        hits[p.instance_id].append(int(p.prediction == y))

    logger.info(f"--- Loaders: Joined {len(samples)} samples over {len(hits)} instances ---")
    return Dataset(
        label_space=label_space,
        samples=tuple(samples),
        per_instance_accuracy={k: sum(v) / len(v) for k, v in hits.items()},
    )


def load_dataset(
    scores_path: Path,
    humans_path: Path,
    noise_filter: Optional[int] = None,
    strict: bool = False,
) -> Dataset:
    label_space = label_space_from_scores(scores_path)
    scores = load_scores(scores_path, label_space, strict=strict)
    predictions = load_human_predictions(humans_path, label_space)
    return join_dataset(label_space, scores, predictions, true_labels_from(predictions), noise_filter)


def _split_counts(n_instances: int, fractions: Sequence[float]) -> List[int]:
    # Round half up; Python's round() is banker's rounding.
    return [int(math.floor(f * n_instances + 0.5)) for f in fractions]


def _shuffled_instances(dataset: Dataset, seed: int) -> List[str]:
    """
    Unique instance ids sorted lexicographically, then permuted with
    numpy's PCG64 seeded by `seed`. Sorting first makes the result
    independent of row order in the input files.
    """
    ids = sorted(dataset.unique_instances)
    rng = np.random.Generator(np.random.PCG64(seed))
    return [ids[i] for i in rng.permutation(len(ids))]


def split_dataset(dataset: Dataset, calib_frac: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Splits by instance, so all predictions on one instance land on the same side."""
    if len(dataset) == 0:
        raise EmptyDataset()
    if not 0.0 < calib_frac < 1.0:
        raise ConfigInvalid(f"calib_frac must lie in (0, 1), got {calib_frac}")

    ids = _shuffled_instances(dataset, seed)
    (n_calib,) = _split_counts(len(ids), [calib_frac])
    if n_calib == 0 or n_calib == len(ids):
        raise EmptyDataset(f"calib_frac={calib_frac} leaves one side of a {len(ids)}-instance split empty")
    return dataset.restrict(ids[:n_calib]), dataset.restrict(ids[n_calib:])


def split_dataset_three_way(
    dataset: Dataset,
    calib_frac: float,
    validation_frac: float,
    seed: int,
) -> Tuple[Dataset, Dataset, Dataset]:
    """Calibration / validation / test split used when a predictor has a tuned hyperparameter."""
    if len(dataset) == 0:
        raise EmptyDataset()
    if calib_frac <= 0 or validation_frac <= 0 or calib_frac + validation_frac >= 1:
        raise ConfigInvalid(
            f"calib_frac={calib_frac} and validation_frac={validation_frac} must be positive and sum below 1"
        )

    ids = _shuffled_instances(dataset, seed)
    n_calib, n_val = _split_counts(len(ids), [calib_frac, validation_frac])
    if n_calib == 0 or n_val == 0 or n_calib + n_val >= len(ids):
        raise EmptyDataset(f"{len(ids)} instances are too few for a three-way split")
    return (
        dataset.restrict(ids[:n_calib]),
        dataset.restrict(ids[n_calib:n_calib + n_val]),
        dataset.restrict(ids[n_calib + n_val:]),
    )


def write_dataset(dataset: Dataset, directory: Path) -> Tuple[Path, Path]:
    """Writes a dataset back to the scores and humans schemas."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = dataset.label_space.labels

    score_rows = []
    for row in dataset.first_rows:
        s = dataset.samples[int(row)]
        score_rows.append(
            {"instance_id": s.instance_id, "noise": "" if s.noise is None else s.noise, **dict(zip(names, s.scores))}
        )
    scores_path = directory / "scores.csv"
    pd.DataFrame(score_rows, columns=[*SCORE_ID_COLUMNS, *names]).to_csv(scores_path, index=False)

    human_rows = [
        {
            "instance_id": s.instance_id,
            "participant_id": s.participant_id or "",
            "true_label": names[s.true_label],
            "prediction": names[s.human_prediction],
        }
        for s in dataset.samples
    ]
    humans_path = directory / "humans.csv"
    pd.DataFrame(human_rows, columns=list(HUMANS_COLUMNS)).to_csv(humans_path, index=False)

    logger.info(f"--- Loaders: Wrote {len(score_rows)} instances and {len(human_rows)} predictions to {directory} ---")
    return scores_path, humans_path


def write_set_records(records: Sequence[SetPredictionRecord], label_space: LabelSpace, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "instance_id": r.instance_id,
            "participant_id": r.participant_id,
            "set_members": SET_SEPARATOR.join(label_space.name(m) for m in r.set_members),
            "prediction": label_space.name(r.human_prediction),
        }
        for r in records
    ]
    pd.DataFrame(rows, columns=list(SET_RECORD_COLUMNS)).to_csv(path, index=False)
    return path
