# harmctl/services/scm_oracle.py

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict

from harmctl.data.loaders import write_dataset
from harmctl.data.models import Dataset, LabelSpace, Regime, Sample, SetPredictionRecord, WorldConfig
from harmctl.errors import InvalidProfile
from harmctl.services.calibration import (
    ControlMode,
    control_counterfactual,
    control_interventional,
    select_alpha_prime_pooled,
)
from harmctl.services.harm_risk import curves_from_arrays
from harmctl.services.set_predictors import SetValuedPredictor, ThresholdPredictor

logger = logging.getLogger(__name__)

GOLDEN_ROTATION = (math.sqrt(5.0) - 1.0) / 2.0


class SyntheticWorld(BaseModel):
    """
    A fully known SCM: classifier scores and labels for every instance, and
    the frozen exogenous noise of every (instance, expert) pair. Expert e
    succeeds on instance i under a set of size k containing y iff
    (u[i, e] - offsets[k-1]) mod 1 < q(k) * multiplier[e]; a singleton
    set holding y is always a success.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    config: WorldConfig
    scores: np.ndarray
    true_labels: np.ndarray
    u: np.ndarray
    wrong_draw: np.ndarray
    profile: np.ndarray
    offsets: np.ndarray
    multipliers: np.ndarray

    @property
    def n_instances(self) -> int:
        return self.scores.shape[0]

    @property
    def n_experts(self) -> int:
        return self.u.shape[1]

    @property
    def n_labels(self) -> int:
        return self.scores.shape[1]

    @property
    def regime(self) -> Regime:
        return self.config.regime

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace.numbered(self.n_labels)

    @property
    def instance_ids(self) -> List[str]:
        return [f"w{i}" for i in range(self.n_instances)]

    @property
    def expert_ids(self) -> List[str]:
        return [f"e{e}" for e in range(self.n_experts)]


class CoverageStats(BaseModel):
    mode: ControlMode
    regime: Regime
    alpha: float
    alpha_prime: Optional[float] = None
    repetitions: int
    n_calib: int
    n_test: int
    mean_harm: float
    harm_se: Optional[float] = None
    violation_rate: float
    mean_lower: float
    mean_population_harm: float
    population_harm_se: Optional[float] = None
    mean_benefit_loss: Optional[float] = None
    benefit_loss_se: Optional[float] = None
    feasible_rate: Optional[float] = None
    interval_violation_rate: Optional[float] = None
    sandwich: Optional[List[Dict[str, float]]] = None


def _open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    return rng.integers(1, 2**53, size=size) / 2**53


def _validated_profile(config: WorldConfig) -> np.ndarray:
    q = np.asarray(config.profile(), dtype=float)
    if len(q) != config.n_labels:
        raise InvalidProfile(f"success profile has {len(q)} entries, expected {config.n_labels}")
    if np.any(q < 0) or np.any(q > 1):
        raise InvalidProfile("success probabilities must lie in [0, 1]")
    if np.any(np.diff(q) > 0):
        raise InvalidProfile("success profile must be nonincreasing in the set size")
    return q


def _offsets(config: WorldConfig) -> np.ndarray:
    L = config.n_labels
    if config.regime is Regime.COUNTERFACTUAL_MONOTONE:
        return np.zeros(L)
    if config.offsets is not None:
        offsets = np.asarray(config.offsets, dtype=float)
        if len(offsets) != L or np.any(offsets < 0) or np.any(offsets >= 1):
            raise InvalidProfile(f"offsets need {L} values in [0, 1)")
        return offsets
    return np.mod(np.arange(L) * GOLDEN_ROTATION, 1.0)


def generate_world(config: WorldConfig) -> SyntheticWorld:
    q = _validated_profile(config)
    offsets = _offsets(config)
    rng = np.random.default_rng(config.seed)
    N, L, E = config.n_instances, config.n_labels, config.n_experts

    if config.score_model == "dirichlet":
        shape = np.full((N, L), config.concentration)
        shape[np.arange(N), rng.integers(L, size=N)] += config.peak
        draws = rng.gamma(shape)
        scores = draws / draws.sum(axis=1, keepdims=True)
    else:
        table = np.asarray(config.tabulated_scores, dtype=float)
        if table.ndim != 2 or table.shape[1] != L:
            raise InvalidProfile(f"tabulated scores need {L} columns")
        scores = table[rng.integers(len(table), size=N)]

    cumulative = np.cumsum(scores, axis=1)
    pick = rng.random(N)[:, None] * cumulative[:, -1:]
    true_labels = np.minimum((cumulative <= pick).sum(axis=1), L - 1)

    u = _open_uniform(rng, (N, E))
    wrong_draw = rng.random((N, E))
    if config.expert_skill_spread > 0:
        multipliers = 1.0 - config.expert_skill_spread * rng.random(E)
    else:
        multipliers = np.ones(E)

    logger.info(
        f"--- SCM Oracle: Generated {config.regime.value} world with {N} instances, "
        f"{E} experts and {L} labels (seed {config.seed}) ---"
    )
    return SyntheticWorld(
        config=config,
        scores=scores,
        true_labels=true_labels,
        u=u,
        wrong_draw=wrong_draw,
        profile=q,
        offsets=offsets,
        multipliers=multipliers,
    )


def world_critical(world: SyntheticWorld, predictor: SetValuedPredictor) -> np.ndarray:
    return predictor.critical_matrix(world.scores, world.instance_ids)


def _success(
    world: SyntheticWorld,
    critical_rows: np.ndarray,
    instances: np.ndarray,
    experts: np.ndarray,
    lam: float,
) -> np.ndarray:
    """
    Success indicator of each (instance, expert) pair under C_lam.
    critical_rows holds the critical thresholds of `instances`, with one
    trailing label axis; instance and expert indices broadcast.
    """
    in_set = critical_rows <= lam
    k = in_set.sum(axis=-1)
    y = world.true_labels[instances]
    covered = np.take_along_axis(in_set, y[..., None], axis=-1)[..., 0]
    q = world.profile[k - 1] * world.multipliers[experts]
    hit = np.mod(world.u[instances, experts] - world.offsets[k - 1], 1.0) < q
    return covered & ((k == 1) | hit)


def _all_pairs(world: SyntheticWorld) -> Tuple[np.ndarray, np.ndarray]:
    return np.arange(world.n_instances)[:, None], np.arange(world.n_experts)[None, :]


def alone_success(world: SyntheticWorld) -> np.ndarray:
    """Success of every (instance, expert) pair on their own, i.e. with all labels shown."""
    instances, experts = _all_pairs(world)
    full = np.zeros((world.n_instances, 1, world.n_labels))
    return _success(world, full, instances, experts, 0.0)


def _wrong_label(world: SyntheticWorld, instance: int, expert: int, members: Sequence[int]) -> int:
    wrong = [m for m in members if m != world.true_labels[instance]]
    return int(wrong[int(world.wrong_draw[instance, expert] * len(wrong))])


def counterfactual_predict(
    world: SyntheticWorld,
    instance: int,
    expert: int,
    lam: float,
    predictor: SetValuedPredictor,
) -> int:
    """The expert's prediction had C_lam been shown, under the frozen noise of the pair."""
    predictor.check_lambda(lam)
    iid = world.instance_ids[instance]
    critical = predictor.critical_matrix(world.scores[instance:instance + 1], [iid])
    hit = _success(world, critical, np.array([instance]), np.array([expert]), lam)
    if hit[0]:
        return int(world.true_labels[instance])
    members = predictor.prediction_set(world.scores[instance], lam, iid).members
    return _wrong_label(world, instance, expert, members)


def alone_predictions(world: SyntheticWorld) -> np.ndarray:
    """Human-alone predictions: y on success, else a frozen wrong label in rank order."""
    success = alone_success(world)
    order = np.argsort(-world.scores, axis=1, kind="stable")
    predictions = np.repeat(world.true_labels[:, None], world.n_experts, axis=1)
    for i, e in zip(*np.nonzero(~success)):
        predictions[i, e] = _wrong_label(world, int(i), int(e), order[i])
    return predictions


def true_harm(
    world: SyntheticWorld,
    lam: float,
    predictor: SetValuedPredictor,
    critical: Optional[np.ndarray] = None,
) -> float:
    """Mean over all pairs of max(0, success alone - success under C_lam), frozen noise."""
    critical = world_critical(world, predictor) if critical is None else critical
    instances, experts = _all_pairs(world)
    harmed = alone_success(world) & ~_success(world, critical[instances], instances, experts, lam)
    return float(harmed.mean())


def plug_in_harm(
    world: SyntheticWorld,
    lam: float,
    predictor: SetValuedPredictor,
    critical: Optional[np.ndarray] = None,
) -> float:
    """Mean of 1{alone correct and y not in C_lam}: the counterfactual-monotone identity."""
    critical = world_critical(world, predictor) if critical is None else critical
    covered = critical[np.arange(world.n_instances), world.true_labels] <= lam
    return float((alone_success(world) & ~covered[:, None]).mean())


def _arc_overlap(start_a, length_a, start_b, length_b) -> np.ndarray:
    """Length of the intersection of two arcs [start, start + length) on the unit circle."""
    def segments(start, length):
        end = start + length
        return ((start, np.minimum(end, 1.0)), (np.zeros_like(start), np.maximum(end - 1.0, 0.0)))

    total = 0.0
    for lo_a, hi_a in segments(start_a, length_a):
        for lo_b, hi_b in segments(start_b, length_b):
            total = total + np.maximum(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0)
    return total


def _population_terms(
    world: SyntheticWorld,
    lam: float,
    critical: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact expectations over U ~ Uniform(0, 1) for every (instance, expert):
    P(alone correct, y not covered), P(alone correct, fails under C_lam, y covered)
    and P(alone wrong, y covered).
    """
    L = world.n_labels
    in_set = critical <= lam
    k = in_set.sum(axis=1)[:, None]
    covered = in_set[np.arange(world.n_instances), world.true_labels][:, None]
    m = world.multipliers[None, :]
    p_alone = np.broadcast_to(world.profile[L - 1] * m, (world.n_instances, world.n_experts))

    p_set = world.profile[k - 1] * m
    overlap = _arc_overlap(
        np.broadcast_to(world.offsets[L - 1], p_alone.shape), p_alone,
        np.broadcast_to(world.offsets[k - 1], p_alone.shape), np.broadcast_to(p_set, p_alone.shape),
    )
    fail_given_covered = np.where(k == 1, 0.0, np.maximum(p_alone - overlap, 0.0))

    uncovered_harm = np.where(covered, 0.0, p_alone)
    covered_harm = np.where(covered, fail_given_covered, 0.0)
    covered_wrong = np.where(covered, 1.0 - p_alone, 0.0)
    return uncovered_harm, covered_harm, covered_wrong


def population_harm(
    world: SyntheticWorld,
    lam: float,
    predictor: SetValuedPredictor,
    critical: Optional[np.ndarray] = None,
) -> float:
    """Counterfactual harm at lam with the expert noise integrated out exactly."""
    critical = world_critical(world, predictor) if critical is None else critical
    uncovered_harm, covered_harm, _ = _population_terms(world, lam, critical)
    return float((uncovered_harm + covered_harm).mean())


def population_bounds(
    world: SyntheticWorld,
    lam: float,
    predictor: SetValuedPredictor,
    critical: Optional[np.ndarray] = None,
) -> Tuple[float, float]:
    """Population version of the interventional-monotonicity bounds."""
    critical = world_critical(world, predictor) if critical is None else critical
    uncovered_harm, _, covered_wrong = _population_terms(world, lam, critical)
    lower = float(uncovered_harm.mean())
    return lower, lower + float(covered_wrong.mean())


def sandwich_table(
    world: SyntheticWorld,
    predictor: SetValuedPredictor,
    grid: Sequence[float],
) -> List[Dict[str, float]]:
    critical = world_critical(world, predictor)
    rows = []
    for lam in grid:
        lower, upper = population_bounds(world, float(lam), predictor, critical)
        harm = population_harm(world, float(lam), predictor, critical)
        rows.append({
            "lambda": float(lam),
            "lower": lower,
            "true_harm": harm,
            "upper": upper,
            "lower_slack": harm - lower,
            "upper_slack": upper - harm,
        })
    return rows


def _repetition(
    world: SyntheticWorld,
    predictor: SetValuedPredictor,
    critical: np.ndarray,
    alone: np.ndarray,
    mode: ControlMode,
    alpha: float,
    alpha_prime: Optional[float],
    alpha_prime_step: float,
    n_calib: int,
    n_test: int,
    repetition: int,
    grid: np.ndarray,
    grid_harm: np.ndarray,
) -> Dict[str, Any]:
    rng = np.random.default_rng([world.config.seed, repetition])
    N, E = world.n_instances, world.n_experts
    critical_true = critical[np.arange(N), world.true_labels]

    ci, ce = rng.integers(N, size=n_calib), rng.integers(E, size=n_calib)
    harm, benefit = curves_from_arrays(critical_true[ci], alone[ci, ce], predictor.domain_max)

    ti, te = rng.integers(N, size=n_test), rng.integers(E, size=n_test)
    if mode is ControlMode.COUNTERFACTUAL:
        result = control_counterfactual(harm, alpha)
    else:
        chosen = alpha_prime if alpha_prime is not None else select_alpha_prime_pooled(
            [(harm, benefit)], alpha, alpha_prime_step
        )
        result = control_interventional(harm, benefit, alpha, chosen)

    out: Dict[str, Any] = {"lower": result.lower, "feasible": result.feasible, "alpha_prime": result.alpha_prime}
    test_harm = alone[ti, te] & ~_success(world, critical[ti], ti, te, result.lower)
    out["harm"] = float(test_harm.mean())
    out["population_harm"] = population_harm(world, result.lower, predictor, critical)

    if mode is ControlMode.INTERVENTIONAL:
        members = result.contains(grid)
        out["interval_violation"] = bool(np.any(grid_harm[members] > alpha + 1e-12))
        if result.upper_inclusive or result.upper > 0:
            at_end = critical_true[ti] <= result.upper if result.upper_inclusive else critical_true[ti] < result.upper
            out["benefit_loss"] = float((~alone[ti, te] & at_end).mean())
    return out


def _standard_error(values: np.ndarray) -> Optional[float]:
    if len(values) < 2:
        return None
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def coverage_trial(
    config: WorldConfig,
    alpha: float,
    n_calib: int,
    n_test: int,
    repetitions: int,
    predictor: Optional[SetValuedPredictor] = None,
    mode: ControlMode = ControlMode.COUNTERFACTUAL,
    alpha_prime: Optional[float] = None,
    alpha_prime_step: float = 0.001,
    grid_step: float = 0.01,
    jobs: int = 1,
) -> CoverageStats:
    """
    Repeatedly draws calibration and test pairs from one world, certifies
    lambda on the calibration draw and measures the harm it causes on
    the test draw. Repetition r uses the seed (world seed, r).
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    predictor = predictor or ThresholdPredictor()
    world = generate_world(config)
    critical = world_critical(world, predictor)
    alone = alone_success(world)

    count = int(math.floor(predictor.domain_max / grid_step + 1e-9)) + 1
    grid = np.round(np.arange(count) * grid_step, 12)
    grid[-1] = min(grid[-1], predictor.domain_max)
    grid_harm = np.array([population_harm(world, float(lam), predictor, critical) for lam in grid])

    logger.info(f"--- SCM Oracle: Running {repetitions} {mode.value} repetitions at alpha={alpha} ---")
    runs = Parallel(n_jobs=jobs)(
        delayed(_repetition)(
            world, predictor, critical, alone, mode, alpha, alpha_prime, alpha_prime_step,
            n_calib, n_test, r, grid, grid_harm,
        )
        for r in range(repetitions)
    )

    harms = np.array([r["harm"] for r in runs])
    population = np.array([r["population_harm"] for r in runs])
    stats = CoverageStats(
        mode=mode,
        regime=world.regime,
        alpha=alpha,
        alpha_prime=alpha_prime,
        repetitions=repetitions,
        n_calib=n_calib,
        n_test=n_test,
        mean_harm=float(harms.mean()),
        harm_se=_standard_error(harms),
        violation_rate=float((harms > alpha).mean()),
        mean_lower=float(np.mean([r["lower"] for r in runs])),
        mean_population_harm=float(population.mean()),
        population_harm_se=_standard_error(population),
    )
    if mode is ControlMode.INTERVENTIONAL:
        losses = np.array([r["benefit_loss"] for r in runs if "benefit_loss" in r])
        stats = stats.model_copy(update={
            "mean_benefit_loss": float(losses.mean()) if losses.size else None,
            "benefit_loss_se": _standard_error(losses) if losses.size else None,
            "feasible_rate": float(np.mean([r["feasible"] for r in runs])),
            "interval_violation_rate": float(np.mean([r["interval_violation"] for r in runs])),
        })
    if world.regime is Regime.INTERVENTIONAL_ONLY:
        stats = stats.model_copy(update={"sandwich": sandwich_table(world, predictor, grid)})
    return stats


def world_to_dataset(world: SyntheticWorld) -> Dataset:
    """Every (instance, expert) pair as a human-alone prediction sample."""
    predictions = alone_predictions(world)
    ids, experts = world.instance_ids, world.expert_ids
    samples = tuple(
        Sample(
            instance_id=ids[i],
            scores=tuple(world.scores[i].tolist()),
            true_label=int(world.true_labels[i]),
            human_prediction=int(predictions[i, e]),
            participant_id=experts[e],
        )
        for i in range(world.n_instances)
        for e in range(world.n_experts)
    )
    correct = predictions == world.true_labels[:, None]
    return Dataset(
        label_space=world.label_space,
        samples=samples,
        per_instance_accuracy={ids[i]: float(correct[i].mean()) for i in range(world.n_instances)},
    )


def simulate_set_records(
    world: SyntheticWorld,
    predictor: SetValuedPredictor,
    rng: np.random.Generator,
    grid: Optional[Sequence[float]] = None,
) -> List[SetPredictionRecord]:
    """
    One record per (instance, expert): a lambda drawn from the grid (or
    uniformly on the domain), the set it yields, and the expert's
    prediction under that set with the frozen noise.
    """
    critical = world_critical(world, predictor)
    ids, experts = world.instance_ids, world.expert_ids
    records = []
    for i in range(world.n_instances):
        order = np.argsort(critical[i], kind="stable")
        for e in range(world.n_experts):
            lam = float(rng.choice(grid)) if grid is not None else float(rng.uniform(0.0, predictor.domain_max))
            members = [int(j) for j in order if critical[i, j] <= lam]
            hit = _success(world, critical[[i]], np.array([i]), np.array([e]), lam)[0]
            prediction = int(world.true_labels[i]) if hit else _wrong_label(world, i, e, members)
            records.append(
                SetPredictionRecord(
                    instance_id=ids[i],
                    participant_id=experts[e],
                    set_members=tuple(members),
                    human_prediction=prediction,
                )
            )
    return records


def dump_world(world: SyntheticWorld, directory: Path) -> Path:
    """Scores and human-alone predictions in the ingestion schemas, plus the frozen noise."""
    directory = Path(directory)
    write_dataset(world_to_dataset(world), directory)

    rows = [
        {"instance_id": iid, "participant_id": eid, "u": world.u[i, e], "wrong_draw": world.wrong_draw[i, e]}
        for i, iid in enumerate(world.instance_ids)
        for e, eid in enumerate(world.expert_ids)
    ]
    pd.DataFrame(rows).to_csv(directory / "noise.csv", index=False)
    meta = {
        "config": world.config.model_dump(mode="json"),
        "profile": world.profile.tolist(),
        "offsets": world.offsets.tolist(),
        "multipliers": world.multipliers.tolist(),
    }
    (directory / "world.json").write_text(json.dumps(meta, indent=2))
    logger.info(f"--- SCM Oracle: Dumped world to {directory} ---")
    return directory


def load_world(directory: Path) -> SyntheticWorld:
    directory = Path(directory)
    meta = json.loads((directory / "world.json").read_text())
    config = WorldConfig.model_validate(meta["config"])

    scores = pd.read_csv(
        directory / "scores.csv", dtype={"instance_id": str}, float_precision="round_trip"
    ).set_index("instance_id")
    humans = pd.read_csv(directory / "humans.csv", dtype=str)
    noise = pd.read_csv(
        directory / "noise.csv", dtype={"instance_id": str, "participant_id": str}, float_precision="round_trip"
    )

    labels = [c for c in scores.columns if c != "noise"]
    ids = [f"w{i}" for i in range(config.n_instances)]
    experts = [f"e{e}" for e in range(config.n_experts)]
    label_index = {name: j for j, name in enumerate(labels)}
    truth = humans.drop_duplicates("instance_id").set_index("instance_id")["true_label"]

    u = noise.pivot(index="instance_id", columns="participant_id", values="u").loc[ids, experts]
    wrong = noise.pivot(index="instance_id", columns="participant_id", values="wrong_draw").loc[ids, experts]
    return SyntheticWorld(
        config=config,
        scores=scores.loc[ids, labels].to_numpy(dtype=float),
        true_labels=np.asarray([label_index[truth[i]] for i in ids], dtype=int),
        u=u.to_numpy(dtype=float),
        wrong_draw=wrong.to_numpy(dtype=float),
        profile=np.asarray(meta["profile"], dtype=float),
        offsets=np.asarray(meta["offsets"], dtype=float),
        multipliers=np.asarray(meta["multipliers"], dtype=float),
    )
