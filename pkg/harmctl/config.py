# harmctl/config.py

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from harmctl.data.models import Dataset, PredictorKind, WorldConfig
from harmctl.errors import ConfigInvalid, EmptyGrid
from harmctl.services.calibration import ControlMode
from harmctl.services.set_predictors import (
    DEFAULT_LAMBDA_MAX,
    DEFAULT_SAPS_W_GRID,
    PredictorSpec,
    SetValuedPredictor,
)

THRESHOLD_LAMBDA_STEP = 0.001
SAPS_LAMBDA_STEP = 0.00625


class Settings(BaseSettings):
    """
    Loads HARMCTL_* environment variables, and a .env file when present.
    """
    SEED: int = 0
    JOBS: int = -1
    LOG_LEVEL: str = "WARNING"

    model_config = SettingsConfigDict(env_prefix="HARMCTL_", env_file=".env", extra="ignore")


class RunConfig(BaseModel):
    """
    Every parameter of a run as flat keys. Serialized verbatim into
    report.json, so two runs with equal configs give equal outputs.
    """
    model_config = ConfigDict(extra="forbid")

    # Predictor
    predictor: PredictorKind = PredictorKind.THRESHOLD
    saps_w: Optional[float] = Field(default=None, gt=0)
    saps_w_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_SAPS_W_GRID))
    saps_reference_lambda: float = Field(default=1.0, ge=0)
    lambda_max: float = Field(default=DEFAULT_LAMBDA_MAX, ge=1)

    # Lambda grid; stop defaults to the predictor's domain end
    lambda_start: float = Field(default=0.0, ge=0)
    lambda_stop: Optional[float] = None
    lambda_step: Optional[float] = None

    # Calibration
    alpha: float = Field(default=0.05, gt=0, le=1)
    mode: ControlMode = ControlMode.COUNTERFACTUAL
    alpha_prime_policy: Literal["fixed", "auto", "pooled"] = "pooled"
    alpha_prime: Optional[float] = Field(default=None, gt=0, lt=1)
    alpha_prime_step: float = Field(default=0.001, gt=0)

    # Repetitions and splits
    calib_frac: float = Field(default=0.1, gt=0, lt=1)
    validation_frac: float = Field(default=0.1, gt=0, lt=1)
    calib_fracs: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    repetitions: int = Field(default=50, ge=1)
    seed: Optional[int] = None
    jobs: Optional[int] = None

    # Data
    scores_path: Optional[Path] = None
    humans_path: Optional[Path] = None
    set_records_path: Optional[Path] = None
    noise_filter: Optional[int] = None
    strict: bool = False

    # Expert model
    difficulty_cuts: List[float] = Field(default_factory=lambda: [0.5])
    mnl_epsilon: float = Field(default=1e-6, ge=0)
    lam: Optional[float] = Field(default=None, ge=0)

    # Synthetic world
    world: Optional[WorldConfig] = None
    n_calib: int = Field(default=500, ge=1)
    n_test: int = Field(default=2000, ge=1)

    # Monotonicity verification
    min_cell_count: int = Field(default=5, ge=1)
    monotonicity_cuts: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])

    output_dir: Optional[Path] = None

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.alpha_prime_policy == "fixed" and self.alpha_prime is None:
            raise ValueError("alpha_prime_policy 'fixed' needs alpha_prime")
        if self.alpha_prime is not None and self.alpha_prime >= self.alpha:
            raise ValueError("alpha_prime must be smaller than alpha")
        if self.predictor is PredictorKind.SAPS and self.calib_frac + self.validation_frac >= 1:
            raise ValueError("calib_frac + validation_frac must stay below 1")
        return self

    @property
    def domain_max(self) -> float:
        return 1.0 if self.predictor is PredictorKind.THRESHOLD else self.lambda_max

    def predictor_spec(self) -> PredictorSpec:
        return PredictorSpec(
            kind=self.predictor,
            saps_w=self.saps_w,
            saps_w_grid=tuple(self.saps_w_grid),
            saps_reference_lambda=self.saps_reference_lambda,
            lambda_max=self.lambda_max,
            seed=self.seed or 0,
        )

    def fixed_alpha_prime(self) -> Optional[float]:
        return self.alpha_prime if self.alpha_prime_policy == "fixed" else None

    def lambda_grid(self) -> np.ndarray:
        """Sorted grid from lambda_start to lambda_stop, both included."""
        stop = self.domain_max if self.lambda_stop is None else self.lambda_stop
        step = self.lambda_step
        if step is None:
            step = THRESHOLD_LAMBDA_STEP if self.predictor is PredictorKind.THRESHOLD else SAPS_LAMBDA_STEP
        if step <= 0 or stop < self.lambda_start:
            raise EmptyGrid(f"lambda grid [{self.lambda_start}, {stop}] with step {step} is empty")
        if stop > self.domain_max:
            raise ConfigInvalid(f"lambda_stop={stop} exceeds the domain end {self.domain_max}")
        count = int(math.floor((stop - self.lambda_start) / step + 1e-9)) + 1
        grid = np.round(self.lambda_start + step * np.arange(count), 12)
        grid[-1] = min(grid[-1], stop)
        return grid


def build_predictor(config: RunConfig, validation: Optional[Dataset] = None) -> SetValuedPredictor:
    return config.predictor_spec().build(validation)


def _validation_details(err: ValidationError) -> List[Dict[str, Any]]:
    return [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]} for e in err.errors()]


def load_run_config(
    config_path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
    settings: Optional[Settings] = None,
) -> Tuple[RunConfig, Settings]:
    """
    Resolves a RunConfig from, in increasing precedence: defaults, the
    environment (seed and jobs), a JSON file and explicit overrides.
    Any problem surfaces as ConfigInvalid before computation starts.
    """
    try:
        settings = settings or Settings()
    except ValidationError as e:
        raise ConfigInvalid("invalid HARMCTL_* environment", errors=_validation_details(e))

    values: Dict[str, Any] = {"seed": settings.SEED, "jobs": settings.JOBS}
    if config_path is not None:
        try:
            from_file = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigInvalid(f"cannot read config file {config_path}: {e}")
        if not isinstance(from_file, dict):
            raise ConfigInvalid("config file must hold a JSON object")
        values.update(from_file)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    world_overrides = values.pop("world_overrides", None)
    if world_overrides is not None:
        values["world"] = {**(values.get("world") or {}), **world_overrides}

    try:
        return RunConfig.model_validate(values), settings
    except ValidationError as e:
        raise ConfigInvalid("invalid run configuration", errors=_validation_details(e))
