# harmctl/services/report_service.py

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from harmctl import __version__
from harmctl.services.experiments import TradeoffReport
from harmctl.services.monotonicity import VerificationReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        return None if not np.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def to_json(payload: Any) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True)


class ReportService:
    """
    Writes the machine-readable outputs of a run into one directory.
    Every file is fully determined by its inputs, so reruns are byte-identical.
    """

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.output_dir / name
        path.write_text(to_json(payload) + "\n")
        logger.info(f"--- Report Service: Wrote {path} ---")
        return path

    def write_table(self, name: str, columns: Mapping[str, Sequence[Any]]) -> Path:
        path = self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({k: list(v) for k, v in columns.items()}).to_csv(
            path, index=False, float_format=FLOAT_FORMAT, na_rep=""
        )
        logger.info(f"--- Report Service: Wrote {path} ---")
        return path

    def write_report(
        self,
        command: str,
        config: Dict[str, Any],
        seeds: Optional[List[int]] = None,
        summary: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """report.json: resolved config, library version, seeds and an acceptance summary."""
        return self.write_json("report.json", {
            "command": command,
            "version": __version__,
            "config": config,
            "seeds": seeds or [],
            "summary": summary or {},
        })

    def write_tradeoff(self, report: TradeoffReport) -> Path:
        columns = report.columns()
        columns = {("lambda" if k == "lam" else k): v for k, v in columns.items()}
        return self.write_table("tradeoff.csv", columns)

    def write_monotonicity(self, report: VerificationReport) -> List[Path]:
        """One CSV per (label, difficulty, competence) under monotonicity/."""
        paths = []
        for (label, difficulty, competence), cells in sorted(report.groups().items()):
            cells = sorted(cells, key=lambda c: c.set_size)
            paths.append(self.write_table(
                f"monotonicity/{label}_{difficulty}_{competence}.csv",
                {
                    "set_size": [c.set_size for c in cells],
                    "n": [c.n for c in cells],
                    "successes": [c.successes for c in cells],
                    "success_probability": [c.success_probability for c in cells],
                    "standard_error": [c.standard_error for c in cells],
                },
            ))
        return paths
