"""
Data Manager for the cocycle lab
Handles run artifacts on disk: report JSON, curve CSVs, the timing sidecar
and exported stationary clouds
"""

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
from loguru import logger

from .configs import output_dir
from .errors import InvalidInputError
from .stationary import MeasureCloud


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become "inf", "-inf" or "nan" """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if hasattr(value, "model_dump"):
        return to_jsonable(value.model_dump())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return value


def dumps_report(report: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def export_cloud(path: Union[str, Path], cloud: MeasureCloud) -> Path:
    """One flag per row: weight, state label, then the basis entries b11..bnn row-major"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = cloud.n
    header = ["weight", "state"] + [f"b{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for w, x, basis in zip(cloud.weights, cloud.states, cloud.bases):
            writer.writerow([repr(float(w)), cloud.state_labels[x]] + [repr(float(v)) for v in basis.reshape(-1)])
    logger.info(f"exported {len(cloud)} flags to {path}")
    return path


def import_cloud(path: Union[str, Path]) -> MeasureCloud:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise InvalidInputError(f"{path} holds no flags")
    header, body = rows[0], rows[1:]
    n = math.isqrt(len(header) - 2)
    if header[:2] != ["weight", "state"] or n * n != len(header) - 2:
        raise InvalidInputError(f"{path} is not a cloud export (header {header[:3]}...)")
    labels = []
    for row in body:
        if row[1] not in labels:
            labels.append(row[1])
    weights = np.array([float(row[0]) for row in body])
    states = np.array([labels.index(row[1]) for row in body])
    bases = np.array([[float(v) for v in row[2:]] for row in body]).reshape(-1, n, n)
    return MeasureCloud(n, weights / weights.sum(), states, bases, tuple(labels))


class DataManager:
    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root) if root is not None else None

    @property
    def base(self) -> Path:
        """Output root; falls back to the environment override at call time"""
        return self.root if self.root is not None else output_dir()

    def scenario_dir(self, scenario: str) -> Path:
        path = self.base / scenario
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_report(self, scenario: str, report: Dict[str, Any]) -> Path:
        """Write report.json with sorted keys; bytes depend only on the report content"""
        try:
            path = self.scenario_dir(scenario) / "report.json"
            path.write_text(dumps_report(report), encoding="utf-8")
            logger.info(f"report written to {path}")
            return path
        except OSError as e:
            logger.error(f"Error writing report for {scenario}: {e}")
            raise

    def load_report(self, scenario: str) -> Dict[str, Any]:
        path = self.base / scenario / "report.json"
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error reading report {path}: {e}")
            return {}

    def save_curve(self, scenario: str, experiment: str, curve: str,
                   horizons: Sequence[float], values: Sequence[float]) -> Path:
        if len(horizons) != len(values):
            raise InvalidInputError(f"curve {curve}: {len(horizons)} horizons but {len(values)} values")
        folder = self.scenario_dir(scenario) / "curves"
        folder.mkdir(exist_ok=True)
        path = folder / f"{experiment}__{curve}.csv"
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["horizon", "value"])
            for h, v in zip(horizons, values):
                writer.writerow([to_jsonable(h), to_jsonable(v)])
        logger.debug(f"curve written to {path}")
        return path

    def save_timing(self, scenario: str, timing: Dict[str, float]) -> Path:
        path = self.scenario_dir(scenario) / "timing.json"
        path.write_text(json.dumps(to_jsonable(timing), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path

    def save_cloud(self, scenario: str, cloud: MeasureCloud, name: str = "cloud") -> Path:
        return export_cloud(self.scenario_dir(scenario) / f"{name}.csv", cloud)


# Global instance; the output root is resolved when artifacts are written
data_manager = DataManager()
