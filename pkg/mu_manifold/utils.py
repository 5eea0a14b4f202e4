import json
import os
import pathlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, TypeVar, Union

import numpy as np
import pandas as pd
from diffusers.utils import get_logger


logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "MU_MANIFOLD_THREADS"
CSV_FLOAT_FORMAT = "%.17g"


@dataclass
class ValidationReport:
    """Named pass/fail flags plus the numbers that produced them.

    `required` lists the checks that decide `passed`; any other check is advisory and only reported.
    """

    checks: Dict[str, bool] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)
    required: Optional[List[str]] = None

    @property
    def passed(self) -> bool:
        names = self.required if self.required is not None else list(self.checks)
        return all(self.checks[name] for name in names)

    def to_dict(self) -> Dict[str, Any]:
        return {"pass": self.passed, "checks": dict(self.checks), "details": to_jsonable(self.details)}


def get_num_workers(num_workers: Optional[int] = None) -> int:
    if num_workers is not None:
        if num_workers < 1:
            raise ValueError(f"`num_workers` must be positive, got {num_workers}.")
        return num_workers

    value = os.environ.get(THREADS_ENV_VAR)
    if value is None:
        return os.cpu_count() or 1
    try:
        workers = int(value)
    except ValueError:
        raise ValueError(f"`{THREADS_ENV_VAR}` must be an integer, got {value!r}.")
    if workers < 1:
        raise ValueError(f"`{THREADS_ENV_VAR}` must be positive, got {workers}.")
    return workers


def parallel_map(fn: Callable[[T], R], items: Iterable[T], num_workers: Optional[int] = None) -> List[R]:
    """Order-preserving map over a thread pool; reductions over the result are worker-count independent."""
    items = list(items)
    workers = min(get_num_workers(num_workers), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def uniform_grid(start: float, stop: float, step: float) -> np.ndarray:
    """`start + step * k` for k = 0..N with N the rounded number of steps; endpoints are hit exactly up to rounding."""
    if step <= 0:
        raise ValueError(f"`step` must be positive, got {step}.")
    if stop < start:
        raise ValueError(f"`stop` ({stop}) must not be smaller than `start` ({start}).")
    num_steps = int(round((stop - start) / step))
    if not np.isclose(start + num_steps * step, stop, rtol=0.0, atol=1e-9 * max(1.0, abs(stop))):
        logger.warning(f"Grid [{start}, {stop}] is not a multiple of step {step}; last point is {start + num_steps * step}.")
    return start + step * np.arange(num_steps + 1, dtype=float)


def symmetric_grid(radius: float, step: float) -> np.ndarray:
    if radius <= 0 or step <= 0:
        raise ValueError(f"`radius` and `step` must be positive, got {radius} and {step}.")
    half = int(round(radius / step))
    if half < 1:
        raise ValueError(f"Step {step} is larger than the grid radius {radius}.")
    return step * np.arange(-half, half + 1, dtype=float)


def sum_norm(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.sum(np.abs(v), axis=axis)


def operator_norm(value: Any) -> float:
    """Operator norm induced by the sum norm: the largest absolute column sum (absolute value on scalars)."""
    matrix = np.asarray(value, dtype=float)
    if matrix.ndim == 0:
        return float(abs(matrix))
    if matrix.ndim == 1:
        return float(np.max(np.abs(matrix))) if matrix.size else 0.0
    return float(np.max(np.sum(np.abs(matrix), axis=-2)))


def to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if hasattr(value, "to_dict"):
        return to_jsonable(value.to_dict())
    return value


def save_json(payload: Any, path: Union[str, pathlib.Path]) -> pathlib.Path:
    # repr-based float output round-trips bit-exactly
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        file.write(json.dumps(to_jsonable(payload), indent=2, sort_keys=True, allow_nan=True))
        file.write("\n")
    return path


def load_json(path: Union[str, pathlib.Path]) -> Any:
    with open(path, "r", encoding="utf-8") as file:
        return json.load(file)


def save_csv(frame: pd.DataFrame, path: Union[str, pathlib.Path]) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


@dataclass
class BoundReport:
    """Largest observed ratio against a proof constant; `skipped` marks comparisons with nothing to compare."""

    passed: bool
    max_ratio: float
    threshold: float
    skipped: bool = False
    worst: Optional[Dict[str, Any]] = None
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pass": self.passed,
            "max_ratio": self.max_ratio,
            "threshold": self.threshold,
            "skipped": self.skipped,
            "worst": to_jsonable(self.worst),
            "details": to_jsonable(self.details),
        }
