"""Nonlinear perturbations f(t, v) = delta mu'(t) mu(t)^(-3 eps - 1) h(v) and their smallness thresholds."""

from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
from diffusers.utils import get_logger
from scipy.stats import qmc

from .growth import GrowthRate
from .utils import ValidationReport, operator_norm, sum_norm


logger = get_logger(__name__)

SHAPE_KINDS = ("huber_swap", "zero", "custom")
FD_STEP = 1e-5
RATIO_SLACK = 1e-6
ORIGIN_JACOBIAN_TOL = 1e-7


def huber(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= 1.0, 0.5 * x * x, ax - 0.5)


def huber_derivative(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def huber_swap(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 2:
        raise ValueError(f"`huber_swap` acts on two-dimensional states, got trailing size {v.shape[-1]}.")
    return np.stack([huber(v[..., 1]), huber(v[..., 0])], axis=-1)


def zero_shape(v: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(v, dtype=float))


@dataclass(frozen=True)
class Perturbation:
    delta: float
    growth: GrowthRate
    eps: float
    shape: Callable[[np.ndarray], np.ndarray]
    shape_kind: str = "custom"

    @property
    def is_zero(self) -> bool:
        return self.shape_kind == "zero" or self.delta == 0.0

    def envelope(self, t: Any) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.delta * self.growth.log_rate(t) * self.growth.power(t, -3.0 * self.eps)

    def eval(self, t: Any, v: Any) -> np.ndarray:
        """Vectorized over leading axes: `t` broadcasts against `v[..., 0]`."""
        v = np.asarray(v, dtype=float)
        if self.is_zero:
            return np.zeros_like(v)
        return self.envelope(t)[..., None] * self.shape(v)

    __call__ = eval


def make_perturbation(
    g: GrowthRate,
    eps: float,
    delta: float,
    shape_kind: str,
    shape: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Perturbation:
    if delta < 0:
        raise ValueError(f"`delta` must be nonnegative, got {delta}.")
    if eps < 0:
        raise ValueError(f"`eps` must be nonnegative, got {eps}.")

    if shape_kind == "huber_swap":
        shape = huber_swap
    elif shape_kind == "zero":
        shape = zero_shape
    elif shape_kind == "custom":
        if shape is None or not callable(shape):
            raise ValueError("A `custom` perturbation needs a callable `shape`.")
    else:
        raise ValueError(f"Unknown shape kind {shape_kind!r}; expected one of {SHAPE_KINDS}.")
    return Perturbation(delta=float(delta), growth=g, eps=float(eps), shape=shape, shape_kind=shape_kind)


def finite_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], v: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobians of `fn` at every row of `v`; result[..., i, j] = d fn_i / d v_j."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    columns = []
    for j in range(n):
        offset = np.zeros(n)
        offset[j] = step
        columns.append((fn(v + offset) - fn(v - offset)) / (2.0 * step))
    return np.stack(columns, axis=-1)


def default_samples(dim: int, count: int = 200, radius: float = 5.0, seed: int = 0) -> np.ndarray:
    """Low-discrepancy points in the sum-norm ball of the given radius."""
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    accepted = np.empty((0, dim))
    while len(accepted) < count:
        cube = radius * (2.0 * sampler.random(4 * count) - 1.0)
        accepted = np.concatenate([accepted, cube[sum_norm(cube) <= radius]], axis=0)
    return accepted[:count]


def _normalized(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    return np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)


def check_perturbation(f: Perturbation, t_grid: Sequence[float], v_samples: np.ndarray) -> ValidationReport:
    t_grid = np.asarray(t_grid, dtype=float)
    v_samples = np.atleast_2d(np.asarray(v_samples, dtype=float))
    if t_grid.size == 0 or len(v_samples) == 0:
        raise ValueError("`t_grid` and `v_samples` must be nonempty.")

    n = v_samples.shape[-1]
    origin = np.zeros((1, n))
    pair_i, pair_j = np.triu_indices(len(v_samples), k=1)
    distances = sum_norm(v_samples[pair_i] - v_samples[pair_j])

    worst = {name: (0.0, None) for name in ["origin_value", "origin_jacobian", "jacobian_bound", "lipschitz", "jacobian_lipschitz"]}

    def record(name: str, ratios: np.ndarray, t: float, where: Callable[[int], Any]) -> None:
        if ratios.size == 0:
            return
        index = int(np.argmax(ratios))
        if ratios[index] > worst[name][0]:
            worst[name] = (float(ratios[index]), {"t": float(t), "sample": where(index)})

    for t in t_grid:
        envelope = float(f.envelope(t))

        def fn(v, t=t):
            return f(t, v)

        origin_value = sum_norm(fn(origin))
        origin_jacobian = np.array([operator_norm(finite_difference_jacobian(fn, origin)[0])])
        record("origin_value", _normalized(origin_value, np.full(1, envelope)), t, lambda i: origin[i].tolist())
        record("origin_jacobian", _normalized(origin_jacobian, np.full(1, envelope)), t, lambda i: origin[i].tolist())

        values = fn(v_samples)
        jacobians = finite_difference_jacobian(fn, v_samples)
        jacobian_norms = np.max(np.sum(np.abs(jacobians), axis=-2), axis=-1)
        record("jacobian_bound", _normalized(jacobian_norms, np.full(len(v_samples), envelope)), t, lambda i: v_samples[i].tolist())

        scale = envelope * distances
        quotient = _normalized(sum_norm(values[pair_i] - values[pair_j]), scale)
        jacobian_diff = np.max(np.sum(np.abs(jacobians[pair_i] - jacobians[pair_j]), axis=-2), axis=-1)
        jacobian_quotient = _normalized(jacobian_diff, scale)
        pair_where = lambda i: [v_samples[pair_i[i]].tolist(), v_samples[pair_j[i]].tolist()]  # noqa: E731
        record("lipschitz", quotient, t, pair_where)
        record("jacobian_lipschitz", jacobian_quotient, t, pair_where)

    checks = {
        "origin_value": worst["origin_value"][0] == 0.0,
        "origin_jacobian": worst["origin_jacobian"][0] <= ORIGIN_JACOBIAN_TOL,
        "jacobian_bound": worst["jacobian_bound"][0] <= 1.0 + RATIO_SLACK,
        "lipschitz": worst["lipschitz"][0] <= 1.0 + RATIO_SLACK,
        "jacobian_lipschitz": worst["jacobian_lipschitz"][0] <= 1.0 + RATIO_SLACK,
    }
    details = {f"max_{name}": value for name, (value, _) in worst.items()}
    details["violations"] = {name: worst[name][1] for name, passed in checks.items() if not passed}
    for name in details["violations"]:
        logger.warning(f"Perturbation check `{name}` failed at {worst[name][1]} (ratio {worst[name][0]:.6g}).")
    return ValidationReport(checks=checks, details=details)


@dataclass(frozen=True)
class DeltaBounds:
    b1: float
    b2: float
    b3: float
    b4: float
    b5: float
    b6: float
    b7: float

    @property
    def delta_max(self) -> float:
        return min(self.b1, self.b2, self.b3, self.b4, self.b5, self.b6, self.b7)

    @property
    def binding(self) -> str:
        named = self.thresholds()
        return min(named, key=named.get)

    def thresholds(self) -> Dict[str, float]:
        return {
            "b1_trajectory_class": self.b1,
            "b2_trajectory_derivative": self.b2,
            "b3_inner_contraction": self.b3,
            "b4_pair_distance": self.b4,
            "b5_graph_class": self.b5,
            "b6_graph_derivative": self.b6,
            "b7_outer_contraction": self.b7,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {**self.thresholds(), "delta_max": self.delta_max, "binding": self.binding}


def delta_max(D: float, C: float, eps: float, a: float, b: float) -> DeltaBounds:
    if D < 1:
        raise ValueError(f"`D` must be at least 1, got {D}.")
    if not C > D:
        raise ValueError(f"`C` must exceed `D` (got C={C}, D={D}); the trajectory-class threshold would not be positive.")
    if not eps > 0:
        raise ValueError(f"`eps` must be positive, got {eps}.")
    if not a < 0 or b < 0:
        raise ValueError(f"Exponents must satisfy a < 0 <= b, got a={a}, b={b}.")
    if not a + eps < b:
        raise ValueError(f"Gap condition a + eps < b fails: {a} + {eps} >= {b}.")

    gap = abs(a - b - 2.0 * eps)
    return DeltaBounds(
        b1=eps * (1.0 / D - 1.0 / C),
        b2=2.0 * eps / (7.0 * C * D),
        b3=eps / D,
        b4=2.0 * eps / (3.0 * D),
        b5=gap / (2.0 * C * D),
        b6=gap / (7.0 * C * C * D),
        b7=gap / (3.0 * C * D),
    )


def parse_delta(token: Any, bounds: DeltaBounds) -> float:
    """A number, or `auto:<fraction>` meaning fraction * delta_max."""
    text = str(token).strip()
    if text.startswith("auto:"):
        try:
            fraction = float(text[len("auto:"):])
        except ValueError:
            raise ValueError(f"Malformed `--delta` token {token!r}; expected `auto:<fraction>`.")
        if fraction < 0:
            raise ValueError(f"`--delta` fraction must be nonnegative, got {fraction}.")
        return fraction * bounds.delta_max
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"Malformed `--delta` value {token!r}; expected a number or `auto:<fraction>`.")
