"""Lyapunov-Perron construction of the stable manifold graph.

Two nested contractions run on a uniform time grid and a symmetric xi-grid. For a fixed graph phi the
inner operator J finds, for each grid base time s, the stable trajectory family

    x_phi(t, xi) = U(t,s) xi + int_s^t U(t,r) P f(r, x_phi(r,xi), phi(r, x_phi(r,xi))) dr,

and the outer operator Phi maps phi to

    (Phi phi)(s, xi) = -int_s^T V(r,s)^-1 Q f(r, x_phi(r,xi), phi(r, x_phi(r,xi))) dr.

The integral is truncated at T = t_max; the neglected tail has a closed-form bound that is recorded
with every solve. The stable block must be one-dimensional so that xi lives on a line.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from diffusers.utils import get_logger
from scipy import integrate
from scipy.optimize import brentq
from tqdm.auto import tqdm

from .growth import GrowthRate
from .linsys import DichotomySpec, LinearSystem
from .perturb import Perturbation, delta_max
from .utils import BoundReport, ValidationReport, parallel_map, sum_norm, symmetric_grid, uniform_grid


logger = get_logger(__name__)

QUADRATURE_RULES = ("trapezoid", "simpson")
# Differences below this are rounding noise; ratios against them are not recorded.
RATIO_FLOOR = 1e-13
GRID_ATOL = 1e-9


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, iterations: int, last_ratio: Optional[float] = None):
        super().__init__(f"{message} (iterations={iterations}, last ratio={last_ratio})")
        self.iterations = iterations
        self.last_ratio = last_ratio


@dataclass
class SolverConfig:
    s0: float = 0.0
    t_max: float = 40.0
    t_step: float = 0.05
    xi_range: float = 0.5
    xi_step: float = 0.025
    C: Optional[float] = None
    tol_inner: float = 1e-11
    tol_outer: float = 1e-8
    tol_tail: float = 1e-5
    max_iter_inner: int = 50
    max_iter_outer: int = 60
    quadrature: str = "trapezoid"
    grid_slack: float = 0.05
    num_workers: Optional[int] = None
    show_progress: bool = False

    def __post_init__(self):
        if self.s0 < 0:
            raise ValueError(f"`s0` must be nonnegative, got {self.s0}.")
        if not self.t_max > self.s0:
            raise ValueError(f"`t_max` ({self.t_max}) must exceed `s0` ({self.s0}).")
        if not self.t_step > 0 or not self.xi_step > 0 or not self.xi_range > 0:
            raise ValueError("`t_step`, `xi_step` and `xi_range` must be positive.")
        if self.xi_range < 4 * self.xi_step:
            raise ValueError(f"`xi_range` must hold at least four grid steps on each side of 0, got {self.xi_range}.")
        for name in ["tol_inner", "tol_outer", "tol_tail", "grid_slack"]:
            if not getattr(self, name) > 0:
                raise ValueError(f"`{name}` must be positive, got {getattr(self, name)}.")
        if self.max_iter_inner < 1 or self.max_iter_outer < 1:
            raise ValueError("Iteration caps must be at least 1.")
        if self.quadrature not in QUADRATURE_RULES:
            raise ValueError(f"Unknown quadrature {self.quadrature!r}; expected one of {QUADRATURE_RULES}.")

    def time_grid(self) -> np.ndarray:
        return uniform_grid(self.s0, self.t_max, self.t_step)

    def xi_grid(self) -> np.ndarray:
        return symmetric_grid(self.xi_range, self.xi_step)

    def class_constant(self, D: float) -> float:
        C = 2.0 * D if self.C is None else float(self.C)
        if not C > D:
            raise ValueError(f"Class constant `C` must exceed the dichotomy constant D={D}, got {C}.")
        return C

    def replace(self, **changes: Any) -> "SolverConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _is_uniform(grid: np.ndarray) -> bool:
    if grid.ndim != 1 or grid.size < 2 or not np.all(np.isfinite(grid)):
        return False
    steps = np.diff(grid)
    return bool(np.all(steps > 0) and np.allclose(steps, steps[0], rtol=1e-9, atol=GRID_ATOL))


def interpolate_xi(table: np.ndarray, xi_grid: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear evaluation of per-row graphs at per-row query points.

    `table` has shape (L, M, m) (row i is a graph over `xi_grid`), `x` has shape (L, Q). Queries outside
    the grid use the end segments; the second return value flags them.
    """
    step = xi_grid[1] - xi_grid[0]
    position = (x - xi_grid[0]) / step
    index = np.clip(np.floor(position).astype(int), 0, len(xi_grid) - 2)
    weight = (position - index)[..., None]
    lower = np.take_along_axis(table, index[..., None], axis=1)
    upper = np.take_along_axis(table, index[..., None] + 1, axis=1)
    outside = (x < xi_grid[0] - GRID_ATOL) | (x > xi_grid[-1] + GRID_ATOL)
    return lower + weight * (upper - lower), outside


class TrajectoryFamily:
    """Stable-coordinate trajectories x(t, xi) on times[0] = s <= t <= T for every grid xi."""

    def __init__(self, values: np.ndarray, times: np.ndarray, xi: np.ndarray, growth: GrowthRate, a: float, eps: float):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(times), len(xi)):
            raise ValueError(f"Trajectory values have shape {values.shape}, expected {(len(times), len(xi))}.")
        self.values = values
        self.times = np.asarray(times, dtype=float)
        self.xi = np.asarray(xi, dtype=float)
        self.growth = growth
        self.a = a
        self.eps = eps

    @property
    def base(self) -> float:
        return float(self.times[0])

    @property
    def weights(self) -> np.ndarray:
        """mu(s)^a / (mu(s)^eps mu(t)^a) per time."""
        return self.growth.ratio_power(self.times, self.base, -self.a) * self.growth.power(self.base, -self.eps)

    def _like(self, values: np.ndarray) -> "TrajectoryFamily":
        return TrajectoryFamily(values, self.times, self.xi, self.growth, self.a, self.eps)

    def __sub__(self, other: "TrajectoryFamily") -> "TrajectoryFamily":
        if other.values.shape != self.values.shape or not np.array_equal(other.times, self.times):
            raise ValueError("Trajectory families live on different grids.")
        return self._like(self.values - other.values)

    def __mul__(self, scalar: float) -> "TrajectoryFamily":
        return self._like(scalar * self.values)

    __rmul__ = __mul__

    def to_frame(self) -> pd.DataFrame:
        t, xi = np.meshgrid(self.times, self.xi, indexing="ij")
        return pd.DataFrame({"t": t.ravel(), "xi": xi.ravel(), "x": self.values.ravel()})


class GraphFunction:
    """phi(s, xi) on a uniform s-grid and a symmetric xi-grid; values have shape (S, M, unstable_dim)."""

    def __init__(
        self,
        values: np.ndarray,
        s_grid: np.ndarray,
        xi_grid: np.ndarray,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        values = np.asarray(values, dtype=float)
        s_grid = np.asarray(s_grid, dtype=float)
        xi_grid = np.asarray(xi_grid, dtype=float)
        if values.ndim == 2:
            values = values[..., None]
        if values.ndim != 3 or values.shape[:2] != (len(s_grid), len(xi_grid)):
            raise ValueError(f"Graph values have shape {values.shape}, expected ({len(s_grid)}, {len(xi_grid)}, m).")
        if not _is_uniform(s_grid) or not _is_uniform(xi_grid):
            raise ValueError("Graph grids must be uniform and strictly increasing.")
        if not np.any(xi_grid == 0.0) or not np.allclose(xi_grid, -xi_grid[::-1], atol=GRID_ATOL):
            raise ValueError("The xi-grid must be symmetric and contain 0.")
        self.values = values
        self.s_grid = s_grid
        self.xi_grid = xi_grid
        self.metadata = dict(metadata or {})

    @classmethod
    def zeros(cls, s_grid: np.ndarray, xi_grid: np.ndarray, unstable_dim: int = 1) -> "GraphFunction":
        return cls(np.zeros((len(s_grid), len(xi_grid), unstable_dim)), s_grid, xi_grid)

    @property
    def unstable_dim(self) -> int:
        return self.values.shape[-1]

    def same_grid(self, other: "GraphFunction") -> bool:
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.s_grid, other.s_grid)
            and np.array_equal(self.xi_grid, other.xi_grid)
        )

    def __sub__(self, other: "GraphFunction") -> "GraphFunction":
        if not self.same_grid(other):
            raise ValueError("Graph functions live on different grids.")
        return GraphFunction(self.values - other.values, self.s_grid, self.xi_grid)

    def __mul__(self, scalar: float) -> "GraphFunction":
        return GraphFunction(scalar * self.values, self.s_grid, self.xi_grid, self.metadata)

    __rmul__ = __mul__

    def s_index(self, s: float) -> int:
        position = (s - self.s_grid[0]) / (self.s_grid[1] - self.s_grid[0])
        index = int(round(position))
        if abs(position - index) > 1e-6 or not 0 <= index < len(self.s_grid):
            raise ValueError(f"Time {s} is not a node of the graph's s-grid.")
        return index

    def evaluate(self, s: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """phi(s_i, x_iq) for times `s` of shape (L,) and points `x` of shape (L, Q).

        Linear in s between grid rows, piecewise linear in xi; returns values (L, Q, m) and the
        outside-of-grid mask.
        """
        s = np.asarray(s, dtype=float)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if np.any(s < self.s_grid[0] - GRID_ATOL) or np.any(s > self.s_grid[-1] + GRID_ATOL):
            raise ValueError("Query times fall outside the graph's s-grid.")
        position = (s - self.s_grid[0]) / (self.s_grid[1] - self.s_grid[0])
        nearest = np.round(position)
        position = np.where(np.abs(position - nearest) < 1e-9, nearest, position)
        index = np.clip(np.floor(position).astype(int), 0, len(self.s_grid) - 1)
        weight = (position - index)[:, None, None]
        upper_index = np.minimum(index + 1, len(self.s_grid) - 1)

        lower, outside = interpolate_xi(self.values[index], self.xi_grid, x)
        upper, _ = interpolate_xi(self.values[upper_index], self.xi_grid, x)
        return np.where(weight == 0.0, lower, (1.0 - weight) * lower + weight * upper), outside

    def to_frame(self) -> pd.DataFrame:
        s, xi = np.meshgrid(self.s_grid, self.xi_grid, indexing="ij")
        columns = {"s": s.ravel(), "xi": xi.ravel()}
        for k in range(self.unstable_dim):
            columns[f"phi_{k}"] = self.values[..., k].ravel()
        return pd.DataFrame(columns)

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "kind": "graph_function",
            "s_grid": self.s_grid.tolist(),
            "xi_grid": self.xi_grid.tolist(),
            "unstable_dim": self.unstable_dim,
            "values": self.values.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_json_dict(cls, payload: Dict[str, Any]) -> "GraphFunction":
        if not isinstance(payload, dict) or payload.get("kind") != "graph_function":
            raise ValueError("Corrupted graph dataset: missing `kind: graph_function`.")
        try:
            s_grid = np.asarray(payload["s_grid"], dtype=float)
            xi_grid = np.asarray(payload["xi_grid"], dtype=float)
            values = np.asarray(payload["values"], dtype=float)
            unstable_dim = int(payload["unstable_dim"])
        except (KeyError, TypeError, ValueError) as error:
            raise ValueError(f"Corrupted graph dataset: {error}.")
        if values.shape != (len(s_grid), len(xi_grid), unstable_dim):
            raise ValueError(
                f"Corrupted graph dataset: values have shape {values.shape}, grid metadata implies "
                f"{(len(s_grid), len(xi_grid), unstable_dim)}."
            )
        return cls(values, s_grid, xi_grid, payload.get("metadata"))


def weighted_norm_B(x: TrajectoryFamily) -> float:
    nonzero = x.xi != 0.0
    if not np.any(nonzero):
        return 0.0
    ratios = x.weights[:, None] * np.abs(x.values[:, nonzero]) / np.abs(x.xi[nonzero])
    return float(np.max(ratios))


def weighted_norm_X(phi: GraphFunction) -> float:
    nonzero = phi.xi_grid != 0.0
    if not np.any(nonzero):
        return 0.0
    return float(np.max(sum_norm(phi.values[:, nonzero, :]) / np.abs(phi.xi_grid[nonzero])))


def ramp_graph(s_grid: np.ndarray, xi_grid: np.ndarray, unstable_dim: int = 1, slope: float = 0.5) -> GraphFunction:
    """phi_0(s, xi) = slope * clip(xi, -R/2, R/2) in the first unstable coordinate."""
    if not 0 < slope <= 1:
        raise ValueError(f"`slope` must lie in (0, 1], got {slope}.")
    clamp = 0.5 * float(np.max(np.abs(xi_grid)))
    values = np.zeros((len(s_grid), len(xi_grid), unstable_dim))
    values[..., 0] = slope * np.clip(xi_grid, -clamp, clamp)[None, :]
    return GraphFunction(values, s_grid, xi_grid)


@dataclass
class InnerDiagnostics:
    base: float
    iterations: int
    ratios: List[float]
    residual: float
    ratio_bound: float
    extrapolated_fraction: float = 0.0

    @property
    def max_ratio(self) -> float:
        return max(self.ratios, default=0.0)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class OuterStep:
    inner: List[InnerDiagnostics]
    quadrature_estimate: float
    extrapolated_fraction: float

    @property
    def max_inner_ratio(self) -> float:
        return max((diag.max_ratio for diag in self.inner), default=0.0)


@dataclass
class OuterDiagnostics:
    iterations: int
    ratios: List[float]
    residuals: List[float]
    inner_ratio_max: List[float]
    inner_iterations_max: List[int]
    inner_ratio_bound: float
    outer_ratio_bound: float
    tail_bound: float
    tail_bound_max: float
    quadrature_estimate: float
    extrapolated_fraction: float
    delta: float
    delta_max: float
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def max_ratio(self) -> float:
        return max(self.ratios, default=0.0)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def required_t_max(
    g: GrowthRate, spec: DichotomySpec, C: float, delta: float, s: float, radius: float, tol: float
) -> float:
    """Smallest T with 2 C D delta / gap * (mu(T)/mu(s))^-gap * mu(s)^-eps * radius <= tol."""
    gap = spec.gap
    scale = 2.0 * C * spec.D * delta / gap * float(g.power(s, -spec.eps)) * radius
    if scale <= tol:
        return float(s)
    log_target = float(g.log(s)) + math.log(scale / tol) / gap

    upper = max(2.0 * s, 1.0)
    while float(g.log(upper)) < log_target:
        upper *= 2.0
        if upper > 1e12:
            return math.inf
    return float(brentq(lambda T: float(g.log(T)) - log_target, s, upper, xtol=1e-10))


class LyapunovPerronSolver:
    """Holds the grids and the evolution blocks shared by every operator application."""

    def __init__(self, sys: LinearSystem, f: Perturbation, cfg: SolverConfig, spec: Optional[DichotomySpec] = None):
        spec = spec if spec is not None else getattr(sys, "dichotomy", None)
        if spec is None:
            raise ValueError("The linear system carries no dichotomy; pass `spec` explicitly.")
        if not math.isclose(f.eps, spec.eps, rel_tol=0.0, abs_tol=1e-15):
            raise ValueError(f"Perturbation envelope uses eps={f.eps} but the dichotomy has eps={spec.eps}.")
        system_growth = getattr(sys, "growth", None)
        if system_growth is not None and system_growth.label != f.growth.label:
            raise ValueError(f"Growth rates disagree: system `{system_growth.label}`, perturbation `{f.growth.label}`.")
        splitting = sys.splitting
        if not splitting.is_coordinate or splitting.stable_dim != 1:
            raise ValueError("The solver needs a coordinate splitting with a one-dimensional stable block.")

        self.sys = sys
        self.f = f
        self.cfg = cfg
        self.spec = spec
        self.growth = f.growth
        self.C = cfg.class_constant(spec.D)
        self.times = cfg.time_grid()
        self.xi = cfg.xi_grid()
        self.step = float(self.times[1] - self.times[0])
        self._zero = int(np.flatnonzero(self.xi == 0.0)[0])

        self._u = np.asarray(sys.stable_fundamental(self.times), dtype=float).reshape(-1)
        self._v = np.asarray(sys.unstable_fundamental(self.times), dtype=float)
        self._v_inv = np.linalg.inv(self._v)
        self.unstable_dim = self._v.shape[-1]

    # grids

    def base_index(self, s: float) -> int:
        index = int(round((s - self.times[0]) / self.step))
        if not 0 <= index < len(self.times) or abs(self.times[index] - s) > 1e-6 * self.step:
            raise ValueError(f"Base time {s} is not a node of the time grid.")
        return index

    def zero_graph(self) -> GraphFunction:
        return GraphFunction.zeros(self.times, self.xi, self.unstable_dim)

    def _family(self, values: np.ndarray, j: int) -> TrajectoryFamily:
        return TrajectoryFamily(values, self.times[j:], self.xi, self.growth, self.spec.a, self.spec.eps)

    def _check_graph(self, phi: GraphFunction) -> None:
        if phi.values.shape != (len(self.times), len(self.xi), self.unstable_dim) or not (
            np.allclose(phi.s_grid, self.times, atol=GRID_ATOL) and np.allclose(phi.xi_grid, self.xi, atol=GRID_ATOL)
        ):
            raise ValueError("Graph grid does not match the solver configuration.")

    # quadrature

    def _cumulative(self, integrand: np.ndarray) -> np.ndarray:
        if len(integrand) == 1:
            return np.zeros_like(integrand)
        if self.cfg.quadrature == "simpson" and len(integrand) >= 3:
            return integrate.cumulative_simpson(integrand, dx=self.step, axis=0, initial=0.0)
        return integrate.cumulative_trapezoid(integrand, dx=self.step, axis=0, initial=0.0)

    def _definite(self, integrand: np.ndarray, rule: Optional[str] = None) -> np.ndarray:
        rule = rule or self.cfg.quadrature
        if len(integrand) == 1:
            return np.zeros_like(integrand[0])
        if rule == "simpson" and len(integrand) >= 3:
            return integrate.simpson(integrand, dx=self.step, axis=0)
        return integrate.trapezoid(integrand, dx=self.step, axis=0)

    # operators

    def linear_family(self, j: int) -> TrajectoryFamily:
        u = self._u[j:]
        return self._family((u / u[0])[:, None] * self.xi[None, :], j)

    def _forcing(self, j: int, x_values: np.ndarray, phi: GraphFunction) -> Tuple[np.ndarray, float]:
        times = self.times[j:]
        y, outside = interpolate_xi(phi.values[j:], self.xi, x_values)
        state = np.concatenate([x_values[..., None], y], axis=-1)
        forcing = self.f(times[:, None], state)
        finite = np.isfinite(forcing).all(axis=-1)
        if not finite.all():
            row, column = np.argwhere(~finite)[0]
            raise FloatingPointError(f"Non-finite integrand at r={times[row]}, xi={self.xi[column]}.")
        return forcing, float(outside.mean())

    def _apply_inner(self, j: int, x_values: np.ndarray, phi: GraphFunction) -> Tuple[np.ndarray, float]:
        forcing, outside = self._forcing(j, x_values, phi)
        u = self._u[j:]
        integral = self._cumulative(forcing[..., 0] / u[:, None])
        values = (u / u[0])[:, None] * self.xi[None, :] + u[:, None] * integral
        values[0] = self.xi
        values[:, self._zero] = 0.0
        return values, outside

    def inner_operator(self, x: TrajectoryFamily, phi: GraphFunction) -> TrajectoryFamily:
        self._check_graph(phi)
        j = self.base_index(x.base)
        if x.values.shape != (len(self.times) - j, len(self.xi)):
            raise ValueError("Trajectory family does not match the solver grid.")
        values, _ = self._apply_inner(j, x.values, phi)
        return self._family(values, j)

    def solve_x(self, phi: GraphFunction, base_index: int = 0) -> Tuple[TrajectoryFamily, InnerDiagnostics]:
        j = base_index
        ratio_bound, _ = self.ratio_bounds()
        x = self.linear_family(j)
        ratios: List[float] = []
        previous: Optional[float] = None
        for iteration in range(1, self.cfg.max_iter_inner + 1):
            values, outside = self._apply_inner(j, x.values, phi)
            new_x = self._family(values, j)
            residual = weighted_norm_B(new_x - x)
            if previous is not None and previous > RATIO_FLOOR:
                ratios.append(residual / previous)
            x, previous = new_x, residual
            if residual <= self.cfg.tol_inner:
                return x, InnerDiagnostics(float(self.times[j]), iteration, ratios, residual, ratio_bound, outside)
        raise ConvergenceError(
            f"Inner iteration at s={self.times[j]} did not reach {self.cfg.tol_inner}",
            iterations=self.cfg.max_iter_inner,
            last_ratio=ratios[-1] if ratios else None,
        )

    def _outer_column(self, phi: GraphFunction, j: int) -> Tuple[np.ndarray, InnerDiagnostics, float]:
        x, diagnostics = self.solve_x(phi, j)
        if len(x.times) == 1:
            return np.zeros((len(self.xi), self.unstable_dim)), diagnostics, 0.0

        forcing, _ = self._forcing(j, x.values, phi)
        integrand = np.einsum("lab,lmb->lma", self._v_inv[j:], forcing[..., 1:])
        integral = self._definite(integrand)
        alternative = self._definite(integrand, "simpson" if self.cfg.quadrature == "trapezoid" else "trapezoid")
        column = -np.einsum("ab,mb->ma", self._v[j], integral)
        quadrature_delta = float(np.max(sum_norm(np.einsum("ab,mb->ma", self._v[j], integral - alternative))))
        column[self._zero] = 0.0
        return column, diagnostics, quadrature_delta

    def outer_operator(self, phi: GraphFunction) -> Tuple[GraphFunction, OuterStep]:
        self._check_graph(phi)
        results = parallel_map(lambda j: self._outer_column(phi, j), range(len(self.times)), self.cfg.num_workers)
        values = np.stack([column for column, _, _ in results], axis=0)
        inner = [diagnostics for _, diagnostics, _ in results]
        step = OuterStep(
            inner=inner,
            quadrature_estimate=max(delta for _, _, delta in results),
            extrapolated_fraction=float(np.mean([diagnostics.extrapolated_fraction for diagnostics in inner])),
        )
        if step.extrapolated_fraction > 0:
            logger.debug(f"{100 * step.extrapolated_fraction:.3f}% of graph queries fell outside the xi-grid.")
        return GraphFunction(values, self.times, self.xi), step

    # bounds and gates

    def tail_bounds(self) -> np.ndarray:
        """Bound on the neglected [T, inf) part of the outer integral at every base time, at |xi| = R."""
        if self.f.is_zero:
            return np.zeros_like(self.times)
        spec = self.spec
        scale = 2.0 * self.C * spec.D * self.f.delta / spec.gap
        decay = self.growth.ratio_power(self.times[-1], self.times, spec.a - spec.b - 2.0 * spec.eps)
        return scale * decay * self.growth.power(self.times, -spec.eps) * float(np.max(np.abs(self.xi)))

    def check_truncation(self) -> np.ndarray:
        tails = self.tail_bounds()
        if tails[0] > self.cfg.tol_tail:
            suggestion = required_t_max(
                self.growth, self.spec, self.C, self.f.delta, float(self.times[0]), float(np.max(np.abs(self.xi))),
                self.cfg.tol_tail,
            )
            raise ValueError(
                f"Tail bound {tails[0]:.3e} at s={self.times[0]} exceeds `tol_tail`={self.cfg.tol_tail:.1e}; "
                f"increase `t_max` to at least {suggestion:.6g}."
            )
        return tails

    def check_preconditions(self) -> float:
        spec = self.spec
        if not spec.eps > 0:
            raise ValueError("The manifold solver needs a positive nonuniformity exponent `eps`.")
        if not spec.has_gap:
            raise ValueError(f"Gap condition a + eps < b fails for a={spec.a}, eps={spec.eps}, b={spec.b}.")
        limit = delta_max(spec.D, self.C, spec.eps, spec.a, spec.b).delta_max
        if not self.f.delta < limit:
            raise ValueError(f"`delta`={self.f.delta:.6g} is not below delta_max={limit:.6g}.")
        return limit

    def ratio_bounds(self) -> Tuple[float, float]:
        spec = self.spec
        inner = spec.D * self.f.delta / spec.eps if spec.eps > 0 else math.inf
        outer = 3.0 * self.C * spec.D * self.f.delta / spec.gap
        return inner, outer

    # fixed point

    def solve(self, phi0: Optional[GraphFunction] = None) -> Tuple[GraphFunction, OuterDiagnostics]:
        limit = self.check_preconditions()
        tails = self.check_truncation()
        inner_bound, outer_bound = self.ratio_bounds()
        phi = self.zero_graph() if phi0 is None else phi0
        self._check_graph(phi)

        ratios: List[float] = []
        residuals: List[float] = []
        inner_ratio_max: List[float] = []
        inner_iterations_max: List[int] = []
        step = None

        progress_bar = tqdm(range(1, self.cfg.max_iter_outer + 1), desc="Outer iterations", disable=not self.cfg.show_progress)
        for iteration in progress_bar:
            new_phi, step = self.outer_operator(phi)
            residual = weighted_norm_X(new_phi - phi)
            if residuals and residuals[-1] > RATIO_FLOOR:
                ratios.append(residual / residuals[-1])
            residuals.append(residual)
            inner_ratio_max.append(step.max_inner_ratio)
            inner_iterations_max.append(max(diagnostics.iterations for diagnostics in step.inner))
            phi = new_phi

            progress_bar.set_postfix(residual=f"{residual:.3e}")
            logger.info(f"Outer iteration {iteration}: residual {residual:.3e}, max inner ratio {step.max_inner_ratio:.3e}")
            if ratios and ratios[-1] > outer_bound + self.cfg.grid_slack:
                logger.warning(f"Outer contraction ratio {ratios[-1]:.3e} exceeds the bound {outer_bound:.3e}.")
            if step.max_inner_ratio > inner_bound + self.cfg.grid_slack:
                logger.warning(f"Inner contraction ratio {step.max_inner_ratio:.3e} exceeds the bound {inner_bound:.3e}.")
            if residual <= self.cfg.tol_outer:
                break
        else:
            raise ConvergenceError(
                f"Outer iteration did not reach {self.cfg.tol_outer}",
                iterations=self.cfg.max_iter_outer,
                last_ratio=ratios[-1] if ratios else None,
            )

        if step.extrapolated_fraction > 0:
            logger.warning(
                f"{100 * step.extrapolated_fraction:.3f}% of graph queries in the last sweep used xi-extrapolation."
            )
        diagnostics = OuterDiagnostics(
            iterations=len(residuals),
            ratios=ratios,
            residuals=residuals,
            inner_ratio_max=inner_ratio_max,
            inner_iterations_max=inner_iterations_max,
            inner_ratio_bound=inner_bound,
            outer_ratio_bound=outer_bound,
            tail_bound=float(tails[0]),
            tail_bound_max=float(np.max(tails)),
            quadrature_estimate=step.quadrature_estimate,
            extrapolated_fraction=step.extrapolated_fraction,
            delta=self.f.delta,
            delta_max=limit,
        )
        phi.metadata = {
            "growth": self.growth.label,
            "a": self.spec.a,
            "b": self.spec.b,
            "eps": self.spec.eps,
            "D": self.spec.D,
            "C": self.C,
            "delta": self.f.delta,
            "shape": self.f.shape_kind,
            "tol_outer": self.cfg.tol_outer,
            "quadrature": self.cfg.quadrature,
            "quadrature_estimate": step.quadrature_estimate,
            "tail_bounds": tails.tolist(),
        }
        return phi, diagnostics

    def forward_identity_residual(self, phi: GraphFunction, horizon: Optional[float] = None) -> float:
        """max |phi(t, x_phi(t,xi)) - V(t,s) phi(s,xi) - int_s^t V(t,r) Q f dr| over t <= s0 + horizon."""
        self._check_graph(phi)
        horizon = 0.5 * (self.times[-1] - self.times[0]) if horizon is None else horizon
        x, _ = self.solve_x(phi, 0)
        forcing, _ = self._forcing(0, x.values, phi)
        on_graph, outside = interpolate_xi(phi.values, self.xi, x.values)

        integral = self._cumulative(np.einsum("lab,lmb->lma", self._v_inv, forcing[..., 1:]))
        start = np.einsum("ab,mb->ma", self._v_inv[0], phi.values[0])
        predicted = np.einsum("lab,lmb->lma", self._v, start[None] + integral)

        keep = self.times <= self.times[0] + horizon + GRID_ATOL
        residual = sum_norm(on_graph - predicted)[keep]
        residual = np.where(outside[keep], 0.0, residual)
        return float(np.max(residual))


def inner_operator_J(
    x: TrajectoryFamily, phi: GraphFunction, sys: LinearSystem, f: Perturbation, cfg: SolverConfig
) -> TrajectoryFamily:
    return LyapunovPerronSolver(sys, f, cfg).inner_operator(x, phi)


def solve_x(
    phi: GraphFunction, sys: LinearSystem, f: Perturbation, cfg: SolverConfig, base: Optional[float] = None
) -> Tuple[TrajectoryFamily, InnerDiagnostics]:
    solver = LyapunovPerronSolver(sys, f, cfg)
    return solver.solve_x(phi, solver.base_index(cfg.s0 if base is None else base))


def outer_operator_Phi(phi: GraphFunction, sys: LinearSystem, f: Perturbation, cfg: SolverConfig) -> GraphFunction:
    solver = LyapunovPerronSolver(sys, f, cfg)
    tails = solver.check_truncation()
    result, step = solver.outer_operator(phi)
    result.metadata = {"tail_bounds": tails.tolist(), "quadrature_estimate": step.quadrature_estimate}
    return result


def solve_manifold(
    sys: LinearSystem, f: Perturbation, cfg: SolverConfig, phi0: Optional[GraphFunction] = None
) -> Tuple[GraphFunction, OuterDiagnostics]:
    return LyapunovPerronSolver(sys, f, cfg).solve(phi0)


def split_identity_residual(
    phi: GraphFunction, sys: LinearSystem, f: Perturbation, cfg: SolverConfig, horizon: Optional[float] = None
) -> float:
    return LyapunovPerronSolver(sys, f, cfg).forward_identity_residual(phi, horizon)


def pair_distance_bound_check(
    phi: GraphFunction, psi: GraphFunction, sys: LinearSystem, f: Perturbation, cfg: SolverConfig
) -> BoundReport:
    solver = LyapunovPerronSolver(sys, f, cfg)
    spec = solver.spec
    threshold = 1.0 + cfg.grid_slack
    limit = 2.0 * spec.eps / (3.0 * spec.D)
    if not f.delta < limit:
        raise ValueError(f"`delta`={f.delta:.6g} must be below 2 eps / (3 D) = {limit:.6g} for the pair bound.")
    if not phi.same_grid(psi):
        raise ValueError("Both graphs must live on the same grid.")

    distance = weighted_norm_X(phi - psi)
    if distance == 0.0:
        return BoundReport(passed=True, max_ratio=0.0, threshold=threshold, skipped=True)

    x_phi, _ = solver.solve_x(phi, 0)
    x_psi, _ = solver.solve_x(psi, 0)
    s, t = x_phi.base, x_phi.times
    nonzero = solver.xi != 0.0
    scale = solver.C * solver.growth.ratio_power(t, s, spec.a) * solver.growth.power(s, -spec.eps)
    ratios = np.abs(x_phi.values - x_psi.values)[:, nonzero] / (
        scale[:, None] * np.abs(solver.xi[nonzero])[None, :] * distance
    )
    row, column = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
    max_ratio = float(ratios[row, column])
    return BoundReport(
        passed=max_ratio <= threshold,
        max_ratio=max_ratio,
        threshold=threshold,
        worst={"t": float(t[row]), "xi": float(solver.xi[nonzero][column])},
        details={"graph_distance": distance},
    )


def trajectory_class_report(x: TrajectoryFamily, C: float, rtol: float = 1e-9) -> ValidationReport:
    s, t, xi = x.base, x.times, x.xi
    zero = xi == 0.0
    envelope = C * x.growth.ratio_power(t, s, x.a) * x.growth.power(s, x.eps)
    envelope_second = C * x.growth.ratio_power(t, s, x.a) * x.growth.power(s, 2.0 * x.eps)

    spacing = np.diff(xi)
    slopes = np.diff(x.values, axis=1) / spacing
    curvature = np.diff(slopes, axis=1) / spacing[1:]
    lipschitz = float(np.max(np.abs(slopes) / envelope[:, None]))
    bound = float(np.max(np.abs(x.values[:, ~zero]) / (envelope[:, None] * np.abs(xi[~zero]))))
    derivative = float(np.max(np.abs(curvature) / envelope_second[:, None]))

    checks = {
        "base_slice": bool(np.array_equal(x.values[0], xi)),
        "zero_column": bool(np.all(x.values[:, zero] == 0.0)),
        "lipschitz": lipschitz <= 1.0 + rtol,
        "bound": bound <= 1.0 + rtol,
        "derivative_lipschitz": derivative <= 1.0 + rtol,
    }
    details = {"lipschitz_ratio": lipschitz, "bound_ratio": bound, "derivative_ratio": derivative, "C": C}
    return ValidationReport(checks=checks, details=details)


def graph_class_report(phi: GraphFunction, slack: float = 1e-6) -> ValidationReport:
    xi = phi.xi_grid
    zero = xi == 0.0
    spacing = np.diff(xi)
    norms = sum_norm(phi.values)
    slopes = np.diff(phi.values, axis=1) / spacing[None, :, None]
    lipschitz = float(np.max(sum_norm(slopes)))
    curvature = float(np.max(sum_norm(np.diff(slopes, axis=1)) / spacing[None, 1:]))
    bound = float(np.max(norms[:, ~zero] / np.abs(xi[~zero])))

    small = (~zero) & (np.abs(xi) <= 4.0 * spacing[0] + GRID_ATOL)
    flatness = float(np.max(norms[:, small] / xi[small] ** 2))

    checks = {
        "zero_column": bool(np.all(phi.values[:, zero] == 0.0)),
        "lipschitz": lipschitz <= 1.0 + slack,
        "bound": bound <= 1.0 + 1e-12,
        "derivative_lipschitz": curvature <= 1.0 + slack,
        "flatness_finite": bool(np.isfinite(flatness)),
    }
    details = {"lipschitz": lipschitz, "bound_ratio": bound, "derivative_lipschitz": curvature, "C_flat": flatness}
    return ValidationReport(checks=checks, details=details)


def grid_refinement_check(
    sys: LinearSystem, f: Perturbation, cfg: SolverConfig, levels: int = 3
) -> ValidationReport:
    """Solve with t_step, t_step/2, ...; successive changes must shrink like a second-order rule.

    Passes when every change is below 4x the Richardson estimate change/3 of the previous refinement.
    """
    if levels < 3:
        raise ValueError(f"`levels` must be at least 3, got {levels}.")
    graphs = []
    for level in range(levels):
        graph, _ = solve_manifold(sys, f, cfg.replace(t_step=cfg.t_step / 2**level))
        graphs.append(graph)

    changes = []
    for coarse, fine in zip(graphs[:-1], graphs[1:]):
        restricted = GraphFunction(fine.values[::2], coarse.s_grid, coarse.xi_grid)
        changes.append(weighted_norm_X(restricted - coarse))

    richardson = [change / 3.0 for change in changes[:-1]]
    passed = all(later <= 4.0 * estimate for later, estimate in zip(changes[1:], richardson))
    details = {
        "t_steps": [cfg.t_step / 2**level for level in range(levels)],
        "changes": changes,
        "richardson_estimates": richardson,
        "norms": [weighted_norm_X(graph) for graph in graphs],
    }
    return ValidationReport(checks={"second_order": bool(passed)}, details=details)
