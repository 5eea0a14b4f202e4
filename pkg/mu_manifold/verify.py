"""Checks of a computed graph against the nonlinear flow v' = A(t) v + f(t, v)."""

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from diffusers.utils import get_logger
from scipy.integrate import solve_ivp
from scipy.optimize import bisect

from .linsys import DichotomySpec, LinearSystem
from .manifold import GRID_ATOL, GraphFunction, LyapunovPerronSolver, SolverConfig
from .perturb import Perturbation
from .utils import BoundReport, sum_norm, to_jsonable


logger = get_logger(__name__)

INTEGRATE_RTOL = 1e-10
INTEGRATE_ATOL = 1e-12
ESCAPE_RADIUS = 1e6
FLAT_LEVEL = 1e-14
TANGENCY_MIN_SLOPE = 1.5
BUDGET_NOTE = (
    "The invariance budget is assembled from solver diagnostics (10 x tol_outer, the truncation tail bound "
    "over the horizon and the trapezoid/Simpson gap of the last sweep); it is not a proven error bound."
)


@dataclass
class SemiflowSample:
    """States of one or many trajectories started at `base_time`; `states` has shape (T, n) or (T, B, n).

    Rows after an escape or a failed integration are NaN; `final_time`/`final_state` hold the last valid point.
    A batch in which some trajectory escapes is integrated sample by sample, so only the escaping samples
    (listed in `escaped_samples`) lose rows; `final_time` is then the earliest stop.
    """

    base_time: float
    initial_state: np.ndarray
    times: np.ndarray
    states: np.ndarray
    final_time: float
    final_state: np.ndarray
    escaped: bool = False
    escape_time: Optional[float] = None
    message: str = ""
    escaped_samples: List[int] = field(default_factory=list)

    def to_frame(self, phi_interp: Optional[np.ndarray] = None) -> pd.DataFrame:
        states = self.states if self.states.ndim == 3 else self.states[:, None, :]
        num_times, num_samples, n = states.shape
        columns: Dict[str, Any] = {
            "t": np.repeat(self.times, num_samples),
            "sample": np.tile(np.arange(num_samples), num_times),
            "x": states[..., 0].ravel(),
        }
        for k in range(1, n):
            columns[f"y_{k - 1}"] = states[..., k].ravel()
        if phi_interp is not None:
            phi_interp = phi_interp.reshape(num_times, num_samples, -1)
            for k in range(phi_interp.shape[-1]):
                columns[f"phi_interp_{k}"] = phi_interp[..., k].ravel()
        return pd.DataFrame(columns)


def integrate_nonlinear_batch(
    sys: LinearSystem,
    f: Perturbation,
    s: float,
    initial_states: np.ndarray,
    t_grid: Sequence[float],
    method: str = "RK45",
    rtol: float = INTEGRATE_RTOL,
    atol: float = INTEGRATE_ATOL,
    escape_radius: float = ESCAPE_RADIUS,
) -> SemiflowSample:
    """Integrate many initial states as one stacked system so they share the adaptive steps."""
    initial_states = np.atleast_2d(np.asarray(initial_states, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0 or abs(t_grid[0] - s) > GRID_ATOL:
        raise ValueError(f"`t_grid` must start at the base time {s}.")
    batch, n = initial_states.shape
    if n != sys.dim_total:
        raise ValueError(f"Initial states have dimension {n}, the system has {sys.dim_total}.")

    states = np.full((len(t_grid), batch, n), np.nan)
    states[0] = initial_states
    if t_grid.size == 1:
        return SemiflowSample(s, initial_states, t_grid, states, s, initial_states.copy())

    def rhs(t, w):
        v = w.reshape(batch, n)
        return (v @ sys.coefficient(t).T + f(t, v)).ravel()

    def escape(t, w):
        return escape_radius - np.max(np.abs(w))

    escape.terminal = True
    solution = solve_ivp(
        rhs, (s, t_grid[-1]), initial_states.ravel(), method=method, t_eval=t_grid, rtol=rtol, atol=atol, events=escape
    )
    reached = solution.y.T.reshape(-1, batch, n)
    states[: len(reached)] = reached
    states[0] = initial_states

    escaped = solution.status != 0
    if escaped and batch > 1:
        return _integrate_separately(sys, f, s, initial_states, t_grid, method, rtol, atol, escape_radius)
    escape_time = None
    if solution.status == 1:
        escape_time = float(solution.t_events[0][0])
        final_time, final_state = escape_time, solution.y_events[0][0].reshape(batch, n)
        logger.debug(f"Trajectory batch left the ball of radius {escape_radius} at t={escape_time}.")
    elif solution.status == -1:
        final_time = float(solution.t[-1]) if solution.t.size else s
        final_state = reached[-1] if len(reached) else initial_states.copy()
        escape_time = final_time
        logger.warning(f"Nonlinear integration failed at t={final_time}: {solution.message}")
    else:
        final_time, final_state = float(t_grid[-1]), reached[-1]
    return SemiflowSample(
        base_time=s,
        initial_state=initial_states,
        times=t_grid,
        states=states,
        final_time=final_time,
        final_state=final_state,
        escaped=escaped,
        escape_time=escape_time,
        message=solution.message,
        escaped_samples=[0] if escaped else [],
    )


def _integrate_separately(
    sys: LinearSystem,
    f: Perturbation,
    s: float,
    initial_states: np.ndarray,
    t_grid: np.ndarray,
    method: str,
    rtol: float,
    atol: float,
    escape_radius: float,
) -> SemiflowSample:
    samples = [
        integrate_nonlinear_batch(sys, f, s, state[None, :], t_grid, method, rtol, atol, escape_radius)
        for state in initial_states
    ]
    escaped_samples = [k for k, sample in enumerate(samples) if sample.escaped]
    escape_times = [samples[k].escape_time for k in escaped_samples]
    logger.debug(f"{len(escaped_samples)} of {len(samples)} trajectories left the ball of radius {escape_radius}.")
    return SemiflowSample(
        base_time=s,
        initial_state=initial_states,
        times=t_grid,
        states=np.concatenate([sample.states for sample in samples], axis=1),
        final_time=min(sample.final_time for sample in samples),
        final_state=np.concatenate([sample.final_state for sample in samples], axis=0),
        escaped=bool(escaped_samples),
        escape_time=min(escape_times) if escape_times else None,
        message="; ".join(sorted({samples[k].message for k in escaped_samples})),
        escaped_samples=escaped_samples,
    )


def integrate_nonlinear(
    sys: LinearSystem, f: Perturbation, s: float, v_s: Sequence[float], t_grid: Sequence[float], **kwargs: Any
) -> SemiflowSample:
    sample = integrate_nonlinear_batch(sys, f, s, np.asarray(v_s, dtype=float)[None, :], t_grid, **kwargs)
    sample.initial_state = sample.initial_state[0]
    sample.states = sample.states[:, 0]
    sample.final_state = sample.final_state[0]
    return sample


def _horizon_times(phi: GraphFunction, cfg: SolverConfig, horizon: Optional[float]) -> np.ndarray:
    s = float(phi.s_grid[0])
    limit = 0.5 * (float(phi.s_grid[-1]) - s)
    horizon = limit if horizon is None else float(horizon)
    if horizon <= 0 or horizon > limit + GRID_ATOL:
        raise ValueError(f"`horizon` must lie in (0, {limit}], half the solved interval; got {horizon}.")
    return phi.s_grid[phi.s_grid <= s + horizon + GRID_ATOL]


def _graph_start(phi: GraphFunction, xi: np.ndarray, offset: float = 0.0) -> np.ndarray:
    start, _ = phi.evaluate(np.full(1, phi.s_grid[0]), xi[None, :])
    return np.concatenate([xi[:, None], start[0] + offset], axis=-1)


@dataclass
class ResidualReport:
    passed: bool
    max_residual: float
    budget: Dict[str, float]
    tail_at_base: float
    horizon: float
    offset: float
    per_sample: List[Dict[str, Any]]
    excluded: List[float] = field(default_factory=list)
    note: str = BUDGET_NOTE
    trajectories: Optional[pd.DataFrame] = None

    @property
    def final_residuals(self) -> np.ndarray:
        return np.array([sample["final_residual"] for sample in self.per_sample])

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable(
            {
                "pass": self.passed,
                "max_residual": self.max_residual,
                "budget": self.budget,
                "tail_at_base": self.tail_at_base,
                "horizon": self.horizon,
                "offset": self.offset,
                "excluded": self.excluded,
                "per_sample": self.per_sample,
                "note": self.note,
            }
        )


def invariance_residual(
    phi: GraphFunction,
    sys: LinearSystem,
    f: Perturbation,
    cfg: SolverConfig,
    horizon: Optional[float] = None,
    offset: float = 0.0,
    xi_values: Optional[Sequence[float]] = None,
) -> ResidualReport:
    """max over t of |y(t) - phi(t, x(t))| along trajectories started on (or `offset` above) the graph."""
    times = _horizon_times(phi, cfg, horizon)
    xi = phi.xi_grid if xi_values is None else np.asarray(xi_values, dtype=float)
    s = float(times[0])

    sample = integrate_nonlinear_batch(sys, f, s, _graph_start(phi, xi, offset), times)
    x, y = sample.states[..., 0], sample.states[..., 1:]
    valid = np.isfinite(x)
    on_graph, outside = phi.evaluate(times, np.where(valid, x, 0.0))
    residual = np.where(valid, sum_norm(y - on_graph), np.nan)

    per_sample, excluded, included = [], [], []
    for k, value in enumerate(xi):
        left_grid = bool(np.any(outside[valid[:, k], k]))
        per_sample.append(
            {
                "xi": float(value),
                "max_residual": float(np.nanmax(residual[:, k])),
                "final_residual": float(residual[-1, k]),
                "left_grid": left_grid,
                "escaped": k in sample.escaped_samples,
            }
        )
        if left_grid:
            excluded.append(float(value))
        else:
            included.append(k)
    if excluded:
        logger.warning(f"{len(excluded)} trajectories left the xi-grid and are excluded from the residual.")
    if sample.escaped:
        logger.warning(f"Trajectories escaped at t={sample.escape_time}; residual after that is not measured.")

    tails = phi.metadata.get("tail_bounds")
    if tails is None:
        tails = LyapunovPerronSolver(sys, f, cfg).tail_bounds().tolist()
    tails = np.asarray(tails, dtype=float)[: len(times)]
    budget = {
        "tol_outer_term": 10.0 * cfg.tol_outer,
        "tail_bound": float(np.max(tails)) if tails.size else 0.0,
        "quadrature_estimate": float(phi.metadata.get("quadrature_estimate", 0.0)),
    }
    budget["total"] = sum(budget.values())
    # reported next to the budget, not part of it
    tail_at_base = float(tails[0]) if tails.size else 0.0

    max_residual = float(np.nanmax(residual[:, included])) if included else math.nan
    trajectories = sample.to_frame(on_graph)
    return ResidualReport(
        passed=bool(included) and max_residual <= budget["total"],
        max_residual=max_residual,
        budget=budget,
        tail_at_base=tail_at_base,
        horizon=float(times[-1] - s),
        offset=offset,
        per_sample=per_sample,
        excluded=excluded,
        trajectories=trajectories,
    )


def default_pairs(xi_grid: np.ndarray, count: int = 50, seed: int = 0) -> List[Tuple[float, float]]:
    candidates = list(itertools.combinations(range(len(xi_grid)), 2))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
    return [(float(xi_grid[candidates[k][0]]), float(xi_grid[candidates[k][1]])) for k in sorted(chosen)]


def decay_check(
    phi: GraphFunction,
    sys: LinearSystem,
    f: Perturbation,
    cfg: SolverConfig,
    pairs: Optional[Sequence[Tuple[float, float]]] = None,
    horizon: Optional[float] = None,
) -> BoundReport:
    """Normalized distances of on-graph trajectory pairs, plus their xi-derivative quotients.

    Distances are divided by (mu(t)/mu(s))^a mu(s)^eps |xi - xi'| and compared with 2C; differences of
    the xi-derivatives are divided by (mu(t)/mu(s))^a mu(s)^(2 eps) |xi - xi'| and compared with 2C + C^2.
    """
    solver = LyapunovPerronSolver(sys, f, cfg)
    spec, growth, C = solver.spec, solver.growth, solver.C
    times = _horizon_times(phi, cfg, horizon)
    s = float(times[0])
    pairs = default_pairs(phi.xi_grid) if pairs is None else [(float(p), float(q)) for p, q in pairs]

    lo, hi = phi.xi_grid[0] - GRID_ATOL, phi.xi_grid[-1] + GRID_ATOL
    if any(not (lo <= value <= hi) for pair in pairs for value in pair):
        raise ValueError("Every pair must lie inside the xi-grid.")
    distinct = [(p, q) for p, q in pairs if p != q]
    skipped = len(pairs) - len(distinct)
    threshold = 2.0 * C + cfg.grid_slack
    derivative_threshold = 2.0 * C + C * C + cfg.grid_slack
    if not distinct:
        return BoundReport(passed=True, max_ratio=0.0, threshold=threshold, skipped=True, details={"skipped_pairs": skipped})

    xi = np.unique([value for pair in distinct for value in pair])
    # one-sided step toward the grid interior
    eta = 1e-3 * (phi.xi_grid[1] - phi.xi_grid[0]) * np.where(xi > 0, -1.0, 1.0)
    starts = np.concatenate([_graph_start(phi, xi), _graph_start(phi, xi + eta)], axis=0)
    sample = integrate_nonlinear_batch(sys, f, s, starts, times)
    states = sample.states[:, : len(xi)]
    derivatives = (sample.states[:, len(xi):] - states) / eta[None, :, None]
    column = {value: k for k, value in enumerate(xi)}
    # a pair is truncated when either trajectory or its shifted copy escaped
    escaped = {k % len(xi) for k in sample.escaped_samples}
    truncated = [(p, q) for p, q in distinct if {column[p], column[q]} & escaped]
    if truncated:
        logger.warning(f"{len(truncated)} of {len(distinct)} pairs escaped before t={float(times[-1])}; their later rows are not measured.")

    decay = growth.ratio_power(times, s, spec.a) * growth.power(s, spec.eps)
    decay_second = growth.ratio_power(times, s, spec.a) * growth.power(s, 2.0 * spec.eps)
    best = (-math.inf, None)
    best_derivative = -math.inf
    for p, q in distinct:
        i, j = column[p], column[q]
        gap = abs(p - q)
        ratio = sum_norm(states[:, i] - states[:, j]) / (decay * gap)
        derivative_ratio = sum_norm(derivatives[:, i] - derivatives[:, j]) / (decay_second * gap)
        k = int(np.nanargmax(ratio))
        if ratio[k] > best[0]:
            best = (float(ratio[k]), {"pair": [p, q], "t": float(times[k])})
        best_derivative = max(best_derivative, float(np.nanmax(derivative_ratio)))

    passed = best[0] <= threshold and best_derivative <= derivative_threshold
    return BoundReport(
        passed=bool(passed),
        max_ratio=best[0],
        threshold=threshold,
        worst=best[1],
        details={
            "K": 2.0 * C,
            "derivative_ratio": best_derivative,
            "derivative_threshold": derivative_threshold,
            "num_pairs": len(distinct),
            "skipped_pairs": skipped,
            "truncated_pairs": len(truncated),
            "escaped_xi": sorted(float(xi[k]) for k in escaped),
            "horizon": float(times[-1] - s),
        },
    )


@dataclass
class TangencyReport:
    passed: bool
    slope: Optional[float]
    flat: bool
    points: List[Tuple[float, float]]
    min_slope: float = TANGENCY_MIN_SLOPE

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pass": self.passed,
            "slope": self.slope,
            "flat": self.flat,
            "note": "flat to machine precision" if self.flat else "",
            "min_slope": self.min_slope,
            "points": [list(point) for point in self.points],
        }


def tangency_check(phi: GraphFunction, s: Optional[float] = None) -> TangencyReport:
    """Fit log |phi(s, xi)| against log |xi| near 0; a slope of at least 1.5 means phi vanishes superlinearly."""
    index = 0 if s is None else phi.s_index(s)
    xi = phi.xi_grid
    step = xi[1] - xi[0]
    small = (xi != 0.0) & (np.abs(xi) <= 4.0 * step + GRID_ATOL)
    if np.count_nonzero(small) < 4:
        raise ValueError("Tangency needs at least four nonzero grid points with |xi| <= 4 h_xi.")
    norms = sum_norm(phi.values[index, small])
    points = list(zip(xi[small].tolist(), norms.tolist()))
    if np.max(norms) < FLAT_LEVEL:
        return TangencyReport(passed=True, slope=None, flat=True, points=points)

    positive = norms > 0
    if np.count_nonzero(positive) < 2:
        return TangencyReport(passed=True, slope=None, flat=True, points=points)
    slope = float(np.polyfit(np.log(np.abs(xi[small][positive])), np.log(norms[positive]), 1)[0])
    return TangencyReport(passed=slope >= TANGENCY_MIN_SLOPE, slope=slope, flat=False, points=points)


@dataclass
class ShootingResult:
    xi: float
    eta: float
    bracket: Tuple[float, float]
    iterations: int
    t_esc: float
    bounded: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "xi": self.xi,
            "eta": self.eta,
            "bracket": list(self.bracket),
            "iterations": self.iterations,
            "t_esc": self.t_esc,
            "bounded": self.bounded,
        }


def shooting_oracle(
    sys: LinearSystem,
    f: Perturbation,
    s: float,
    xi: float,
    bracket: Tuple[float, float] = (-1.0, 1.0),
    tol: float = 1e-8,
    t_esc: Optional[float] = None,
    method: str = "DOP853",
    spec: Optional[DichotomySpec] = None,
) -> ShootingResult:
    """Bisect on the unstable coordinate eta until the forward solution from (xi, eta) stays bounded.

    Trajectories are classified by the sign of y(t_esc) (mu(t_esc)/mu(s))^-b, which tends to
    +-infinity off the manifold and stays bounded on it. `spec` defaults to the dichotomy the system carries.
    """
    if sys.dim_total != 2 or sys.splitting.unstable_dim != 1:
        raise ValueError("The shooting oracle needs a two-dimensional system with a scalar unstable block.")
    spec = spec if spec is not None else getattr(sys, "dichotomy", None)
    if spec is None:
        raise ValueError("The linear system carries no dichotomy; pass `spec` explicitly.")
    growth = f.growth
    t_esc = s + 20.0 if t_esc is None else float(t_esc)
    if not t_esc > s:
        raise ValueError(f"`t_esc` must exceed the base time {s}, got {t_esc}.")

    def normalized_end(eta: float) -> float:
        sample = integrate_nonlinear(sys, f, s, [xi, eta], [s, t_esc], method=method)
        return float(sample.final_state[1] * growth.ratio_power(sample.final_time, s, -spec.b))

    lower, upper = bracket
    value_lower, value_upper = normalized_end(lower), normalized_end(upper)
    if value_lower == 0.0 or value_upper == 0.0:
        root, iterations = (lower if value_lower == 0.0 else upper), 0
    elif value_lower * value_upper > 0:
        raise ValueError(f"Bracket {bracket} shows no sign change at xi={xi}; widen the bracket.")
    else:
        root, info = bisect(normalized_end, lower, upper, xtol=tol, full_output=True)
        iterations = info.iterations

    # bounded: |y| stays within twice the decayed stable envelope plus the growth of a tol-sized miss
    times = np.linspace(s, t_esc, 401)
    sample = integrate_nonlinear(sys, f, s, [xi, root], times, method=method)
    envelope = 2.0 * spec.D * growth.ratio_power(times, s, spec.a) * growth.power(s, spec.eps) * abs(xi)
    miss = growth.ratio_power(times, s, spec.b) * growth.power(times, spec.eps) * tol
    bounded = bool(np.all(np.abs(sample.states[:, 1]) <= envelope + miss))
    return ShootingResult(
        xi=float(xi), eta=float(root), bracket=(float(lower), float(upper)), iterations=int(iterations),
        t_esc=t_esc, bounded=bounded,
    )
