"""Linear evolution operators, the closed-form oscillating example and dichotomy checks."""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from diffusers.utils import get_logger
from scipy.integrate import solve_ivp

from .growth import GrowthRate
from .utils import operator_norm, parallel_map, uniform_grid


logger = get_logger(__name__)

PROPAGATE_RTOL = 1e-10
PROPAGATE_ATOL = 1e-12
DICHOTOMY_SLACK = 1e-9


class IntegrationError(RuntimeError):
    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last valid time {last_time})")
        self.last_time = last_time


@dataclass(frozen=True)
class DichotomySpec:
    D: float
    a: float
    b: float
    eps: float

    def __post_init__(self):
        if self.D < 1:
            raise ValueError(f"Dichotomy constant `D` must be at least 1, got {self.D}.")
        if not self.a < 0:
            raise ValueError(f"Stable exponent `a` must be negative, got {self.a}.")
        if self.b < 0:
            raise ValueError(f"Unstable exponent `b` must be nonnegative, got {self.b}.")
        if self.eps < 0:
            raise ValueError(f"Nonuniformity exponent `eps` must be nonnegative, got {self.eps}.")

    @property
    def has_gap(self) -> bool:
        return self.a + self.eps < self.b

    @property
    def gap(self) -> float:
        """|a - b - 2 eps|, the rate separating the stable envelope from the unstable one."""
        return abs(self.a - self.b - 2.0 * self.eps)

    def stable_bound(self, g: GrowthRate, t: Any, s: Any) -> np.ndarray:
        return self.D * g.ratio_power(t, s, self.a) * g.power(s, self.eps)

    def unstable_inverse_bound(self, g: GrowthRate, t: Any, s: Any) -> np.ndarray:
        return self.D * g.ratio_power(t, s, -self.b) * g.power(t, self.eps)

    def to_dict(self) -> Dict[str, float]:
        return {"D": self.D, "a": self.a, "b": self.b, "eps": self.eps}


class Splitting:
    """Projections P(t) onto E(t) and Q(t) = Id - P(t) onto F(t).

    Without `projector_P` the splitting is the time-independent coordinate projection onto the
    first `stable_dim` coordinates.
    """

    def __init__(
        self,
        dim_total: int,
        stable_dim: Optional[int] = None,
        projector_P: Optional[Callable[[float], np.ndarray]] = None,
    ):
        if dim_total < 1:
            raise ValueError(f"`dim_total` must be positive, got {dim_total}.")
        coordinate_split = projector_P is None
        if coordinate_split:
            if stable_dim is None or not 0 <= stable_dim <= dim_total:
                raise ValueError(f"`stable_dim` must lie in [0, {dim_total}] for a coordinate splitting.")
            diagonal = np.zeros(dim_total)
            diagonal[:stable_dim] = 1.0
            coordinate = np.diag(diagonal)
            projector_P = lambda t: coordinate  # noqa: E731

        self.dim_total = dim_total
        self.stable_dim = stable_dim if coordinate_split else None
        self._projector_P = projector_P

    @property
    def is_coordinate(self) -> bool:
        return self.stable_dim is not None

    @property
    def unstable_dim(self) -> Optional[int]:
        return None if self.stable_dim is None else self.dim_total - self.stable_dim

    def P(self, t: float) -> np.ndarray:
        return np.asarray(self._projector_P(t), dtype=float)

    def Q(self, t: float) -> np.ndarray:
        return np.eye(self.dim_total) - self.P(t)

    def projection_residual(self, times: Sequence[float]) -> float:
        residual = 0.0
        for t in times:
            P = self.P(t)
            residual = max(residual, float(np.max(np.abs(P @ P - P))), float(np.max(np.abs(P + self.Q(t) - np.eye(self.dim_total)))))
        return residual


@dataclass(frozen=True)
class GeneralLinearSystem:
    dim_total: int
    coefficient: Callable[[float], np.ndarray]
    splitting: Splitting
    dichotomy: Optional[DichotomySpec] = None

    def __post_init__(self):
        if self.splitting.dim_total != self.dim_total:
            raise ValueError("`splitting` and `dim_total` disagree on the state dimension.")
        sample = np.asarray(self.coefficient(0.0))
        if sample.shape != (self.dim_total, self.dim_total):
            raise ValueError(f"`coefficient` must return a {self.dim_total}x{self.dim_total} matrix, got {sample.shape}.")

    def stable_fundamental(self, times: np.ndarray) -> np.ndarray:
        k = self._require_coordinate()
        return propagate_matrix(self, times[0], times)[:, :k, :k]

    def unstable_fundamental(self, times: np.ndarray) -> np.ndarray:
        k = self._require_coordinate()
        return propagate_matrix(self, times[0], times)[:, k:, k:]

    def _require_coordinate(self) -> int:
        if not self.splitting.is_coordinate:
            raise ValueError("Fundamental blocks need a coordinate splitting.")
        return self.splitting.stable_dim


@dataclass(frozen=True)
class ClosedFormExample:
    """The scalar pair u' = alpha(t) u, v' = beta(t) v whose evolution is known in closed form.

    U(t,s) = (mu(t)/mu(s))^a exp(w log mu(t) (cos t - 1) - w log mu(s) (cos s - 1)), w = eps/2, and V the
    same with exponent b and the oscillating terms negated. The unstable coefficient is b mu'/mu, the
    one consistent with that V.
    """

    growth: GrowthRate
    a: float
    b: float
    eps: float

    def __post_init__(self):
        if not self.a < 0:
            raise ValueError(f"Stable exponent `a` must be negative, got {self.a}.")
        if self.b < 0:
            raise ValueError(f"Unstable exponent `b` must be nonnegative, got {self.b}.")
        if self.eps < 0:
            raise ValueError(f"Nonuniformity exponent `eps` must be nonnegative, got {self.eps}.")

    dim_total = 2

    @property
    def omega(self) -> float:
        return self.eps / 2.0

    @property
    def splitting(self) -> Splitting:
        return Splitting(2, stable_dim=1)

    @property
    def dichotomy(self) -> DichotomySpec:
        return DichotomySpec(D=1.0, a=self.a, b=self.b, eps=self.eps)

    def _oscillation(self, t: np.ndarray) -> np.ndarray:
        return self.omega * self.growth.log(t) * (np.cos(t) - 1.0)

    def _log_stable(self, t: Any) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.a * self.growth.log(t) + self._oscillation(t)

    def _log_unstable(self, t: Any) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.b * self.growth.log(t) - self._oscillation(t)

    def U_scalar(self, t: Any, s: Any) -> np.ndarray:
        return np.exp(self._log_stable(t) - self._log_stable(s))

    def V_scalar(self, t: Any, s: Any) -> np.ndarray:
        return np.exp(self._log_unstable(t) - self._log_unstable(s))

    def Vinv_scalar(self, t: Any, s: Any) -> np.ndarray:
        return np.exp(self._log_unstable(s) - self._log_unstable(t))

    def stable_rate(self, t: Any) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        log_rate = self.growth.log_rate(t)
        return self.a * log_rate + self.omega * (log_rate * (np.cos(t) - 1.0) - self.growth.log(t) * np.sin(t))

    def unstable_rate(self, t: Any) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        log_rate = self.growth.log_rate(t)
        return self.b * log_rate - self.omega * (log_rate * (np.cos(t) - 1.0) - self.growth.log(t) * np.sin(t))

    def coefficient(self, t: float) -> np.ndarray:
        return np.diag([float(self.stable_rate(t)), float(self.unstable_rate(t))])

    def stable_fundamental(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return self.U_scalar(times, times[0]).reshape(-1, 1, 1)

    def unstable_fundamental(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return self.V_scalar(times, times[0]).reshape(-1, 1, 1)

    def as_linear_system(self) -> GeneralLinearSystem:
        return GeneralLinearSystem(
            dim_total=2, coefficient=self.coefficient, splitting=self.splitting, dichotomy=self.dichotomy
        )


LinearSystem = Union[GeneralLinearSystem, ClosedFormExample]


def example_system(g: GrowthRate, a: float, b: float, eps: float) -> ClosedFormExample:
    return ClosedFormExample(growth=g, a=a, b=b, eps=eps)


def propagate(
    sys: LinearSystem,
    s: float,
    t: float,
    v: Sequence[float],
    rtol: float = PROPAGATE_RTOL,
    atol: float = PROPAGATE_ATOL,
    method: str = "RK45",
) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if t < s:
        raise ValueError(f"`propagate` runs forward in time; got s={s} > t={t}.")
    if not np.all(np.isfinite(v)):
        raise ValueError("Initial state `v` must be finite.")
    if t == s:
        return v.copy()

    solution = solve_ivp(lambda r, w: sys.coefficient(r) @ w, (s, t), v, method=method, rtol=rtol, atol=atol)
    if not solution.success:
        raise IntegrationError(f"Linear propagation failed: {solution.message}", last_time=float(solution.t[-1]))
    return solution.y[:, -1]


def propagate_matrix(
    sys: LinearSystem,
    s: float,
    times: Sequence[float],
    rtol: float = PROPAGATE_RTOL,
    atol: float = 1e-14,
) -> np.ndarray:
    """Evolution operators T(t_i, s) for monotone `times` starting at s (backward in time allowed)."""
    times = np.asarray(times, dtype=float)
    n = sys.dim_total
    if times[0] != s:
        raise ValueError(f"`times` must start at the base time {s}, got {times[0]}.")
    identity = np.eye(n)
    if times.size == 1:
        return identity[None]

    def rhs(r, w):
        return (sys.coefficient(r) @ w.reshape(n, n)).ravel()

    solution = solve_ivp(
        rhs, (s, times[-1]), identity.ravel(), method="RK45", t_eval=times, rtol=rtol, atol=atol
    )
    if not solution.success:
        raise IntegrationError(f"Matrix propagation failed: {solution.message}", last_time=float(solution.t[-1]))
    return solution.y.T.reshape(-1, n, n)


def evolution_operator(sys: LinearSystem, t: float, s: float) -> np.ndarray:
    return propagate_matrix(sys, s, [s, t])[-1]


def unstable_inverse(sys: LinearSystem, t: float, s: float) -> np.ndarray:
    """V(t,s)^-1 as an operator on F(t) -> F(s); backward integration unless a closed form exists."""
    if isinstance(sys, ClosedFormExample):
        return np.atleast_2d(sys.Vinv_scalar(t, s))
    backward = propagate_matrix(sys, t, [t, s])[-1]
    restricted = sys.splitting.Q(s) @ backward @ sys.splitting.Q(t)
    if sys.splitting.is_coordinate:
        k = sys.splitting.stable_dim
        return restricted[k:, k:]
    return restricted


def commutation_residual(sys: LinearSystem, pairs: Sequence[Tuple[float, float]]) -> float:
    residual = 0.0
    for t, s in pairs:
        T = evolution_operator(sys, t, s)
        P_t, P_s = sys.splitting.P(t), sys.splitting.P(s)
        residual = max(residual, float(np.max(np.abs(P_t @ T - T @ P_s))))
    return residual


@dataclass(frozen=True)
class PairGrid:
    t_min: float
    t_max: float
    step: float

    @property
    def pairs(self) -> np.ndarray:
        times = uniform_grid(self.t_min, self.t_max, self.step)
        t, s = np.meshgrid(times, times, indexing="ij")
        mask = t >= s
        return np.stack([t[mask], s[mask]], axis=-1)

    def to_dict(self) -> Dict[str, float]:
        return {"t_min": self.t_min, "t_max": self.t_max, "step": self.step}


def make_pair_grid(t_max: float, step: float, t_min: float = 0.0) -> PairGrid:
    return PairGrid(t_min=t_min, t_max=t_max, step=step)


@dataclass
class DichotomyReport:
    passed: bool
    D_min_U: float
    D_min_V: float
    worst_pair_U: List[float]
    worst_pair_V: List[float]
    grid_spec: Dict[str, Any]
    degenerate: bool = False
    non_finite: List[List[float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pass": self.passed,
            "D_min_U": self.D_min_U,
            "D_min_V": self.D_min_V,
            "worst_pair_U": self.worst_pair_U,
            "worst_pair_V": self.worst_pair_V,
            "grid_spec": self.grid_spec,
            "degenerate": self.degenerate,
            "non_finite": self.non_finite,
        }


def check_dichotomy(
    U: Callable[[float, float], Any],
    Vinv: Callable[[float, float], Any],
    spec: DichotomySpec,
    g: GrowthRate,
    grid: Union[PairGrid, np.ndarray],
    num_workers: Optional[int] = None,
) -> DichotomyReport:
    if isinstance(grid, PairGrid):
        pairs, grid_spec = grid.pairs, grid.to_dict()
    else:
        pairs = np.asarray(grid, dtype=float).reshape(-1, 2)
        grid_spec = {"num_pairs": int(len(pairs))}
    if len(pairs) == 0:
        raise ValueError("`grid` holds no (t, s) pairs.")
    if np.any(pairs[:, 0] < pairs[:, 1]) or np.any(pairs[:, 1] < 0):
        raise ValueError("Every grid pair must satisfy t >= s >= 0.")

    def norms(indices: np.ndarray) -> np.ndarray:
        out = np.empty((len(indices), 2))
        for row, index in enumerate(indices):
            t, s = pairs[index]
            with np.errstate(all="ignore"):
                out[row] = operator_norm(U(t, s)), operator_norm(Vinv(t, s))
        return out

    chunks = np.array_split(np.arange(len(pairs)), min(64, len(pairs)))
    values = np.concatenate(parallel_map(norms, chunks, num_workers), axis=0)

    t, s = pairs[:, 0], pairs[:, 1]
    with np.errstate(all="ignore"):
        ratio_U = values[:, 0] / (g.ratio_power(t, s, spec.a) * g.power(s, spec.eps))
        ratio_V = values[:, 1] / (g.ratio_power(t, s, -spec.b) * g.power(t, spec.eps))

    bad = ~(np.isfinite(ratio_U) & np.isfinite(ratio_V))
    non_finite = pairs[bad].tolist()
    if non_finite:
        logger.warning(f"{len(non_finite)} grid pairs produced non-finite operator norms; first: {non_finite[0]}.")

    ratio_U = np.where(bad, -np.inf, ratio_U)
    ratio_V = np.where(bad, -np.inf, ratio_V)
    worst_U, worst_V = int(np.argmax(ratio_U)), int(np.argmax(ratio_V))
    D_min_U = float(max(ratio_U[worst_U], 0.0))
    D_min_V = float(max(ratio_V[worst_V], 0.0))

    passed = not non_finite and D_min_U <= spec.D + DICHOTOMY_SLACK and D_min_V <= spec.D + DICHOTOMY_SLACK
    return DichotomyReport(
        passed=bool(passed),
        D_min_U=D_min_U,
        D_min_V=D_min_V,
        worst_pair_U=pairs[worst_U].tolist(),
        worst_pair_V=pairs[worst_V].tolist(),
        grid_spec=grid_spec,
        degenerate=D_min_U == 0.0 or D_min_V == 0.0,
        non_finite=non_finite,
    )


def nonuniformity_witness(ex: ClosedFormExample, k_max: int) -> pd.DataFrame:
    """Ratios r_k = |U(2k pi, 2k pi - pi)| / (mu(2k pi)/mu(2k pi - pi))^a for k = 1..k_max."""
    if k_max < 1:
        raise ValueError(f"`k_max` must be at least 1, got {k_max}.")
    k = np.arange(1, k_max + 1)
    t = 2.0 * np.pi * k
    s = t - np.pi
    ratio = np.abs(ex.U_scalar(t, s)) / ex.growth.ratio_power(t, s, ex.a)
    return pd.DataFrame({"k": k, "t": t, "s": s, "ratio": ratio, "mu_s_pow_eps": ex.growth.power(s, ex.eps)})
