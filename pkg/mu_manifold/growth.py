"""Growth rates mu: [0, inf) -> [1, inf).

A growth rate sets every decay and growth scale in the package: dichotomy bounds read
(mu(t)/mu(s))^a mu(s)^eps, perturbation envelopes read mu'(t) mu(t)^(-3 eps - 1).
"""

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np
from diffusers.utils import get_logger
from scipy import integrate

from .utils import ValidationReport


logger = get_logger(__name__)

GROWTH_KINDS = ("exponential", "polynomial", "logarithmic", "custom")
DEFAULT_VALIDATION_GRID = np.linspace(0.0, 100.0, 1001)
DERIVATIVE_RTOL = 1e-6
REQUIRED_CHECKS = ["lower_bound", "monotone", "positive_derivative", "derivative_consistency"]

_KIND_ALIASES = {
    "exp": "exponential",
    "exponential": "exponential",
    "poly": "polynomial",
    "polynomial": "polynomial",
    "log": "logarithmic",
    "logarithmic": "logarithmic",
    "custom": "custom",
}


@dataclass(frozen=True)
class GrowthRate:
    """An increasing differentiable mu with its exact derivative.

    `log_eval` is an optional closed form of log(mu) and `log_deriv` one of mu'/mu; both are used
    where mu itself would overflow.
    """

    label: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    log_eval: Optional[Callable[[np.ndarray], np.ndarray]] = None
    log_deriv: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, t: Any) -> np.ndarray:
        return self.eval(np.asarray(t, dtype=float))

    def derivative(self, t: Any) -> np.ndarray:
        return self.deriv(np.asarray(t, dtype=float))

    def log(self, t: Any) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.log_eval is not None:
            return self.log_eval(t)
        return np.log(self.eval(t))

    def log_rate(self, t: Any) -> np.ndarray:
        """mu'(t) / mu(t)."""
        t = np.asarray(t, dtype=float)
        if self.log_deriv is not None:
            return self.log_deriv(t)
        return self.deriv(t) / self.eval(t)

    def ratio_power(self, t: Any, s: Any, power: float) -> np.ndarray:
        """(mu(t)/mu(s))^power, computed in log space."""
        return np.exp(power * (self.log(t) - self.log(s)))

    def power(self, t: Any, power: float) -> np.ndarray:
        return np.exp(power * self.log(t))


def validate_growth(g: GrowthRate, grid: Optional[Sequence[float]] = None) -> ValidationReport:
    """Check the growth-rate hypotheses on a sampled grid.

    Every check runs on log(mu) and mu'/mu, so fast exponential rates do not overflow. Failures are
    reported, never raised. The divergence proxy mu(t_max) > 10 mu(t_0) is advisory: slow rates such
    as log(e + t) legitimately need a much longer grid to pass it.
    """
    grid = DEFAULT_VALIDATION_GRID if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("`grid` must be a nonempty one-dimensional array of times.")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("`grid` must be strictly increasing.")

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logs = np.asarray(g.log(grid), dtype=float) * np.ones_like(grid)
        rates = np.asarray(g.log_rate(grid), dtype=float) * np.ones_like(grid)

        steps = 1e-5 * np.maximum(1.0, grid)
        central = (g.log(grid + steps) - g.log(grid - steps)) / (2.0 * steps)
        scale = np.where(np.abs(rates) > 0, np.abs(rates), 1.0)
        rel_errors = np.abs(central - rates) / scale

    finite = bool(np.all(np.isfinite(logs)) and np.all(np.isfinite(rates)))
    rel_errors = np.where(np.isfinite(rel_errors), rel_errors, np.inf)
    worst = int(np.argmax(rel_errors))

    checks = {
        "finite": finite,
        "lower_bound": finite and bool(np.all(logs >= 0.0)),
        "monotone": finite and bool(np.all(np.diff(logs) > 0)),
        "positive_derivative": finite and bool(np.all(rates > 0)),
        "derivative_consistency": bool(rel_errors[worst] <= DERIVATIVE_RTOL),
        "divergence": finite and bool(logs[-1] - logs[0] > math.log(10.0)),
    }
    details = {
        "label": g.label,
        "grid": [float(grid[0]), float(grid[-1]), int(grid.size)],
        "min_log_value": float(np.min(logs)) if finite else float("nan"),
        "log_growth_factor": float(logs[-1] - logs[0]) if finite else float("nan"),
        "max_rel_derivative_error": float(rel_errors[worst]),
        "worst_derivative_time": float(grid[worst]),
    }
    return ValidationReport(checks=checks, details=details, required=["finite"] + REQUIRED_CHECKS)


def make_growth(kind: str, params: Sequence[Any] = (), grid: Optional[Sequence[float]] = None) -> GrowthRate:
    kind_key = _KIND_ALIASES.get(str(kind).lower())
    if kind_key is None:
        raise ValueError(f"Unknown growth kind {kind!r}; expected one of {GROWTH_KINDS}.")
    params = list(params)

    if kind_key == "exponential":
        if len(params) != 1:
            raise ValueError(f"Exponential growth takes exactly one rate `c`, got {params}.")
        c = float(params[0])
        if not c > 0:
            raise ValueError(f"Exponential growth rate `c` must be positive, got {c}.")
        g = GrowthRate(
            label=f"exp:c={c!r}",
            eval=lambda t: np.exp(c * t),
            deriv=lambda t: c * np.exp(c * t),
            log_eval=lambda t: c * t,
            log_deriv=lambda t: np.full_like(t, c),
        )
    elif kind_key == "polynomial":
        if params:
            raise ValueError(f"Polynomial growth mu(t) = t + 1 takes no parameters, got {params}.")
        g = GrowthRate(
            label="poly",
            eval=lambda t: t + 1.0,
            deriv=lambda t: np.ones_like(t),
            log_eval=np.log1p,
            log_deriv=lambda t: 1.0 / (t + 1.0),
        )
    elif kind_key == "logarithmic":
        if params:
            raise ValueError(f"Logarithmic growth mu(t) = log(e + t) takes no parameters, got {params}.")
        g = GrowthRate(
            label="log",
            eval=lambda t: np.log(math.e + t),
            deriv=lambda t: 1.0 / (math.e + t),
            log_eval=lambda t: np.log(np.log(math.e + t)),
            log_deriv=lambda t: 1.0 / ((math.e + t) * np.log(math.e + t)),
        )
    else:
        if len(params) != 2 or not all(callable(p) for p in params):
            raise ValueError("Custom growth takes a pair of callables `(eval, deriv)`.")
        eval_fn, deriv_fn = params
        g = GrowthRate(label="custom", eval=eval_fn, deriv=deriv_fn)

    report = validate_growth(g, grid)
    failed = [name for name in ["finite", "lower_bound", "monotone", "positive_derivative"] if not report.checks[name]]
    if failed:
        raise ValueError(f"Growth rate `{g.label}` violates {failed} on the validation grid: {report.details}.")
    if not report.checks["derivative_consistency"]:
        logger.warning(
            f"Derivative of `{g.label}` disagrees with central differences "
            f"(relative error {report.details['max_rel_derivative_error']:.3e})."
        )
    return g


def parse_growth(text: str) -> GrowthRate:
    """Parse `exp:c=1.0`, `poly` or `log`. Custom rates are library-only."""
    text = str(text).strip()
    name, _, rest = text.partition(":")
    kind = _KIND_ALIASES.get(name.lower())
    if kind is None:
        raise ValueError(f"Malformed growth string {text!r}; expected `exp:c=<rate>`, `poly` or `log`.")
    if kind == "custom":
        raise ValueError("Custom growth rates are only available through the library API.")

    params = []
    if rest:
        for item in rest.split(","):
            key, sep, value = item.partition("=")
            if not sep or key.strip() != "c" or kind != "exponential":
                raise ValueError(f"Malformed growth parameter {item!r} in {text!r}.")
            try:
                params.append(float(value))
            except ValueError:
                raise ValueError(f"Growth parameter {item!r} in {text!r} is not a number.")
    elif kind == "exponential":
        params = [1.0]
    return make_growth(kind, params)


def power_integral(g: GrowthRate, k: float, s: float, t: float = math.inf) -> float:
    """Closed form of int_s^t mu'(r) mu(r)^(-k-1) dr = (mu(s)^-k - mu(t)^-k) / k, for k > 0."""
    if not k > 0:
        raise ValueError(f"`k` must be positive, got {k}.")
    upper = 0.0 if math.isinf(t) else float(g.power(t, -k))
    return (float(g.power(s, -k)) - upper) / k


def power_integral_quad(g: GrowthRate, k: float, s: float, t: float = math.inf) -> float:
    value, _ = integrate.quad(
        lambda r: float(g.derivative(r) * g.power(r, -k - 1.0)), s, t, epsabs=0.0, epsrel=1e-11, limit=500
    )
    return value
