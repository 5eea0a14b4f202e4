"""Command-line entry points: `dichotomy`, `solve`, `verify` and `delta`.

Exit status: 0 when every check passes, 1 when a check fails or a solve does not converge, 2 on
configuration and precondition errors.
"""

import dataclasses
import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np
from diffusers.utils import get_logger
from diffusers.utils import logging as diffusers_logging

from .args import get_args, load_config, merge_config
from .growth import parse_growth
from .linsys import (
    ClosedFormExample,
    DichotomySpec,
    IntegrationError,
    check_dichotomy,
    example_system,
    make_pair_grid,
    nonuniformity_witness,
)
from .manifold import (
    GRID_ATOL,
    ConvergenceError,
    GraphFunction,
    LyapunovPerronSolver,
    SolverConfig,
    graph_class_report,
    split_identity_residual,
)
from .perturb import DeltaBounds, Perturbation, delta_max, make_perturbation, parse_delta
from .utils import ValidationReport, load_json, save_csv, save_json
from .verify import decay_check, default_pairs, invariance_residual, shooting_oracle, tangency_check


logger = get_logger(__name__)

ORACLE_XI = (-0.5, -0.3, 0.0, 0.3, 0.5)
ORACLE_TOL = 1e-4
ORACLE_HORIZON = 20.0
NEGATIVE_CONTROL_OFFSET = 0.1

_SOLVER_KEYS = {
    "bigC": "C",
    "s0": "s0",
    "tmax": "t_max",
    "tstep": "t_step",
    "xi_range": "xi_range",
    "xi_step": "xi_step",
    "tol_inner": "tol_inner",
    "tol_outer": "tol_outer",
    "tol_tail": "tol_tail",
    "quadrature": "quadrature",
    "max_iter_inner": "max_iter_inner",
    "max_iter_outer": "max_iter_outer",
}
_RENAMED = {"bigD": "D"}


@dataclass
class RunConfig:
    command: str = "solve"
    growth: str = "poly"
    a: float = -1.0
    b: float = 1.0
    eps: float = 0.2
    D: float = 1.0
    spec_eps: Optional[float] = None
    shape: str = "huber_swap"
    delta: Any = "auto:0.5"
    solver: SolverConfig = field(default_factory=SolverConfig)
    out: str = "outputs"
    grid_max: float = 20.0
    grid_step: float = 0.25
    k_max: int = 5
    phi: Optional[str] = None
    horizon: Optional[float] = None
    num_pairs: int = 50

    def __post_init__(self):
        self.growth_rate = parse_growth(self.growth)
        if self.D < 1:
            raise ValueError(f"`--bigD` must be at least 1, got {self.D}.")
        if not self.grid_max > 0 or not self.grid_step > 0:
            raise ValueError("`--grid-max` and `--grid-step` must be positive.")
        if self.k_max < 1:
            raise ValueError(f"`--k-max` must be at least 1, got {self.k_max}.")
        if self.num_pairs < 1:
            raise ValueError(f"`--num-pairs` must be at least 1, got {self.num_pairs}.")

    @classmethod
    def from_options(cls, command: str, options: Dict[str, Any], show_progress: bool = True) -> "RunConfig":
        solver_options = {_SOLVER_KEYS[key]: value for key, value in options.items() if key in _SOLVER_KEYS}
        solver = SolverConfig(**solver_options, show_progress=show_progress)
        rest = {_RENAMED.get(key, key): value for key, value in options.items() if key not in _SOLVER_KEYS}
        return cls(command=command, solver=solver, **rest)

    def system(self) -> ClosedFormExample:
        return example_system(self.growth_rate, self.a, self.b, self.eps)

    def dichotomy(self) -> DichotomySpec:
        return DichotomySpec(D=self.D, a=self.a, b=self.b, eps=self.eps)

    def checked_spec(self) -> DichotomySpec:
        eps = self.eps if self.spec_eps is None else self.spec_eps
        return DichotomySpec(D=self.D, a=self.a, b=self.b, eps=eps)

    def delta_bounds(self) -> DeltaBounds:
        return delta_max(self.D, self.solver.class_constant(self.D), self.eps, self.a, self.b)

    def perturbation(self) -> Perturbation:
        return make_perturbation(self.growth_rate, self.eps, parse_delta(self.delta, self.delta_bounds()), self.shape)

    @property
    def output_dir(self) -> pathlib.Path:
        return pathlib.Path(self.out)

    def to_dict(self) -> Dict[str, Any]:
        payload = dataclasses.asdict(self)
        payload["solver"].pop("show_progress")
        return payload


def cmd_dichotomy(cfg: RunConfig) -> int:
    example = cfg.system()
    spec = cfg.checked_spec()
    grid = make_pair_grid(cfg.grid_max, cfg.grid_step)
    report = check_dichotomy(example.U_scalar, example.Vinv_scalar, spec, example.growth, grid, cfg.solver.num_workers)
    witness = nonuniformity_witness(example, cfg.k_max)

    save_json({**report.to_dict(), "spec": spec.to_dict(), "growth": cfg.growth}, cfg.output_dir / "dichotomy_report.json")
    save_csv(witness, cfg.output_dir / "witness.csv")
    logger.info(
        f"Dichotomy check {'passed' if report.passed else 'failed'}: "
        f"D_min(U) = {report.D_min_U:.6g} at {report.worst_pair_U}, D_min(V^-1) = {report.D_min_V:.6g} at {report.worst_pair_V}."
    )
    return 0 if report.passed else 1


def cmd_solve(cfg: RunConfig) -> int:
    sys, f = cfg.system(), cfg.perturbation()
    solver = LyapunovPerronSolver(sys, f, cfg.solver, spec=cfg.dichotomy())
    phi, diagnostics = solver.solve()
    x, _ = solver.solve_x(phi, 0)

    out = cfg.output_dir
    save_json(phi.to_json_dict(), out / "phi.json")
    save_csv(phi.to_frame(), out / "phi.csv")
    save_csv(x.to_frame(), out / "x_phi.csv")
    save_json(
        {"diagnostics": diagnostics.to_dict(), "delta_bounds": cfg.delta_bounds().to_dict(), "config": cfg.to_dict()},
        out / "diagnostics.json",
    )
    logger.info(
        f"Solved in {diagnostics.iterations} outer iterations; max outer ratio {diagnostics.max_ratio:.3e} "
        f"(bound {diagnostics.outer_ratio_bound:.3e}). Artifacts written to {out}."
    )
    return 0


def load_graph(path: pathlib.Path) -> GraphFunction:
    try:
        payload = load_json(path)
    except OSError as error:
        raise ValueError(f"Cannot read graph dataset {path}: {error}")
    except json.JSONDecodeError as error:
        raise ValueError(f"Corrupted graph dataset {path}: {error}")
    return GraphFunction.from_json_dict(payload)


def _check_graph_matches(phi: GraphFunction, cfg: RunConfig, f: Perturbation) -> None:
    times, xi = cfg.solver.time_grid(), cfg.solver.xi_grid()
    if phi.s_grid.shape != times.shape or not np.allclose(phi.s_grid, times, atol=GRID_ATOL):
        raise ValueError("Graph s-grid does not match `--s0`, `--tmax` and `--tstep`.")
    if phi.xi_grid.shape != xi.shape or not np.allclose(phi.xi_grid, xi, atol=GRID_ATOL):
        raise ValueError("Graph xi-grid does not match `--xi-range` and `--xi-step`.")
    stored = phi.metadata.get("delta")
    if stored is not None and not np.isclose(stored, f.delta, rtol=1e-12, atol=0.0):
        raise ValueError(f"Graph was solved with delta={stored}, the run configures delta={f.delta}.")


def cmd_verify(cfg: RunConfig, phi_path: Optional[str] = None) -> int:
    sys, f = cfg.system(), cfg.perturbation()
    path = pathlib.Path(phi_path or cfg.phi or cfg.output_dir / "phi.json")
    phi = load_graph(path)
    _check_graph_matches(phi, cfg, f)
    s0 = float(phi.s_grid[0])

    invariance = invariance_residual(phi, sys, f, cfg.solver, horizon=cfg.horizon)
    control = invariance_residual(phi, sys, f, cfg.solver, horizon=cfg.horizon, offset=NEGATIVE_CONTROL_OFFSET)
    kept = [k for k, sample in enumerate(invariance.per_sample) if not sample["left_grid"]]
    negative_control = bool(np.all(invariance.final_residuals[kept] <= 0.1 * control.final_residuals[kept]))

    decay = decay_check(
        phi, sys, f, cfg.solver, pairs=default_pairs(phi.xi_grid, cfg.num_pairs), horizon=cfg.horizon
    )
    tangency = tangency_check(phi)

    t_esc = min(float(phi.s_grid[-1]), s0 + ORACLE_HORIZON)
    oracle = []
    for xi in ORACLE_XI:
        if abs(xi) > phi.xi_grid[-1] + GRID_ATOL:
            continue
        result = shooting_oracle(sys, f, s0, xi, t_esc=t_esc)
        graph_value, _ = phi.evaluate(np.full(1, s0), np.full((1, 1), xi))
        oracle.append({**result.to_dict(), "phi": float(graph_value[0, 0, 0]), "error": abs(result.eta - graph_value[0, 0, 0])})
    oracle_passed = all(item["error"] <= ORACLE_TOL and item["bounded"] for item in oracle)

    report = ValidationReport(
        checks={
            "invariance": invariance.passed,
            "negative_control": negative_control,
            "decay": decay.passed,
            "tangency": tangency.passed,
            "oracle": oracle_passed,
        },
        details={
            "invariance": invariance.to_dict(),
            "negative_control": control.to_dict(),
            "decay": decay.to_dict(),
            "tangency": tangency.to_dict(),
            "oracle": oracle,
            "graph_class": graph_class_report(phi).to_dict(),
            "forward_identity_residual": split_identity_residual(phi, sys, f, cfg.solver, cfg.horizon),
            "phi_path": str(path),
        },
    )
    save_json(report.to_dict(), cfg.output_dir / "verify_report.json")
    save_csv(invariance.trajectories, cfg.output_dir / "invariance_trajectories.csv")
    for name, passed in report.checks.items():
        logger.info(f"Verification `{name}`: {'pass' if passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_delta(cfg: RunConfig) -> int:
    bounds = cfg.delta_bounds()
    payload = {**bounds.to_dict(), "delta": parse_delta(cfg.delta, bounds)}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "dichotomy": cmd_dichotomy,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "delta": cmd_delta,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = get_args(argv)
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.INFO
    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        datefmt="%m/%d/%Y %H:%M:%S",
        level=level,
    )
    logging.getLogger("mu_manifold").setLevel(level)
    if args.verbose:
        diffusers_logging.set_verbosity_debug()
    elif args.quiet:
        diffusers_logging.set_verbosity_error()
    else:
        diffusers_logging.set_verbosity_info()

    try:
        options = merge_config(args, load_config(args.config))
        cfg = RunConfig.from_options(args.command, options, show_progress=not args.quiet)
        return COMMANDS[args.command](cfg)
    except ValueError as error:
        logger.error(f"Configuration error: {error}")
        return 2
    except (ConvergenceError, IntegrationError, FloatingPointError) as error:
        logger.error(f"{type(error).__name__}: {error}")
        return 1
