import argparse
from typing import Any, Dict, List, Optional, Sequence

from .utils import load_json


COMMANDS = ("dichotomy", "solve", "verify", "delta")


def _get_system_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--growth",
        type=str,
        default=None,
        help="Growth rate mu: `exp:c=<rate>`, `poly` (t + 1) or `log` (log(e + t)). Defaults to `poly`.",
    )
    parser.add_argument("--a", type=float, default=None, help="Stable exponent a < 0. Defaults to -1.")
    parser.add_argument("--b", type=float, default=None, help="Unstable exponent b >= 0. Defaults to 1.")
    parser.add_argument(
        "--eps",
        type=float,
        default=None,
        help="Nonuniformity exponent of the example system and of the perturbation envelope. Defaults to 0.2.",
    )
    parser.add_argument("--bigD", type=float, default=None, help="Dichotomy constant D >= 1. Defaults to 1.")
    parser.add_argument(
        "--spec-eps",
        type=float,
        default=None,
        help=(
            "Exponent eps of the dichotomy bound being checked, when it should differ from `--eps`."
            " Checking the example against eps = 0 shows that the nonuniform part cannot be removed."
        ),
    )


def _get_perturbation_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--shape",
        type=str,
        default=None,
        choices=["huber_swap", "zero"],
        help="Shape h(v) of the perturbation delta mu' mu^(-3 eps - 1) h(v). Defaults to `huber_swap`.",
    )
    parser.add_argument(
        "--delta",
        type=str,
        default=None,
        help="Perturbation size: a number, or `auto:<fraction>` for fraction * delta_max. Defaults to `auto:0.5`.",
    )


def _get_solver_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--bigC", type=float, default=None, help="Class constant C > D. Defaults to 2 D.")
    parser.add_argument("--s0", type=float, default=None, help="First base time of the solved graph.")
    parser.add_argument("--tmax", type=float, default=None, help="Truncation time T of the outer integral.")
    parser.add_argument("--tstep", type=float, default=None, help="Step of the uniform time grid.")
    parser.add_argument("--xi-range", type=float, default=None, help="Radius R of the symmetric xi-grid.")
    parser.add_argument("--xi-step", type=float, default=None, help="Step of the xi-grid.")
    parser.add_argument("--tol-inner", type=float, default=None, help="Stopping tolerance of the inner iteration.")
    parser.add_argument("--tol-outer", type=float, default=None, help="Stopping tolerance of the outer iteration.")
    parser.add_argument(
        "--tol-tail",
        type=float,
        default=None,
        help="Largest admissible bound on the truncated [T, inf) part of the outer integral at s0.",
    )
    parser.add_argument(
        "--quadrature",
        type=str,
        default=None,
        choices=["trapezoid", "simpson"],
        help="Quadrature rule of both operators.",
    )
    parser.add_argument("--max-iter-inner", type=int, default=None, help="Iteration cap of the inner solve.")
    parser.add_argument("--max-iter-outer", type=int, default=None, help="Iteration cap of the outer solve.")


def _get_output_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=str, default=None, help="Directory where artifacts are written.")
    parser.add_argument(
        "--config",
        type=str,
        default=None,
        help="JSON file with run configuration; keys are the flag names with `_` for `-`. Flags override it.",
    )
    parser.add_argument("--verbose", action="store_true", help="Log per-iteration numbers.")
    parser.add_argument("--quiet", action="store_true", help="Log errors only.")


def _get_dichotomy_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--grid-max", type=float, default=None, help="Largest time of the (t, s) pair grid.")
    parser.add_argument("--grid-step", type=float, default=None, help="Step of the (t, s) pair grid.")
    parser.add_argument(
        "--k-max", type=int, default=None, help="Number of periods in the nonuniformity witness table."
    )


def _get_verify_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--phi",
        type=str,
        default=None,
        help="Graph dataset written by `solve`. Defaults to `<out>/phi.json`.",
    )
    parser.add_argument(
        "--horizon", type=float, default=None, help="Forward horizon of the flow checks. Defaults to (tmax - s0) / 2."
    )
    parser.add_argument("--num-pairs", type=int, default=None, help="Number of xi-pairs in the decay check.")


_GROUPS = {
    "dichotomy": [_get_system_args, _get_output_args, _get_dichotomy_args],
    "solve": [_get_system_args, _get_perturbation_args, _get_solver_args, _get_output_args],
    "verify": [_get_system_args, _get_perturbation_args, _get_solver_args, _get_output_args, _get_verify_args],
    "delta": [_get_system_args, _get_perturbation_args, _get_solver_args, _get_output_args],
}

_HELP = {
    "dichotomy": "Check the mu-dichotomy bounds of the example system on a (t, s) grid.",
    "solve": "Compute the stable manifold graph of the perturbed example system.",
    "verify": "Check a computed graph against the nonlinear flow.",
    "delta": "Print the smallness thresholds on delta.",
}

# flag-only settings, never read from a config file
_NOT_CONFIGURABLE = {"command", "config", "verbose", "quiet"}


def get_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mu_manifold", description="Nonuniform mu-dichotomies and global stable manifolds."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        subparser = subparsers.add_parser(command, help=_HELP[command])
        for add_group in _GROUPS[command]:
            add_group(subparser)
    return parser


def configurable_keys() -> List[str]:
    parser = get_parser()
    keys = set()
    for command in COMMANDS:
        keys.update(vars(parser.parse_args([command])))
    return sorted(keys - _NOT_CONFIGURABLE)


def merge_config(args: argparse.Namespace, config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Flag > config file > built-in default (the default is filled in later by `RunConfig`)."""
    config = dict(config or {})
    allowed = set(configurable_keys())
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise ValueError(f"Unknown keys in `--config`: {unknown}.")

    merged = {key: value for key, value in config.items() if value is not None}
    for key, value in vars(args).items():
        if key in _NOT_CONFIGURABLE or value is None:
            continue
        merged[key] = value
    return merged


def get_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return get_parser().parse_args(argv)


def load_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        payload = load_json(path)
    except (OSError, ValueError) as error:
        raise ValueError(f"Cannot read `--config` file {path}: {error}")
    if not isinstance(payload, dict):
        raise ValueError(f"`--config` file {path} must hold a JSON object.")
    return payload
