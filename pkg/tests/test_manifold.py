# Run: pytest tests/test_manifold.py

import json

import numpy as np
import pytest

from mu_manifold.growth import make_growth
from mu_manifold.linsys import DichotomySpec
from mu_manifold.manifold import (
    ConvergenceError,
    GraphFunction,
    LyapunovPerronSolver,
    SolverConfig,
    TrajectoryFamily,
    graph_class_report,
    grid_refinement_check,
    inner_operator_J,
    interpolate_xi,
    outer_operator_Phi,
    pair_distance_bound_check,
    ramp_graph,
    required_t_max,
    solve_manifold,
    solve_x,
    split_identity_residual,
    trajectory_class_report,
    weighted_norm_B,
    weighted_norm_X,
)
from mu_manifold.perturb import delta_max, make_perturbation


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(t_max=0.0)
    with pytest.raises(ValueError):
        SolverConfig(xi_range=0.05, xi_step=0.025)
    with pytest.raises(ValueError):
        SolverConfig(quadrature="midpoint")
    with pytest.raises(ValueError):
        SolverConfig(C=1.0).class_constant(1.0)
    assert SolverConfig().class_constant(1.0) == 2.0
    assert len(SolverConfig().xi_grid()) == 41
    assert len(SolverConfig().time_grid()) == 801


def test_graph_norm():
    s_grid, xi_grid = np.linspace(0, 1, 3), 0.1 * np.arange(-5, 6)
    assert weighted_norm_X(GraphFunction.zeros(s_grid, xi_grid)) == 0.0
    identity = GraphFunction(np.broadcast_to(xi_grid, (3, 11)).copy(), s_grid, xi_grid)
    assert weighted_norm_X(identity) == pytest.approx(1.0)


def test_graph_function_rejects_bad_grids():
    with pytest.raises(ValueError):
        GraphFunction(np.zeros((2, 3)), np.array([0.0, 1.0]), np.array([0.0, 0.1, 0.2]))
    with pytest.raises(ValueError):
        GraphFunction(np.zeros((2, 4)), np.array([0.0, 1.0]), np.array([-0.1, 0.0, 0.1, 0.2]))


def test_trajectory_norm(poly):
    xi = 0.1 * np.arange(-5, 6)
    times = np.array([2.0, 2.5, 3.0])
    values = np.zeros((3, 11))
    values[0] = xi
    zero_extension = TrajectoryFamily(values, times, xi, poly, -1.0, 0.2)
    assert weighted_norm_B(zero_extension) == pytest.approx(3.0**-0.2)


def test_linear_family_lies_in_the_unit_ball(example, zero_perturbation, small_config):
    solver = LyapunovPerronSolver(example, zero_perturbation, small_config)
    for j in [0, 17, 150]:
        assert weighted_norm_B(solver.linear_family(j)) <= 1.0 + 1e-12


def test_interpolation_flags_extrapolation():
    xi = 0.1 * np.arange(-5, 6)
    table = (xi**2)[None, :, None]
    values, outside = interpolate_xi(table, xi, np.array([[0.05, 0.6]]))
    assert values[0, 0, 0] == pytest.approx(0.5 * (0.0 + 0.01))
    assert outside.tolist() == [[False, True]]


def test_inner_operator_without_perturbation(example, zero_perturbation, small_config):
    solver = LyapunovPerronSolver(example, zero_perturbation, small_config)
    phi = ramp_graph(solver.times, solver.xi)
    x, diagnostics = solve_x(phi, example, zero_perturbation, small_config)
    assert diagnostics.iterations == 1
    assert np.allclose(x.values, solver.linear_family(0).values, rtol=0.0, atol=1e-15)

    family = x * 3.0
    assert np.allclose(inner_operator_J(family, phi, example, zero_perturbation, small_config).values, x.values)


def test_inner_operator_on_zero_extension(example, perturbation, small_config):
    # the stable forcing reads the unstable coordinate, which vanishes on the zero graph
    solver = LyapunovPerronSolver(example, perturbation, small_config)
    values = np.zeros((len(solver.times), len(solver.xi)))
    values[0] = solver.xi
    zero_extension = TrajectoryFamily(values, solver.times, solver.xi, solver.growth, -1.0, 0.2)
    result = solver.inner_operator(zero_extension, solver.zero_graph())
    assert np.allclose(result.values, solver.linear_family(0).values, rtol=0.0, atol=1e-15)


def test_outer_operator_is_quadratic_near_the_origin(example, poly, small_config):
    tiny = make_perturbation(poly, 0.2, 1e-4, "huber_swap")
    zero = GraphFunction.zeros(small_config.time_grid(), small_config.xi_grid())
    image = outer_operator_Phi(zero, example, tiny, small_config)
    assert np.all(image.values <= 0.0)
    assert "tail_bounds" in image.metadata

    xi = small_config.xi_grid()
    small = (xi > 0) & (xi <= 0.2 + 1e-12)
    slope = np.polyfit(np.log(xi[small]), np.log(np.abs(image.values[0, small, 0])), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.05)


def test_zero_perturbation_gives_the_zero_graph(zero_solution):
    phi, diagnostics = zero_solution
    assert diagnostics.iterations == 1
    assert np.all(phi.values == 0.0)
    assert diagnostics.tail_bound == 0.0


def test_canonical_solve(canonical_solution, canonical_delta):
    phi, diagnostics = canonical_solution
    assert diagnostics.residuals[-1] <= 1e-8
    assert diagnostics.iterations <= 10
    assert diagnostics.delta == pytest.approx(canonical_delta)
    assert diagnostics.delta_max == pytest.approx(1.0 / 35.0)
    assert diagnostics.max_ratio <= diagnostics.outer_ratio_bound + 0.05
    assert max(diagnostics.inner_ratio_max) <= diagnostics.inner_ratio_bound + 0.05
    assert diagnostics.tail_bound <= 1e-5

    zero = phi.xi_grid == 0.0
    assert np.all(phi.values[:, zero] == 0.0)
    assert np.all(phi.values <= 0.0)
    assert 1e-5 < abs(phi.values[0, -1, 0]) < 1e-2
    assert weighted_norm_X(phi) <= 1.0
    assert graph_class_report(phi).passed


def test_canonical_trajectories_stay_in_class(example, perturbation, canonical_config, canonical_solution):
    phi, _ = canonical_solution
    x, diagnostics = solve_x(phi, example, perturbation, canonical_config)
    assert diagnostics.max_ratio <= diagnostics.ratio_bound + 0.05
    assert weighted_norm_B(x) <= 1.0 + 1e-6
    report = trajectory_class_report(x, C=2.0)
    assert report.passed, report.details


def test_graph_round_trip_is_bit_exact(canonical_solution):
    phi, _ = canonical_solution
    reloaded = GraphFunction.from_json_dict(json.loads(json.dumps(phi.to_json_dict())))
    assert np.array_equal(reloaded.values, phi.values)
    assert np.array_equal(reloaded.s_grid, phi.s_grid)
    assert reloaded.metadata == phi.metadata


@pytest.mark.parametrize(
    "payload",
    [
        {"kind": "table"},
        {"kind": "graph_function", "s_grid": [0.0, 1.0], "xi_grid": [-0.1, 0.0, 0.1], "unstable_dim": 1},
        {
            "kind": "graph_function",
            "s_grid": [0.0, 1.0, 2.0],
            "xi_grid": [-0.1, 0.0, 0.1],
            "unstable_dim": 1,
            "values": [[[0.0], [0.0], [0.0]]] * 2,
        },
    ],
)
def test_corrupted_graph_dataset(payload):
    with pytest.raises(ValueError, match="Corrupted"):
        GraphFunction.from_json_dict(payload)


def test_two_initializations_agree(example, perturbation, small_config):
    from_zero, _ = solve_manifold(example, perturbation, small_config)
    ramp = ramp_graph(small_config.time_grid(), small_config.xi_grid())
    from_ramp, diagnostics = solve_manifold(example, perturbation, small_config, phi0=ramp)
    assert diagnostics.iterations >= 2
    assert weighted_norm_X(from_zero - from_ramp) <= 1e-6


def test_pair_distance_bound(example, perturbation, zero_perturbation, small_config):
    zero = GraphFunction.zeros(small_config.time_grid(), small_config.xi_grid())
    assert pair_distance_bound_check(zero, zero, example, perturbation, small_config).skipped

    first_iterate = outer_operator_Phi(zero, example, perturbation, small_config)
    first_iterate = GraphFunction(first_iterate.values, first_iterate.s_grid, first_iterate.xi_grid)
    report = pair_distance_bound_check(zero, first_iterate, example, perturbation, small_config)
    assert report.passed

    ramp = ramp_graph(zero.s_grid, zero.xi_grid)
    unperturbed = pair_distance_bound_check(zero, ramp, example, zero_perturbation, small_config)
    assert unperturbed.max_ratio == 0.0
    assert unperturbed.passed


def test_forward_identity_holds_on_the_solution(example, perturbation, small_config):
    phi, _ = solve_manifold(example, perturbation, small_config)
    assert split_identity_residual(phi, example, perturbation, small_config) <= 2e-5


def test_solver_preconditions(example, poly, small_config):
    too_large = make_perturbation(poly, 0.2, 2.0 / 35.0, "huber_swap")
    with pytest.raises(ValueError, match="delta_max"):
        solve_manifold(example, too_large, small_config)

    mismatched = make_perturbation(poly, 0.1, 0.001, "huber_swap")
    with pytest.raises(ValueError, match="eps"):
        LyapunovPerronSolver(example, mismatched, small_config)


def test_outer_iteration_cap(example, perturbation, small_config):
    with pytest.raises(ConvergenceError) as error:
        solve_manifold(example, perturbation, small_config.replace(max_iter_outer=1))
    assert error.value.iterations == 1


def test_truncation_gate_suggests_a_longer_horizon(example, perturbation, small_config):
    with pytest.raises(ValueError, match="increase `t_max`"):
        solve_manifold(example, perturbation, small_config.replace(tol_tail=1e-12))


def test_required_t_max_inverts_the_tail_bound(poly):
    spec = DichotomySpec(D=1.0, a=-1.0, b=1.0, eps=0.2)
    delta = delta_max(1.0, 2.0, 0.2, -1.0, 1.0).delta_max / 2.0
    T = required_t_max(poly, spec, 2.0, delta, 0.0, 0.5, 1e-7)
    tail = 2.0 * 2.0 * delta / spec.gap * (T + 1.0) ** -spec.gap * 0.5
    assert tail == pytest.approx(1e-7, rel=1e-6)
    assert required_t_max(poly, spec, 2.0, delta, 0.0, 0.5, 1.0) == 0.0


def test_grid_refinement_is_second_order(example, perturbation):
    cfg = SolverConfig(C=2.0, t_max=20.0, t_step=0.2, xi_range=0.5, xi_step=0.1, tol_tail=1e-4)
    report = grid_refinement_check(example, perturbation, cfg)
    assert report.passed, report.details
    assert report.details["changes"][1] < report.details["changes"][0]


def test_custom_growth_rejected_by_mismatched_system(example, small_config):
    other = make_perturbation(make_growth("exp", [0.1]), 0.2, 0.001, "huber_swap")
    with pytest.raises(ValueError, match="Growth rates disagree"):
        LyapunovPerronSolver(example, other, small_config)
