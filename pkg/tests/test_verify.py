# Run: pytest tests/test_verify.py

import numpy as np
import pytest

from mu_manifold.linsys import GeneralLinearSystem, Splitting
from mu_manifold.manifold import GraphFunction
from mu_manifold.verify import (
    decay_check,
    default_pairs,
    integrate_nonlinear,
    integrate_nonlinear_batch,
    invariance_residual,
    shooting_oracle,
    tangency_check,
)


def test_unperturbed_flow_follows_the_evolution(example, zero_perturbation):
    times = np.linspace(0.0, 10.0, 21)
    stable = integrate_nonlinear(example, zero_perturbation, 0.0, [0.4, 0.0], times)
    assert np.allclose(stable.states[:, 0], 0.4 * example.U_scalar(times, 0.0), rtol=1e-8, atol=1e-12)
    assert np.all(stable.states[:, 1] == 0.0)

    unstable = integrate_nonlinear(example, zero_perturbation, 0.0, [0.0, 1e-3], times)
    assert np.allclose(unstable.states[:, 1], 1e-3 * example.V_scalar(times, 0.0), rtol=1e-8)
    assert not unstable.escaped


def test_batch_matches_single_trajectories(example, perturbation):
    times = np.linspace(1.0, 6.0, 11)
    starts = np.array([[0.3, -0.01], [-0.2, 0.02]])
    batch = integrate_nonlinear_batch(example, perturbation, 1.0, starts, times)
    assert batch.states.shape == (11, 2, 2)
    for k, start in enumerate(starts):
        single = integrate_nonlinear(example, perturbation, 1.0, start, times)
        assert np.allclose(batch.states[:, k], single.states, rtol=1e-7, atol=1e-10)


def test_escape_is_reported(example, zero_perturbation):
    times = np.linspace(0.0, 40.0, 81)
    sample = integrate_nonlinear(example, zero_perturbation, 0.0, [0.0, 1.0], times, escape_radius=10.0)
    assert sample.escaped
    assert 0.0 < sample.escape_time < 40.0
    assert np.isnan(sample.states[-1]).all()
    assert np.max(np.abs(sample.final_state)) == pytest.approx(10.0, rel=1e-6)


def test_escape_truncates_only_the_escaping_sample(example, zero_perturbation):
    times = np.linspace(0.0, 40.0, 81)
    starts = np.array([[0.3, 0.0], [0.0, 1.0]])
    batch = integrate_nonlinear_batch(example, zero_perturbation, 0.0, starts, times, escape_radius=10.0)
    assert batch.escaped
    assert batch.escaped_samples == [1]
    assert np.isfinite(batch.states[:, 0]).all()
    assert np.isnan(batch.states[-1, 1]).all()

    single = integrate_nonlinear(example, zero_perturbation, 0.0, starts[0], times)
    assert np.allclose(batch.states[:, 0], single.states, rtol=1e-12, atol=0.0)


def test_batch_requires_the_base_time(example, zero_perturbation):
    with pytest.raises(ValueError):
        integrate_nonlinear_batch(example, zero_perturbation, 0.0, np.zeros((1, 2)), [1.0, 2.0])


def test_trajectory_frame_columns(example, perturbation):
    sample = integrate_nonlinear_batch(example, perturbation, 0.0, np.array([[0.1, 0.0], [0.2, 0.0]]), [0.0, 1.0])
    frame = sample.to_frame()
    assert list(frame.columns) == ["t", "sample", "x", "y_0"]
    assert len(frame) == 4


def test_invariance_without_perturbation(example, zero_perturbation, small_config, zero_solution):
    phi, _ = zero_solution
    report = invariance_residual(phi, example, zero_perturbation, small_config)
    assert report.passed
    assert report.max_residual <= 1e-8
    assert report.horizon == pytest.approx(15.0)
    assert "not a proven error bound" in report.note

    control = invariance_residual(phi, example, zero_perturbation, small_config, offset=0.1)
    assert np.all(control.final_residuals > 10.0 * report.final_residuals)
    assert np.all(control.final_residuals > 0.1)


def test_invariance_horizon_is_limited(example, zero_perturbation, small_config, zero_solution):
    phi, _ = zero_solution
    with pytest.raises(ValueError, match="horizon"):
        invariance_residual(phi, example, zero_perturbation, small_config, horizon=20.0)


def test_canonical_invariance(example, perturbation, canonical_config, canonical_solution):
    phi, _ = canonical_solution
    report = invariance_residual(phi, example, perturbation, canonical_config)
    assert report.passed, report.to_dict()
    assert report.max_residual <= 1e-3 * 0.5
    assert not report.excluded
    assert set(report.budget) == {"tol_outer_term", "tail_bound", "quadrature_estimate", "total"}
    assert report.tail_at_base == pytest.approx(phi.metadata["tail_bounds"][0])
    assert report.tail_at_base <= report.budget["tail_bound"]
    assert report.to_dict()["tail_at_base"] == report.tail_at_base
    assert not any(sample["escaped"] for sample in report.per_sample)

    control = invariance_residual(phi, example, perturbation, canonical_config, offset=0.1)
    assert np.all(report.final_residuals <= 0.1 * control.final_residuals)


def test_default_pairs_are_distinct_and_deterministic():
    xi = 0.025 * np.arange(-20, 21)
    pairs = default_pairs(xi, 50)
    assert len(pairs) == 50
    assert len(set(pairs)) == 50
    assert all(p != q for p, q in pairs)
    assert pairs == default_pairs(xi, 50)


def test_decay_without_perturbation(example, zero_perturbation, small_config, zero_solution):
    phi, _ = zero_solution
    report = decay_check(phi, example, zero_perturbation, small_config, pairs=[(0.1, 0.3), (-0.5, 0.45), (0.2, 0.2)])
    assert report.passed
    assert report.max_ratio <= 1.0 + 1e-6
    assert report.details["skipped_pairs"] == 1
    assert report.details["derivative_ratio"] <= 1e-3


def test_decay_with_coincident_pairs_only(example, zero_perturbation, small_config, zero_solution):
    phi, _ = zero_solution
    assert decay_check(phi, example, zero_perturbation, small_config, pairs=[(0.1, 0.1)]).skipped


def test_canonical_decay(example, perturbation, canonical_config, canonical_solution):
    phi, _ = canonical_solution
    report = decay_check(phi, example, perturbation, canonical_config)
    assert report.passed, report.to_dict()
    assert report.max_ratio <= 2.0 * 2.0 + 0.05
    assert report.details["num_pairs"] == 50

    looser = decay_check(phi, example, perturbation, canonical_config.replace(C=4.0))
    assert looser.passed
    assert looser.threshold > report.threshold


def test_decay_rejects_pairs_outside_the_grid(example, zero_perturbation, small_config, zero_solution):
    phi, _ = zero_solution
    with pytest.raises(ValueError):
        decay_check(phi, example, zero_perturbation, small_config, pairs=[(0.1, 0.9)])


def test_tangency():
    s_grid, xi = np.array([0.0, 1.0]), 0.025 * np.arange(-20, 21)
    flat = tangency_check(GraphFunction.zeros(s_grid, xi))
    assert flat.passed and flat.flat
    assert flat.to_dict()["note"] == "flat to machine precision"

    linear = tangency_check(GraphFunction(np.stack([0.5 * xi, 0.5 * xi]), s_grid, xi))
    assert not linear.passed
    assert linear.slope == pytest.approx(1.0)

    with pytest.raises(ValueError):
        tangency_check(GraphFunction.zeros(s_grid, np.array([-0.1, 0.0, 0.1])))


def test_canonical_tangency(canonical_solution):
    phi, _ = canonical_solution
    report = tangency_check(phi)
    assert report.passed
    assert report.slope == pytest.approx(2.0, abs=0.1)


def test_shooting_without_perturbation(example, zero_perturbation):
    result = shooting_oracle(example, zero_perturbation, 0.0, 0.3)
    assert abs(result.eta) <= 1e-8
    assert result.bounded

    origin = shooting_oracle(example, zero_perturbation, 0.0, 0.0)
    assert abs(origin.eta) <= 1e-8


def test_shooting_needs_a_sign_change(example, zero_perturbation):
    with pytest.raises(ValueError, match="widen the bracket"):
        shooting_oracle(example, zero_perturbation, 0.0, 0.3, bracket=(0.1, 1.0))


def test_shooting_needs_a_planar_system(zero_perturbation):
    system = GeneralLinearSystem(3, lambda t: np.zeros((3, 3)), Splitting(3, stable_dim=1))
    with pytest.raises(ValueError):
        shooting_oracle(system, zero_perturbation, 0.0, 0.3)


@pytest.mark.parametrize("xi", [0.0, 0.3, -0.5])
def test_shooting_agrees_with_the_solved_graph(example, perturbation, canonical_solution, xi):
    phi, _ = canonical_solution
    result = shooting_oracle(example, perturbation, 0.0, xi)
    index = int(np.argmin(np.abs(phi.xi_grid - xi)))
    assert abs(result.eta - phi.values[0, index, 0]) <= 1e-4
    assert result.bounded


def test_shooting_needs_a_dichotomy(example, zero_perturbation):
    system = GeneralLinearSystem(2, example.coefficient, Splitting(2, stable_dim=1))
    with pytest.raises(ValueError, match="no dichotomy"):
        shooting_oracle(system, zero_perturbation, 0.0, 0.3, t_esc=5.0)

    result = shooting_oracle(system, zero_perturbation, 0.0, 0.3, t_esc=5.0, spec=example.dichotomy)
    assert abs(result.eta) <= 1e-8
    assert result.bounded


def test_shooting_on_a_general_system_with_a_dichotomy(example, zero_perturbation):
    result = shooting_oracle(example.as_linear_system(), zero_perturbation, 0.0, -0.3, t_esc=5.0)
    assert abs(result.eta) <= 1e-8
    assert result.bounded
