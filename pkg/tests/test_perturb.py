# Run: pytest tests/test_perturb.py

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mu_manifold.perturb import (
    check_perturbation,
    default_samples,
    delta_max,
    finite_difference_jacobian,
    huber_swap,
    make_perturbation,
    parse_delta,
)
from mu_manifold.utils import sum_norm


def test_huber_swap_values():
    assert np.array_equal(huber_swap(np.zeros(2)), np.zeros(2))
    assert np.allclose(huber_swap(np.array([2.0, 0.5])), [0.125, 1.5])

    jacobian = finite_difference_jacobian(huber_swap, np.zeros((1, 2)))[0]
    assert np.allclose(jacobian, 0.0, atol=1e-10)


def test_huber_swap_requires_planar_states():
    with pytest.raises(ValueError):
        huber_swap(np.zeros(3))


def test_zero_shape_vanishes(poly):
    f = make_perturbation(poly, 0.2, 0.01, "zero")
    assert f.is_zero
    assert np.array_equal(f(3.0, np.array([[1.0, -2.0]])), np.zeros((1, 2)))


def test_envelope(poly):
    f = make_perturbation(poly, 0.2, 0.01, "huber_swap")
    # delta mu'(t) mu(t)^(-3 eps - 1) with mu(t) = t + 1
    assert f.envelope(3.0) == pytest.approx(0.01 * 4.0**-1.6)
    values = f(np.array([0.0, 3.0])[:, None], np.array([[[2.0, 0.5]], [[2.0, 0.5]]]))
    assert values.shape == (2, 1, 2)
    assert np.allclose(values[1, 0], f.envelope(3.0) * np.array([0.125, 1.5]))


def test_make_perturbation_rejects_bad_input(poly):
    with pytest.raises(ValueError):
        make_perturbation(poly, 0.2, -1.0, "huber_swap")
    with pytest.raises(ValueError):
        make_perturbation(poly, 0.2, 0.01, "custom")
    with pytest.raises(ValueError):
        make_perturbation(poly, 0.2, 0.01, "cubic")


def test_default_samples_lie_in_the_ball():
    samples = default_samples(2, count=100, radius=2.0)
    assert samples.shape == (100, 2)
    assert np.all(sum_norm(samples) <= 2.0)
    assert np.array_equal(samples, default_samples(2, count=100, radius=2.0))


def test_zero_shape_passes_with_zero_ratios(poly):
    f = make_perturbation(poly, 0.2, 0.01, "zero")
    report = check_perturbation(f, np.linspace(0, 10, 5), default_samples(2, count=30, radius=2.0))
    assert report.passed
    assert report.details["max_lipschitz"] == 0.0
    assert report.details["max_jacobian_bound"] == 0.0


def test_huber_swap_satisfies_the_conditions(poly):
    f = make_perturbation(poly, 0.2, 0.01, "huber_swap")
    report = check_perturbation(f, np.linspace(0.0, 50.0, 51), default_samples(2, count=200, radius=5.0))
    assert report.passed, report.details["violations"]
    assert report.details["max_jacobian_bound"] <= 1.0 + 1e-6


def test_unclipped_square_violates_the_jacobian_bound(poly):
    def square_swap(v):
        return np.stack([v[..., 1] ** 2, v[..., 0] ** 2], axis=-1)

    f = make_perturbation(poly, 0.2, 0.01, "custom", square_swap)
    report = check_perturbation(f, np.linspace(0, 10, 3), default_samples(2, count=60, radius=10.0))
    assert not report.passed
    assert not report.checks["jacobian_bound"]
    assert "jacobian_bound" in report.details["violations"]
    assert report.details["max_jacobian_bound"] > 1.0


def test_delta_max_thresholds():
    bounds = delta_max(1.0, 2.0, 0.1, -1.0, 1.0)
    assert bounds.delta_max == pytest.approx(1.0 / 70.0)
    assert bounds.binding == "b2_trajectory_derivative"
    assert bounds.b1 == pytest.approx(0.05)
    assert bounds.b3 == pytest.approx(0.1)
    assert bounds.b4 == pytest.approx(2.0 / 30.0)
    assert bounds.b5 == pytest.approx(0.55)
    assert bounds.b6 == pytest.approx(2.2 / 28.0)
    assert bounds.b7 == pytest.approx(2.2 / 6.0)

    assert delta_max(1.0, 2.0, 0.2, -1.0, 1.0).delta_max == pytest.approx(1.0 / 35.0)


def test_delta_max_large_class_constant():
    bounds = delta_max(1.0, 1e9, 0.1, -1.0, 1.0)
    assert bounds.b1 == pytest.approx(bounds.b3, rel=1e-8)


def test_delta_max_rejects_gap_boundary():
    with pytest.raises(ValueError, match="Gap"):
        delta_max(1.0, 2.0, 0.5, -0.5, 0.0)


def test_parse_delta():
    bounds = delta_max(1.0, 2.0, 0.2, -1.0, 1.0)
    assert parse_delta("auto:0.5", bounds) == pytest.approx(1.0 / 70.0)
    assert parse_delta("0.003", bounds) == 0.003
    assert parse_delta(0.003, bounds) == 0.003
    for token in ["auto:", "auto:x", "auto:-1", "small"]:
        with pytest.raises(ValueError):
            parse_delta(token, bounds)


@settings(max_examples=50, deadline=None)
@given(
    D=st.floats(1.0, 5.0),
    ratio=st.floats(1.01, 10.0),
    eps=st.floats(0.01, 0.5),
    a=st.floats(-3.0, -0.1),
    b=st.floats(0.0, 3.0),
)
def test_delta_max_shrinks_with_the_class_constant(D, ratio, eps, a, b):
    assume(a + eps < b)
    C = ratio * D
    assert delta_max(D, 4.0 * C, eps, a, b).delta_max <= delta_max(D, 2.0 * C, eps, a, b).delta_max
