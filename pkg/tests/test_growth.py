# Run: pytest tests/test_growth.py

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mu_manifold.growth import (
    make_growth,
    parse_growth,
    power_integral,
    power_integral_quad,
    validate_growth,
)


def test_closed_forms_start_at_one():
    poly = make_growth("poly")
    exp = make_growth("exp", [1.0])
    log = make_growth("log")

    assert poly(0.0) == 1.0
    assert np.all(poly.derivative(np.linspace(0, 10, 5)) == 1.0)
    assert exp(0.0) == 1.0
    assert log(0.0) == pytest.approx(1.0, abs=1e-15)


def test_polynomial_passes_every_check():
    report = validate_growth(make_growth("poly"), np.arange(0.0, 10.5, 0.5))
    assert report.passed
    assert all(report.checks.values())


def test_constant_growth_fails_monotonicity():
    with pytest.raises(ValueError, match="monotone"):
        make_growth("custom", [lambda t: np.ones_like(t), lambda t: np.ones_like(t)])


def test_exponential_derivative_matches_central_differences():
    report = validate_growth(make_growth("exp", [1.0]), np.linspace(0.0, 5.0, 51))
    assert report.checks["derivative_consistency"]
    assert report.details["max_rel_derivative_error"] <= 1e-6


def test_logarithmic_divergence_check_is_advisory():
    report = validate_growth(make_growth("log"))
    assert not report.checks["divergence"]
    assert report.passed


def test_exponential_log_does_not_overflow():
    g = make_growth("exp", [1.0])
    assert g.log(1000.0) == 1000.0
    assert g.ratio_power(1000.0, 999.0, -1.0) == pytest.approx(math.exp(-1.0))


@pytest.mark.parametrize(
    "text, label",
    [("poly", "poly"), ("log", "log"), ("exp", "exp:c=1.0"), ("exp:c=0.5", "exp:c=0.5")],
)
def test_parse_growth(text, label):
    assert parse_growth(text).label == label


@pytest.mark.parametrize("text", ["", "cubic", "exp:c=", "exp:rate=1", "poly:c=2", "custom", "exp:c=-1"])
def test_parse_growth_rejects_malformed(text):
    with pytest.raises(ValueError):
        parse_growth(text)


def test_power_integral_matches_quadrature():
    g = make_growth("poly")
    # int_0^inf (t + 1)^(-1.2) dt = 1 / 0.2
    assert power_integral(g, 0.2, 0.0) == pytest.approx(5.0)
    assert power_integral_quad(g, 0.6, 1.0, 20.0) == pytest.approx(power_integral(g, 0.6, 1.0, 20.0), rel=1e-9)


def test_power_integral_rejects_nonpositive_exponent():
    with pytest.raises(ValueError):
        power_integral(make_growth("poly"), 0.0, 0.0)


@settings(max_examples=25, deadline=None)
@given(
    s=st.floats(0.0, 20.0),
    length=st.floats(0.1, 20.0),
    k=st.floats(0.05, 3.0),
    c=st.floats(0.05, 1.0),
)
def test_power_integral_properties(s, length, k, c):
    g = make_growth("exp", [c])
    t = s + length
    assert power_integral(g, k, s, t) == pytest.approx(power_integral_quad(g, k, s, t), rel=1e-7)
    # the tail beyond t is what separates the finite integral from the infinite one
    assert power_integral(g, k, s) - power_integral(g, k, s, t) == pytest.approx(power_integral(g, k, t), abs=1e-12)


@pytest.mark.parametrize("c", [8.0, 10.0])
def test_fast_exponential_rates_are_accepted(c):
    g = make_growth("exp", [c])
    report = validate_growth(g)
    assert report.passed
    assert report.details["log_growth_factor"] == pytest.approx(100.0 * c)
    assert parse_growth(f"exp:c={c}").label == g.label


def test_log_rate_matches_derivative_over_value():
    t = np.linspace(0.0, 10.0, 11)
    for g in [make_growth("poly"), make_growth("log"), make_growth("exp", [0.5])]:
        assert np.allclose(g.log_rate(t), g.derivative(t) / g(t), rtol=1e-12)
