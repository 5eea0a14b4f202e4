import pytest

from mu_manifold import SolverConfig, delta_max, example_system, make_growth, make_perturbation, solve_manifold


# D = 1, C = 2, a = -1, b = 1, eps = 0.2 on mu(t) = t + 1
CANONICAL = {"a": -1.0, "b": 1.0, "eps": 0.2, "D": 1.0, "C": 2.0}


@pytest.fixture(scope="session")
def poly():
    return make_growth("poly")


@pytest.fixture(scope="session")
def example(poly):
    return example_system(poly, CANONICAL["a"], CANONICAL["b"], CANONICAL["eps"])


@pytest.fixture(scope="session")
def canonical_delta():
    bounds = delta_max(CANONICAL["D"], CANONICAL["C"], CANONICAL["eps"], CANONICAL["a"], CANONICAL["b"])
    return bounds.delta_max / 2.0


@pytest.fixture(scope="session")
def perturbation(poly, canonical_delta):
    return make_perturbation(poly, CANONICAL["eps"], canonical_delta, "huber_swap")


@pytest.fixture(scope="session")
def zero_perturbation(poly, canonical_delta):
    return make_perturbation(poly, CANONICAL["eps"], canonical_delta, "zero")


@pytest.fixture(scope="session")
def canonical_config():
    return SolverConfig(C=CANONICAL["C"])


@pytest.fixture(scope="session")
def small_config():
    return SolverConfig(C=CANONICAL["C"], t_max=30.0, t_step=0.1, xi_range=0.5, xi_step=0.05, tol_tail=1e-4)


@pytest.fixture(scope="session")
def canonical_solution(example, perturbation, canonical_config):
    phi, diagnostics = solve_manifold(example, perturbation, canonical_config)
    return phi, diagnostics


@pytest.fixture(scope="session")
def zero_solution(example, zero_perturbation, small_config):
    return solve_manifold(example, zero_perturbation, small_config)
