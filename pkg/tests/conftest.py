import json

import numpy as np
import pytest

from dyntx.models import designs
from dyntx.models.structural import LatentSpec, build_model
from dyntx.services.population import exact_evaluator


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow Monte Carlo tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo or acceptance-scale test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def cyclic(**overrides):
    params = dict(
        horizon=2,
        levels=designs.DGP_A_GRID,
        history_shift=(0.3, 0.0),
        pi_base=-0.4,
        pi_z=0.9,
        pi_history=(0.2, 0.3),
        latent=LatentSpec.blocks(2, 0.5, 0.3, 0.15),
    )
    params.update(overrides)
    return designs.cyclic_design(**params)


@pytest.fixture(scope="session")
def dgp_a():
    return designs.dgp_a()


@pytest.fixture(scope="session")
def dgp_b():
    return designs.dgp_b()


@pytest.fixture(scope="session")
def exogenous_model():
    """No correlation among the latents: treatment is as good as random given the history."""
    return designs.dgp_a(rho_uv=0.0, rho_time=0.0, rho_cross=0.0)


@pytest.fixture(scope="session")
def three_point_model():
    """Endogenous two-period design on a coarse grid, small enough for sample-analog tests."""
    return cyclic(levels=(-0.6, 0.0, 0.6))


@pytest.fixture(scope="session")
def one_period_model():
    return designs.dgp_a(horizon=1)


@pytest.fixture(scope="session")
def irreversible_model():
    return cyclic(irreversible_d=True)


@pytest.fixture(scope="session")
def carryover_model():
    return cyclic(history_shift=(0.3, 0.25))


@pytest.fixture(scope="session")
def trivial_model():
    """Outcome thresholds of -inf: nobody ever has Y = 1."""
    return build_model(
        horizon=2,
        x_grid=[(0.0, 1.0), (0.0, 1.0)],
        mu_fn=lambda t, ys, ds, x_value, k: -np.inf,
        pi_fn=lambda t, ys, ds, z: -0.2 + 0.8 * z,
        latent=LatentSpec.independent(2),
    )


@pytest.fixture(scope="session")
def ev_a(dgp_a):
    return exact_evaluator(dgp_a)


@pytest.fixture(scope="session")
def ev_b(dgp_b):
    return exact_evaluator(dgp_b)


@pytest.fixture(scope="session")
def ev_exogenous(exogenous_model):
    return exact_evaluator(exogenous_model)


@pytest.fixture(scope="session")
def ev_irreversible(irreversible_model):
    return exact_evaluator(irreversible_model)


@pytest.fixture
def write_config(tmp_path):
    """Write a RunConfig payload as JSON and return its path."""

    def write(payload, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload, indent=2))
        return str(path)

    return write
