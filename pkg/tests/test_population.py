import numpy as np
import pytest

from dyntx.core.exceptions import UnreachableCell, UnsupportedLatent
from dyntx.models.panel import PanelData
from dyntx.models.structural import LatentSpec
from dyntx.services.population import Backend, Cell, empirical_evaluator, exact_evaluator, mc_population_evaluator
from dyntx.services.quadrature import LatentQuadrature, hermite_rule
from dyntx.services.simulate import simulate_panel


def test_hermite_rule_is_a_probability_rule():
    nodes, weights = hermite_rule(16)
    assert weights.sum() == pytest.approx(1.0)
    assert np.dot(weights, nodes) == pytest.approx(0.0, abs=1e-12)
    assert np.dot(weights, nodes ** 2) == pytest.approx(1.0)


def test_quadrature_reproduces_normal_probabilities(dgp_a):
    rule = LatentQuadrature(dgp_a.latent, 2, order=16)
    # Pr[U_1 <= 0.3] for a standard normal
    assert rule.integrate(rule.outcome(0, 0.3, 1)) == pytest.approx(0.6179114222, abs=1e-5)
    assert rule.integrate(rule.treatment(1, -0.2, 0)) == pytest.approx(1.0 - 0.4207402906, abs=1e-5)


def test_quadrature_rejects_low_order(dgp_a):
    with pytest.raises(ValueError):
        LatentQuadrature(dgp_a.latent, 2, order=4)


def test_exact_backend_rejects_rs_general(dgp_a):
    model = dgp_a.with_latent(LatentSpec.rs_general([0.5, 0.5], [0.4, 0.4]))
    with pytest.raises(UnsupportedLatent):
        exact_evaluator(model)


def test_path_table_is_a_distribution(ev_a):
    table = ev_a.path_table((1, 0), (2, 3))
    assert table.shape == (2, 2, 2, 2)
    assert table.sum() == pytest.approx(1.0, abs=1e-12)
    assert (table >= 0).all()


def test_measure_of_free_cell_is_one(ev_a):
    free = (None, None)
    assert ev_a.measure(Cell(free, free, free, free)) == pytest.approx(1.0, abs=1e-12)
    assert ev_a.x_law((1, 4)) == pytest.approx(1.0 / 25.0)
    assert ev_a.instrument_law((1, 0), (2, 2)) == pytest.approx(0.25)


def test_conditionals_add_up(ev_a):
    history = Cell.history(z=(1,), x=(2,), y=(0,), d=(1,))
    total = sum(ev_a.joint(history, 0, 3, y, d).estimate for y in (0, 1) for d in (0, 1))
    assert total == pytest.approx(1.0, abs=1e-12)
    propensity = ev_a.propensity(history, 1, 1).estimate + ev_a.propensity(history, 1, 0).estimate
    assert propensity == pytest.approx(1.0, abs=1e-12)


def test_instrument_raises_the_propensity(ev_a):
    history = Cell.history()
    assert ev_a.propensity(history, 1, 1).estimate > ev_a.propensity(history, 0, 1).estimate + 0.2


def test_unreachable_cell_raises(trivial_model):
    ev = exact_evaluator(trivial_model)
    # Y_1 = 1 never happens
    given = Cell.history(z=(1,), x=(0,), y=(1,), d=(None,))
    with pytest.raises(UnreachableCell) as info:
        ev.conditional(given.extend(z=0, x=0, y=0, d=None), given.extend(z=0, x=0))
    assert info.value.cell["y"] == "1*"
    assert not ev.reachable(given)


def test_counting_evaluator_matches_frequencies():
    panel = PanelData(
        y=np.array([[1], [0], [1], [1]]),
        d=np.array([[1], [1], [0], [1]]),
        x=np.array([[0], [0], [1], [0]]),
        z=np.array([[1], [1], [0], [1]]),
    )
    ev = empirical_evaluator(panel, min_cell_count=1)
    assert ev.backend == Backend.EMPIRICAL
    assert ev.grid_sizes == (2,)
    stats = ev.transition(Cell.history(), 1, 0, 1, 1)
    assert stats.count == 3
    assert stats.estimate == pytest.approx(2.0 / 3.0)
    assert stats.std_error == pytest.approx(np.sqrt(2.0 / 9.0 / 3.0))


def test_counting_floor():
    panel = PanelData(y=np.zeros((10, 1)), d=np.zeros((10, 1)), x=np.zeros((10, 1)), z=np.zeros((10, 1)))
    ev = empirical_evaluator(panel)
    with pytest.raises(UnreachableCell):
        ev.propensity(Cell.history(), 0, 1)


def test_reweighted_evaluator_counts_multiplicities():
    panel = PanelData(
        y=np.array([[1], [0], [1]]), d=np.array([[1], [1], [1]]), x=np.zeros((3, 1)), z=np.ones((3, 1))
    )
    ev = empirical_evaluator(panel, min_cell_count=1, irreversible_y=True)
    clone = ev.reweighted(np.array([0.0, 3.0, 0.0]))
    assert clone.n == 3
    assert clone.irreversible_y
    assert clone.transition(Cell.history(), 1, 0, 1, 1).estimate == 0.0
    same = ev.reweighted(np.ones(3))
    assert same.transition(Cell.history(), 1, 0, 1, 1).estimate == pytest.approx(2.0 / 3.0)


def test_mc_backend_needs_enough_draws(dgp_a):
    with pytest.raises(ValueError, match="at least"):
        mc_population_evaluator(dgp_a, draws=1000)


@pytest.mark.slow
def test_mc_backend_agrees_with_exact(dgp_a, ev_a):
    ev = mc_population_evaluator(dgp_a, draws=400_000, seed=5)
    history = Cell.history(z=(1,), x=(2,), y=(1,), d=(0,))
    exact = ev_a.joint(history, 0, 1, 1, 1).estimate
    stats = ev.joint(history, 0, 1, 1, 1)
    assert abs(stats.estimate - exact) < 5 * stats.std_error + 1e-3


@pytest.mark.slow
@pytest.mark.parametrize(
    "history, z_t, x_t, d",
    [
        (Cell.history(), 1, 2, 1),
        (Cell.history(z=(1,), x=(2,), y=(1,), d=(1,)), None, None, 1),
    ],
)
def test_empirical_transitions_are_unbiased(dgp_a, ev_a, history, z_t, x_t, d):
    truth = ev_a.transition(history, z_t, x_t, d, 1).estimate
    estimates, variances = [], []
    for seed in range(200):
        stats = empirical_evaluator(simulate_panel(dgp_a, 10_000, seed=500 + seed)).transition(history, z_t, x_t, d, 1)
        estimates.append(stats.estimate)
        variances.append(stats.std_error**2)
    std_error = np.sqrt(np.sum(variances)) / len(estimates)
    assert abs(np.mean(estimates) - truth) < 4 * std_error
