import itertools
from dataclasses import replace

import numpy as np
import pytest

from dyntx.core.exceptions import (
    DegenerateConditioning,
    IrrelevantInstrument,
    ModelValidationError,
    NoMatch,
    RegimeError,
)
from dyntx.models import designs
from dyntx.models.structural import Regime
from dyntx.services.identify import (
    IdentStatus,
    arsf_closed_form_t2,
    g_computation_arsf,
    identify_arsf,
    identify_arsf_subsequence,
    identify_ate,
    identify_joint_prob,
    identify_period_ate,
    identify_transition_ate,
)
from dyntx.services.population import exact_evaluator, mc_population_evaluator
from dyntx.services.recursion import RecursionOptions
from dyntx.services.simulate import oracle_arsf, oracle_period_ate, oracle_transition
from tests.conftest import cyclic

REGIMES = [Regime(d) for d in itertools.product((0, 1), repeat=2)]
X_POINTS = [(2, 2), (0, 4), (4, 1)]
SKEWED_X_LAW = np.array([0.4, 0.3, 0.15, 0.1, 0.05])


@pytest.fixture(scope="module")
def untreated_second_period():
    """Second-period outcome ignores the treatment; x_2 is far from uniform."""
    model = cyclic(untreated=(2,))
    return replace(model, x_law=(model.x_law[0], SKEWED_X_LAW))


@pytest.mark.parametrize("regime", REGIMES, ids=lambda r: r.label)
@pytest.mark.parametrize("x", X_POINTS)
def test_arsf_equals_oracle_on_dgp_a(dgp_a, ev_a, regime, x):
    result = identify_arsf(ev_a, regime, x)
    oracle = oracle_arsf(dgp_a, regime, x, method="exact")
    assert result.status == IdentStatus.POINT
    assert result.value == pytest.approx(oracle.value, abs=1e-6)


@pytest.mark.parametrize("regime", REGIMES, ids=lambda r: r.label)
def test_first_period_arsf_equals_oracle(dgp_a, ev_a, regime):
    result = identify_arsf(ev_a, regime, (1, 3), horizon=1)
    oracle = oracle_arsf(dgp_a, regime, (1, 3), method="exact")
    assert result.horizon == 1
    assert result.value == pytest.approx(oracle.values[0], abs=1e-6)


@pytest.mark.parametrize("regime", REGIMES, ids=lambda r: r.label)
def test_closed_form_matches_engine(ev_a, regime):
    for x in X_POINTS:
        assert arsf_closed_form_t2(ev_a, regime, x) == pytest.approx(identify_arsf(ev_a, regime, x).value, abs=1e-12)


def test_closed_form_needs_two_periods(one_period_model):
    with pytest.raises(RegimeError):
        arsf_closed_form_t2(exact_evaluator(one_period_model), Regime((1,)), (2,))


def test_exogenous_treatment_agrees_with_g_computation(exogenous_model, ev_exogenous):
    for regime in REGIMES:
        oracle = oracle_arsf(exogenous_model, regime, (2, 2), method="exact").value
        assert identify_arsf(ev_exogenous, regime, (2, 2)).value == pytest.approx(oracle, abs=1e-9)
        assert g_computation_arsf(ev_exogenous, regime, (2, 2)) == pytest.approx(oracle, abs=1e-9)


def test_g_computation_is_biased_under_endogenous_selection(dgp_a, ev_a):
    gaps = [
        abs(g_computation_arsf(ev_a, regime, (2, 2)) - oracle_arsf(dgp_a, regime, (2, 2), method="exact").value)
        for regime in REGIMES
    ]
    assert max(gaps) > 1e-3


def test_masked_regime_equals_oracle(dgp_a, ev_a):
    regime = Regime.from_string("*1")
    result = identify_arsf_subsequence(ev_a, regime, [3])
    assert result.x == (None, 3)
    oracle = oracle_arsf(dgp_a, regime, (None, 3), method="exact")
    assert result.value == pytest.approx(oracle.value, abs=1e-6)
    inactive = [node for node in result.nodes() if not node.active]
    assert inactive and all(not node.substituted for node in inactive)


@pytest.mark.parametrize("label", ["1*", "0*"])
def test_first_period_treatment_equals_oracle(untreated_second_period, label):
    regime = Regime.from_string(label)
    result = identify_arsf_subsequence(exact_evaluator(untreated_second_period), regime, [2])
    assert result.x == (2, None)
    oracle = oracle_arsf(untreated_second_period, regime, (2, None), method="exact")
    assert result.value == pytest.approx(oracle.value, abs=1e-6)


def test_masked_regime_rejects_outcomes_driven_by_free_treatment(dgp_a):
    skewed = replace(dgp_a, x_law=(dgp_a.x_law[0], SKEWED_X_LAW))
    with pytest.raises(ModelValidationError) as info:
        identify_arsf_subsequence(exact_evaluator(skewed), Regime.from_string("1*"), [2])
    assert [v.code for v in info.value.violations] == ["masked_free_treatment"]
    # treatments left free before the first intervention are fine
    identify_arsf_subsequence(exact_evaluator(skewed), Regime.from_string("*1"), [3])


def test_ate_is_difference_of_arsfs(dgp_a, ev_a):
    a, b = Regime((1, 1)), Regime((0, 0))
    effect = identify_ate(ev_a, a, b, (2, 2))
    expected = (
        oracle_arsf(dgp_a, a, (2, 2), method="exact").value - oracle_arsf(dgp_a, b, (2, 2), method="exact").value
    )
    assert effect.status == IdentStatus.POINT
    assert effect.value == pytest.approx(expected, abs=1e-6)
    assert identify_ate(ev_a, a, a, (2, 2)).value == 0.0


def test_joint_probability(dgp_a, ev_a):
    regime = Regime((0, 1))
    oracle = oracle_arsf(dgp_a, regime, (2, 2), method="exact")
    first = identify_joint_prob(ev_a, regime, {1: 1}, (2, 2), include_terminal=False)
    assert first == pytest.approx(oracle.values[0], abs=1e-6)
    assert identify_joint_prob(ev_a, regime, {}, (2, 2), include_terminal=False) == 1.0
    both = identify_joint_prob(ev_a, regime, {1: 0}, (2, 2)) + identify_joint_prob(ev_a, regime, {1: 1}, (2, 2))
    assert both == pytest.approx(identify_arsf(ev_a, regime, (2, 2)).value, abs=1e-10)


@pytest.mark.parametrize("y1", [0, 1])
def test_transition_ate_equals_oracle(dgp_a, ev_a, y1):
    a, b = Regime((1, 1)), Regime((1, 0))
    effect = identify_transition_ate(ev_a, a, b, {1: y1}, (3, 1))
    expected = (
        oracle_transition(dgp_a, a, {1: y1}, (3, 1), method="exact").ratio
        - oracle_transition(dgp_a, b, {1: y1}, (3, 1), method="exact").ratio
    )
    assert effect.value == pytest.approx(expected, abs=1e-6)
    assert effect.components["a"]["denominator"] > 0.0


def test_transition_ate_rejects_terminal_period(ev_a):
    with pytest.raises(RegimeError):
        identify_transition_ate(ev_a, Regime((1, 1)), Regime((0, 0)), {2: 1}, (2, 2))


def test_transition_ate_degenerate_conditioning(trivial_model):
    ev = exact_evaluator(trivial_model)
    with pytest.raises(DegenerateConditioning):
        identify_transition_ate(ev, Regime((1, 1)), Regime((0, 1)), {1: 1}, (0, 1))


@pytest.mark.parametrize("y_prev", [0, 1])
def test_period_ate_equals_oracle(dgp_a, ev_a, y_prev):
    effect = identify_period_ate(ev_a, y_prev, (2, 3))
    oracle = oracle_period_ate(dgp_a, y_prev, (2, 3), method="exact")
    assert effect.value == pytest.approx(oracle["ate"], abs=1e-6)
    assert effect.components["treated"] == pytest.approx(oracle["treated"], abs=1e-6)


def test_period_ate_marginal_mixture(ev_a):
    effect = identify_period_ate(ev_a, 1, (2, 3), mixture="marginal")
    assert -1.0 <= effect.value <= 1.0
    assert effect.components["mixture"] == "marginal"
    with pytest.raises(ValueError):
        identify_period_ate(ev_a, 1, (2, 3), mixture="pooled")


def test_period_ate_with_one_period_is_the_ate(one_period_model):
    ev = exact_evaluator(one_period_model)
    effect = identify_period_ate(ev, 0, (1,))
    assert effect.value == pytest.approx(identify_ate(ev, Regime((1,)), Regime((0,)), (1,)).value, abs=1e-12)
    with pytest.raises(DegenerateConditioning):
        identify_period_ate(ev, 1, (1,))


def test_regime_length_mismatch(ev_a):
    with pytest.raises(RegimeError, match="regime length mismatch"):
        identify_arsf(ev_a, Regime((1, 0, 1)), (2, 2, 2))
    with pytest.raises(RegimeError):
        identify_arsf(ev_a, Regime((1, 0)), (2, 7))
    with pytest.raises(RegimeError):
        identify_arsf(ev_a, Regime((1, 0)), (2, None))


def test_no_match_raises_or_falls_back(dgp_b, ev_b):
    regime, x = Regime((1, 1)), (2, 3)
    with pytest.raises(NoMatch) as info:
        identify_arsf(ev_b, regime, x)
    assert info.value.t == 2

    failed = identify_arsf(ev_b, regime, x, RecursionOptions(raise_on_failure=False))
    assert failed.status == IdentStatus.FAILED
    assert failed.value is None and "no matching grid point" in failed.message

    bounded = identify_arsf(ev_b, regime, x, RecursionOptions(fallback_bounds=True))
    assert bounded.status == IdentStatus.BOUNDS
    assert bounded.ledger
    oracle = oracle_arsf(dgp_b, regime, x, method="exact").value
    assert bounded.lo - 1e-9 <= oracle <= bounded.hi + 1e-9
    assert bounded.to_dict()["interval"] == [bounded.lo, bounded.hi]


def test_irreversible_treatment(irreversible_model, ev_irreversible):
    for label in ("11", "01"):
        regime = Regime.from_string(label)
        oracle = oracle_arsf(irreversible_model, regime, (2, 2), method="exact").value
        assert identify_arsf(ev_irreversible, regime, (2, 2)).value == pytest.approx(oracle, abs=1e-6)
    # Never-treat is reached from treated histories, where the instrument has no effect
    with pytest.raises(IrrelevantInstrument):
        identify_arsf(ev_irreversible, Regime((0, 0)), (2, 2))
    with pytest.raises(RegimeError):
        identify_arsf(ev_irreversible, Regime((1, 0)), (2, 2))


def test_trace_records_substitutions(ev_a):
    result = identify_arsf(ev_a, Regime((1, 0)), (2, 2))
    assert len(result.trace) == 4
    assert sum(weight for _, weight in result.aggregation) == pytest.approx(1.0)
    substituted = [node for node in result.nodes() if node.substituted]
    assert substituted
    first = [node for node in substituted if node.t == 1]
    assert all(node.matched_x == 3 for node in first)
    payload = result.to_dict(include_trace=True)
    assert payload["value"] == result.value
    assert len(payload["trace"]) == 4
    assert identify_arsf(ev_a, Regime((1, 0)), (2, 2), RecursionOptions(trace=False)).trace == []


def test_quadrature_order_convergence(dgp_a):
    regime = Regime((1, 0))
    coarse = identify_arsf(exact_evaluator(dgp_a, quad_order=16), regime, (1, 2)).value
    fine = identify_arsf(exact_evaluator(dgp_a, quad_order=32), regime, (1, 2)).value
    assert coarse == pytest.approx(fine, abs=1e-5)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_arsf_equals_oracle_on_random_designs(seed):
    model = designs.random_design(np.random.default_rng(seed))
    ev = exact_evaluator(model)
    for regime in REGIMES:
        oracle = oracle_arsf(model, regime, (1, 3), method="exact").value
        assert identify_arsf(ev, regime, (1, 3)).value == pytest.approx(oracle, abs=1e-6)


def test_branch_weights_sum_to_one(ev_a):
    result = identify_arsf(ev_a, Regime((0, 1)), (4, 0))
    active = [node for node in result.nodes() if node.active]
    assert active
    for node in active:
        assert node.weight_consistent + node.weight_flipped == pytest.approx(1.0, abs=1e-10)
        assert 0.0 <= node.lo <= node.hi <= 1.0


@pytest.mark.slow
def test_g_computation_bias_is_visible_at_a_million_draws(dgp_a, exogenous_model):
    worst = {}
    for name, model in (("exogenous", exogenous_model), ("endogenous", dgp_a)):
        evaluators = [mc_population_evaluator(model, 1_000_000, seed=700 + seed) for seed in range(12)]
        gaps = []
        for regime in REGIMES:
            draws = np.array([g_computation_arsf(ev, regime, (2, 2)) for ev in evaluators])
            truth = oracle_arsf(model, regime, (2, 2), method="exact").value
            std_error = draws.std(ddof=1)
            gaps.append(abs(draws.mean() - truth) / std_error)
        worst[name] = max(gaps)
    # 12 draws: the mean has std_error / sqrt(12)
    assert worst["exogenous"] < 4 / np.sqrt(12)
    assert worst["endogenous"] > 5
