import numpy as np
import pytest

from dyntx.core.exceptions import RegimeError
from dyntx.models import designs
from dyntx.models.structural import Regime
from dyntx.services import regimes as regimes_module
from dyntx.services.identify import ArsfResult, IdentStatus, identify_ate
from dyntx.services.population import exact_evaluator
from dyntx.services.recursion import RecursionOptions
from dyntx.services.regimes import (
    ObjectiveSpec,
    RankingStatus,
    RegimeValue,
    enumerate_regimes,
    exclusion_set,
    rank_regimes,
    rank_strata,
)
from dyntx.services.simulate import oracle_arsf


@pytest.fixture
def ev_one_period(one_period_model):
    return exact_evaluator(one_period_model)


def test_enumerate_regimes():
    assert [r.label for r in enumerate_regimes(2)] == ["00", "01", "10", "11"]
    assert [r.label for r in enumerate_regimes(2, irreversible=True)] == ["00", "01", "11"]
    assert [r.label for r in enumerate_regimes(3, mask=(0, 1, 1))] == ["*00", "*01", "*10", "*11"]
    with pytest.raises(RegimeError):
        enumerate_regimes(2, mask=(1,))


def test_one_period_argmax_follows_the_ate(ev_one_period):
    ranking = rank_regimes(ev_one_period, ObjectiveSpec.terminal(), x=(2,))
    ate = identify_ate(ev_one_period, Regime((1,)), Regime((0,)), (2,)).value
    assert ranking.status == RankingStatus.DECIDED
    assert ranking.argmax == (["1"] if ate > 0 else ["0"])
    assert ranking.excluded == (["0"] if ate > 0 else ["1"])


def test_treatment_cost_can_flip_the_argmax(ev_one_period):
    ate = identify_ate(ev_one_period, Regime((1,)), Regime((0,)), (2,)).value
    assert ate > 0
    ranking = rank_regimes(ev_one_period, ObjectiveSpec.terminal(cost=ate + 0.1), x=(2,))
    assert ranking.argmax == ["0"]


def test_argmax_is_invariant_to_scaling(ev_a):
    objective = ObjectiveSpec.weighted_sum([0.5, 1.0], [0.05, 0.05])
    base = rank_regimes(ev_a, objective, x=(2, 2), n_jobs=1)
    scaled = rank_regimes(ev_a, objective.scaled(3.0), x=(2, 2), n_jobs=1)
    assert base.argmax == scaled.argmax
    assert base.status == RankingStatus.DECIDED
    for a, b in zip(base.entries, scaled.entries):
        assert b.lo == pytest.approx(3.0 * a.lo)


def test_irreversible_policy_filters_regimes(monkeypatch, ev_irreversible):
    seen = []

    def fake_identify(ev, regime, x, options=None, horizon=None, z=None):
        seen.append(regime.label)
        return ArsfResult(regime, tuple(x), horizon, IdentStatus.POINT, 0.5, 0.5)

    monkeypatch.setattr(regimes_module, "identify_arsf", fake_identify)
    ranking = rank_regimes(ev_irreversible, ObjectiveSpec.terminal(), x=(0, 0), n_jobs=1)
    assert set(seen) == {"00", "01", "11"}
    assert sorted(ranking.argmax) == ["00", "01", "11"]
    assert ranking.excluded == []

    with pytest.raises(RegimeError, match="irreversible"):
        rank_regimes(ev_irreversible, ObjectiveSpec.terminal(), [Regime((1, 0))], x=(0, 0), n_jobs=1)


def test_failed_identification_is_an_error(monkeypatch, ev_a):
    def failing(ev, regime, x, options=None, horizon=None, z=None):
        return ArsfResult(regime, tuple(x), horizon, IdentStatus.FAILED, None, None, message="boom")

    monkeypatch.setattr(regimes_module, "identify_arsf", failing)
    with pytest.raises(RegimeError, match="boom"):
        rank_regimes(ev_a, ObjectiveSpec.terminal(), x=(2, 2), n_jobs=1)


def test_regime_length_is_checked(ev_a):
    with pytest.raises(RegimeError, match="regime length mismatch"):
        rank_regimes(ev_a, ObjectiveSpec.terminal(), [Regime((1, 0, 1))], x=(2, 2), n_jobs=1)


def test_exclusion_set():
    entries = [
        RegimeValue(Regime((0, 0)), 0.1, 0.2, False),
        RegimeValue(Regime((0, 1)), 0.3, 0.6, False),
        RegimeValue(Regime((1, 1)), 0.5, 0.7, False),
    ]
    assert exclusion_set(entries) == ["00"]


def test_bounded_values_give_a_partial_ranking(monkeypatch, ev_a):
    intervals = {"00": (0.1, 0.2), "01": (0.3, 0.6), "10": (0.35, 0.5), "11": (0.5, 0.7)}

    def bounded(ev, regime, x, options=None, horizon=None, z=None):
        lo, hi = intervals[regime.label]
        return ArsfResult(regime, tuple(x), horizon, IdentStatus.BOUNDS, lo, hi)

    monkeypatch.setattr(regimes_module, "identify_arsf", bounded)
    ranking = rank_regimes(ev_a, ObjectiveSpec.terminal(), x=(2, 2), n_jobs=1)
    assert ranking.status == RankingStatus.PARTIAL
    assert ranking.excluded == ["00"]
    assert ranking.argmax == ["01", "10", "11"]

    weighted = rank_regimes(ev_a, ObjectiveSpec.weighted_sum([0.0, 1.0]), x=(2, 2), n_jobs=1)
    assert weighted.status == RankingStatus.INCONCLUSIVE
    assert weighted.argmax == []


def test_objective_checks():
    with pytest.raises(ValueError):
        ObjectiveSpec.weighted_sum([1.0]).check(2)
    with pytest.raises(ValueError):
        ObjectiveSpec.terminal(weight=float("nan")).check(2)
    ObjectiveSpec.weighted_sum([1.0, 1.0], [0.0, 0.1]).check(2)


def test_rank_strata_keeps_strata_apart(ev_a, ev_exogenous):
    rankings = rank_strata({1: ev_exogenous, 0: ev_a}, ObjectiveSpec.terminal())
    assert [r.stratum for r in rankings] == [0, 1]
    assert all(r.status == RankingStatus.DECIDED for r in rankings)
    payload = rankings[0].to_dict()
    assert len(payload["table"]) == 4
    assert payload["objective"]["kind"] == "TerminalARSF"


def _oracle_objective(model, regime, x, weights, costs):
    values = oracle_arsf(model, regime, x, method="exact").values
    return sum(w * v for w, v in zip(weights, values)) - sum(c * d for c, d in zip(costs, regime.d))


@pytest.mark.parametrize(
    "objective, weights, costs",
    [
        (ObjectiveSpec.terminal(), (0.0, 1.0), (0.0, 0.0)),
        (ObjectiveSpec.weighted_sum([0.5, 1.0], [0.05, 0.05]), (0.5, 1.0), (0.05, 0.05)),
    ],
    ids=["terminal", "weighted"],
)
def test_argmax_equals_oracle_argmax(dgp_a, ev_a, objective, weights, costs):
    ranking = rank_regimes(ev_a, objective, x=(2, 2), n_jobs=1)
    oracle = {r.label: _oracle_objective(dgp_a, r, (2, 2), weights, costs) for r in enumerate_regimes(2)}
    assert ranking.argmax == [max(oracle, key=oracle.get)]
    for entry in ranking.entries:
        assert entry.lo == pytest.approx(oracle[entry.regime.label], abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_bounds_never_exclude_the_optimum(seed):
    model = designs.dgp_b(model=designs.random_design(np.random.default_rng(900 + seed)))
    ev = exact_evaluator(model)
    ranking = rank_regimes(
        ev, ObjectiveSpec.terminal(), x=(2, 3), options=RecursionOptions(fallback_bounds=True), n_jobs=1
    )
    oracle = {r.label: oracle_arsf(model, r, (2, 3), method="exact").value for r in enumerate_regimes(2)}
    assert max(oracle, key=oracle.get) not in ranking.excluded


def test_threads_share_one_fresh_evaluator(dgp_a):
    objective = ObjectiveSpec.weighted_sum([0.5, 1.0], [0.05, 0.05])
    serial = rank_regimes(exact_evaluator(dgp_a), objective, x=(2, 2), n_jobs=1)
    threaded = rank_regimes(exact_evaluator(dgp_a), objective, x=(2, 2), n_jobs=4)
    assert [(e.regime.label, e.lo, e.hi) for e in threaded.entries] == [
        (e.regime.label, e.lo, e.hi) for e in serial.entries
    ]
    assert threaded.argmax == serial.argmax
