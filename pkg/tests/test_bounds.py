import numpy as np
import pytest

from dyntx.models import designs
from dyntx.models.structural import Regime
from dyntx.services.bounds import bound_arsf, bound_ate
from dyntx.services.identify import identify_arsf
from dyntx.services.matching import Sign
from dyntx.services.population import exact_evaluator
from dyntx.services.recursion import RecursionOptions
from dyntx.services.simulate import oracle_arsf


def _sign(gap: float) -> Sign:
    if gap == 0.0:
        return Sign.ZERO
    return Sign.POSITIVE if gap > 0 else Sign.NEGATIVE


@pytest.mark.parametrize("label, x", [("11", (2, 3)), ("00", (2, 0)), ("10", (1, 3))])
def test_bounds_contain_the_truth_on_dgp_b(dgp_b, ev_b, label, x):
    regime = Regime.from_string(label)
    bounds = bound_arsf(ev_b, regime, x)
    truth = oracle_arsf(dgp_b, regime, x, method="exact").value
    assert bounds.contains(truth)
    assert 0.0 <= bounds.lo <= bounds.hi <= 1.0


def test_bounds_are_informative(ev_b):
    bounds = bound_arsf(ev_b, Regime((1, 1)), (2, 3))
    assert not bounds.degenerate
    assert bounds.width < 1.0
    sides = {entry.side for entry in bounds.ledger}
    assert sides == {"lower", "upper"}
    assert all(entry.t == 2 for entry in bounds.ledger)


def test_ledger_signs_agree_with_the_index_table(dgp_b, ev_b):
    bounds = bound_arsf(ev_b, Regime((1, 1)), (2, 3))
    checked = 0
    for entry in bounds.ledger:
        if entry.x_tilde is None:
            continue
        s = entry.t - 1
        x_s = entry.x[s]
        if entry.arm == 1:
            gap = dgp_b.mu_gap(s, entry.cell.y, entry.cell.d, x_s, entry.x_tilde)
        else:
            gap = -dgp_b.mu_gap(s, entry.cell.y, entry.cell.d, entry.x_tilde, x_s)
        assert entry.sign == _sign(gap)
        expected = Sign.POSITIVE if entry.side == "lower" else Sign.NEGATIVE
        assert entry.sign == expected
        checked += 1
    assert checked > 0


def test_bounds_collapse_where_matching_succeeds(ev_a):
    regime = Regime((0, 1))
    bounds = bound_arsf(ev_a, regime, (2, 2))
    assert bounds.degenerate
    assert bounds.lo == pytest.approx(bounds.hi, abs=1e-12)
    assert bounds.lo == pytest.approx(identify_arsf(ev_a, regime, (2, 2)).value, abs=1e-12)


def test_non_monotone_transitions_widen_the_interval(ev_b):
    regime = Regime((1, 1))
    tight = bound_arsf(ev_b, regime, (2, 3))
    loose = bound_arsf(ev_b, regime, (2, 3), RecursionOptions(monotone_transitions=False))
    assert loose.lo <= tight.lo + 1e-12
    assert loose.hi >= tight.hi - 1e-12


def test_bound_ate(ev_a, ev_b):
    assert bound_ate(ev_a, Regime((1, 1)), Regime((1, 1)), (2, 2)) == (0.0, 0.0)
    lo, hi = bound_ate(ev_b, Regime((1, 1)), Regime((0, 0)), (2, 3))
    assert -1.0 <= lo <= hi <= 1.0


def test_bounds_payload(ev_b):
    payload = bound_arsf(ev_b, Regime((1, 1)), (2, 3)).to_dict(include_trace=True)
    assert payload["regime"] == "11"
    assert payload["lo"] <= payload["hi"]
    assert {entry["side"] for entry in payload["ledger"]} == {"lower", "upper"}
    assert payload["trace"]


def _random_variant(seed):
    full = designs.random_design(np.random.default_rng(500 + seed))
    return full, designs.dgp_b(model=full)


@pytest.mark.parametrize("seed", range(10))
def test_bounds_on_random_variants(seed):
    full, dropped = _random_variant(seed)
    regime, x = Regime((1, 1)), (2, 3)
    bounds = bound_arsf(exact_evaluator(dropped), regime, x)
    assert bounds.contains(oracle_arsf(dropped, regime, x, method="exact").value)

    restored = bound_arsf(exact_evaluator(full), regime, x)
    assert restored.degenerate
    assert restored.hi - restored.lo < 1e-6
    assert restored.lo == pytest.approx(oracle_arsf(full, regime, x, method="exact").value, abs=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10, 50))
def test_bounds_on_more_random_variants(seed):
    _, dropped = _random_variant(seed)
    ev = exact_evaluator(dropped)
    for label in ("11", "01"):
        regime = Regime.from_string(label)
        bounds = bound_arsf(ev, regime, (2, 3))
        assert bounds.contains(oracle_arsf(dropped, regime, (2, 3), method="exact").value)
