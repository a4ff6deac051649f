import decimal
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipwatch.detection import (
    H100_FLOPS_PER_DAY,
    DomainError,
    InfeasibleError,
    PolicyParams,
    chips_required,
    detection_prob,
    detection_prob_spread,
    detection_prob_stretched,
    display_count,
    lemma_gap,
    sample_budget,
    samples_per_period,
    snapshot_presence_prob,
    table1,
)

# Reference annual-sample cells, "---" where the run does not fit the fleet.
REFERENCE_CELLS = {
    "GPT-3": ("10", "243", "2.43e+4", "2.43e+6"),
    "Chinchilla": ("19", "132", "1.33e+4", "1.33e+6"),
    "PaLM": ("82", "29", "2.98e+3", "2.99e+5"),
    "Chinchilla-280B": ("314", "7", "771", "7.72e+4"),
    "Chinchilla-1T": ("4.03e+3", "---", "60", "6.02e+3"),
    "Chinchilla-10T": ("4.12e+5", "---", "---", "58"),
}


def test_chips_required_is_flops_over_chip_year():
    assert chips_required(365.0, 1.0, 365.0) == 1.0
    assert chips_required(3.14e23, H100_FLOPS_PER_DAY, 365) == pytest.approx(9.9569, rel=1e-4)


def test_presence_probability_matches_exponential():
    for f, t in [(0.1, 30), (1e-6, 1.0), (5.0, 0.01)]:
        assert snapshot_presence_prob(f, t) == pytest.approx(1 - math.exp(-f * t), rel=1e-12)


@pytest.mark.parametrize("model,cells", REFERENCE_CELLS.items())
def test_table_rows_match_reference_cells(model, cells):
    row = next(r for r in table1() if r.model == model)
    assert display_count(row.chips_1yr) == cells[0]
    assert tuple(display_count(a) for a in row.annual) == cells[1:]


@settings(max_examples=200, deadline=None)
@given(
    flops=st.floats(1e20, 1e27),
    chips=st.floats(1e3, 1e8),
    rate=st.floats(0.01, 2.0),
    prob=st.floats(0.05, 0.99),
)
def test_plan_reaches_target_probability(flops, chips, rate, prob):
    params = PolicyParams(flops, chips, snapshot_rate=rate, target_prob=prob)
    if not params.feasible:
        with pytest.raises(InfeasibleError):
            samples_per_period(params)
        return
    plan = samples_per_period(params)
    total = plan.s_per_period * params.training_days / params.monitoring_days
    # independent oracle: direct product of per-sample miss probabilities at 50 digits
    with decimal.localcontext() as ctx:
        ctx.prec = 50
        miss = (1 - decimal.Decimal(plan.hit_prob)) ** decimal.Decimal(total)
    assert float(1 - miss) == pytest.approx(prob, rel=1e-9)
    assert plan.annual_samples == pytest.approx(365 * plan.s_per_period / params.monitoring_days)


@pytest.mark.parametrize("prob,hit", [(0.9, 0.01), (0.5, 0.3), (0.99, 1e-4)])
def test_sample_budget_against_brute_force(prob, hit):
    n = 0
    while 1 - (1 - hit) ** n < prob:
        n += 1
    assert math.ceil(sample_budget(prob, hit) - 1e-9) == n


def test_tiny_hit_probability_keeps_precision():
    # naive log(1 - q) loses most digits here
    assert detection_prob(1e-12, 1e12) == pytest.approx(1 - math.exp(-1), rel=1e-9)


def test_stretch_factor_one_is_the_target():
    assert detection_prob_stretched(1, 0.05, 0.9) == pytest.approx(0.9, rel=1e-12)


@given(b=st.floats(1e-4, 0.5), k=st.floats(1, 1000), p=st.floats(0.1, 0.99))
def test_stretched_matches_direct_product(b, k, p):
    s = math.log(1 - p) / math.log(1 - b)
    direct = 1 - (1 - b / k) ** (k * s)
    assert detection_prob_stretched(k, b, p) == pytest.approx(direct, rel=1e-7, abs=1e-12)
    assert detection_prob_stretched(k, b, p) <= p + 1e-12


@given(g=st.floats(1, 1e4), b=st.floats(1e-9, 1 - 1e-9))
def test_lemma_gap_non_negative(g, b):
    assert lemma_gap(g, b) >= -1e-12


def test_lemma_gap_vanishes_at_g_one():
    assert lemma_gap(1.0, 0.3) == pytest.approx(0.0, abs=1e-15)


def test_spread_never_helps():
    params = PolicyParams(1e23, 1e4)
    s = samples_per_period(params).s_per_period
    probs = [detection_prob_spread(t, params, s) for t in (1, 2, 5, 10, 20, 30)]
    assert all(a >= b - 1e-12 for a, b in zip(probs, probs[1:]))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"threshold_flops": -1, "chip_count": 10},
        {"threshold_flops": 1e20, "chip_count": 0.5},
        {"threshold_flops": 1e20, "chip_count": 10, "target_prob": 1.0},
        {"threshold_flops": 1e20, "chip_count": 10, "snapshot_rate": 0},
        {"threshold_flops": 1e20, "chip_count": 10, "training_days": 10, "monitoring_days": 30},
    ],
)
def test_policy_domain_errors(kwargs):
    with pytest.raises(DomainError):
        PolicyParams(**kwargs)


def test_infeasible_run_is_rejected():
    with pytest.raises(InfeasibleError):
        samples_per_period(PolicyParams(1.3e28, 1e3))


def test_display_count_rounds_up():
    assert display_count(242.2) == "243"
    assert display_count(24221.9) == "2.42e+4"
    assert display_count(999.2) == "1.00e+3"
    assert display_count(None) == "---"
