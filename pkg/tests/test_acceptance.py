"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test appends one PASS/FAIL line, printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, REFERENCE, gradient_check, log_for

from chipwatch.attacks import ATTACKS, batch_substitution, run_attack, segment_splice, spoof_suite
from chipwatch.cli import table1_rows
from chipwatch.detection import (
    H100_FLOPS_PER_DAY,
    PolicyParams,
    detection_prob_spread,
    detection_prob_stretched,
    lemma_gap,
    samples_per_period,
)
from chipwatch.fleet import ProverStrategy, closed_form, simulate
from chipwatch.inspection import scan_confidentiality, verifier_visible
from chipwatch.pott import VerificationConfig, calibrate_epsilon, commit, deterministic_epsilon, verify
from chipwatch.scenario import load_scenario, repeat_audits
from chipwatch.training import train

from test_inspection import SCENARIOS

# Reference table cells: H100-days, chips for a one-year run, annual samples at C = 1e3, 1e5, 1e7.
REFERENCE_CELLS = {
    "GPT-3": ("3.64e+3", "10", "243", "2.43e+4", "2.43e+6"),
    "Chinchilla": ("6.67e+3", "19", "132", "1.33e+4", "1.33e+6"),
    "PaLM": ("2.96e+4", "82", "29", "2.98e+3", "2.99e+5"),
    "Chinchilla-280B": ("1.15e+5", "314", "7", "771", "7.72e+4"),
    "Chinchilla-1T": ("1.47e+6", "4.03e+3", "---", "60", "6.02e+3"),
    "Chinchilla-10T": ("1.5e+8", "4.12e+5", "---", "---", "58"),
}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def last_digit_unit(cell: str) -> float:
    """Value of one unit in the last displayed digit of a table cell."""
    if "e" not in cell:
        return 1.0
    mantissa, exponent = cell.split("e")
    decimals = len(mantissa.split(".")[1]) if "." in mantissa else 0
    return 10.0 ** (int(exponent) - decimals)


def test_criterion_1_table():
    start = time.perf_counter()
    rows = {r["model"]: r for r in table1_rows()}
    misses = []
    for model, cells in REFERENCE_CELLS.items():
        ours = (rows[model]["H100_days"], rows[model]["chips_1yr"], rows[model]["C_1000"], rows[model]["C_100000"], rows[model]["C_10000000"])
        for mine, theirs in zip(ours, cells):
            if theirs == "---" or mine == "---":
                if mine != theirs:
                    misses.append((model, mine, theirs))
            elif abs(float(mine) - float(theirs)) > last_digit_unit(theirs) * (1 + 1e-9):
                misses.append((model, mine, theirs))
    elapsed = time.perf_counter() - start
    record(1, "table reproduction", not misses and elapsed < 1, f"{30 - len(misses)}/30 cells within one unit, {elapsed:.3f}s")


def test_criterion_2_large_fleet_scenario():
    start = time.perf_counter()
    params = PolicyParams(9.9e24, 1e7, chip_flops_per_day=3e15 * 86400)
    annual = samples_per_period(params).annual_samples
    elapsed = time.perf_counter() - start
    rel = annual / 232_000 - 1
    record(2, "large-fleet scenario", abs(rel) <= 0.02 and elapsed < 1, f"{annual:,.0f} samples/yr, {rel:+.2%}, {elapsed:.3f}s")


def snapped(flops: float, chips: float) -> PolicyParams:
    """A reference-table run on a whole number of chips, trained over exactly 12 periods."""
    whole = math.ceil(flops / (H100_FLOPS_PER_DAY * 365))
    days = flops / (H100_FLOPS_PER_DAY * whole)
    return PolicyParams(flops, chips, training_days=days, monitoring_days=days / 12)


C3_CONFIGS = [
    ("GPT-3", 3.14e23, 1e3),
    ("Chinchilla", 5.76e23, 1e5),
    ("PaLM", 2.56e24, 1e3),
    ("Chinchilla-280B", 9.9e24, 1e5),
    ("Chinchilla-1T", 1.27e26, 1e5),
    ("Chinchilla-10T", 1.3e28, 1e7),
]


def test_criterion_3_closed_form_matches_simulation():
    start = time.perf_counter()
    worst = 0.0
    for i, (_, flops, chips) in enumerate(C3_CONFIGS):
        out = simulate(snapped(flops, chips), ProverStrategy.honest(), trials=100_000, seed=3000 + i)
        se = math.sqrt(0.9 * 0.1 / out.trials)
        worst = max(worst, abs(out.empirical_p - 0.9) / se)
    elapsed = time.perf_counter() - start
    record(3, "closed form vs Monte Carlo", worst <= 3 and elapsed < 120, f"{len(C3_CONFIGS)} configs, worst {worst:.2f} standard errors, {elapsed:.1f}s")


def test_criterion_4_stretching():
    fractions = np.linspace(0.01, 0.2, 20)
    factors = (1, 2, 5, 10, 20, 50, 100)
    worst = min(
        detection_prob_stretched(k, b, 0.9) / detection_prob_stretched(1, b, 0.9) for b in fractions for k in factors
    )
    spots = []
    for i, (b, k) in enumerate(((0.05, 10), (0.1, 100), (0.2, 50))):
        params = PolicyParams(b * 1e4 * H100_FLOPS_PER_DAY * 360, 1e4, training_days=360)
        expected = detection_prob_stretched(k, b * samples_per_period(params).p_w, 0.9)
        out = simulate(params, ProverStrategy.stretched(k), trials=100_000, seed=4000 + i)
        spots.append(abs(out.empirical_p - expected) <= 3 * math.sqrt(expected * (1 - expected) / out.trials))
        assert closed_form(params, ProverStrategy.stretched(k)) == pytest.approx(expected, rel=1e-9)
    record(4, "stretch strategy", worst > 0.95 and all(spots), f"min ratio {worst:.4f} over 140 points, {sum(spots)}/3 spot checks in CI")


def test_criterion_5_spreading():
    gs = np.logspace(0, 3, 100)
    bs = np.linspace(0.001, 0.999, 100)
    gap = min(lemma_gap(float(g), float(b)) for g in gs for b in bs)
    monotone = True
    param_sets = [PolicyParams(3.14e23, 1e5), PolicyParams(2.56e24, 1e5, snapshot_rate=0.5), PolicyParams(9.9e24, 1e7, monitoring_days=60)]
    for params in param_sets:
        s = samples_per_period(params).s_per_period
        lo = params.threshold_flops / (params.chip_flops_per_day * params.chip_count)
        ts = np.linspace(max(lo, params.monitoring_days / 50), params.monitoring_days, 50)
        probs = [detection_prob_spread(float(t), params, s) for t in ts]
        monotone &= all(a >= b - 1e-12 for a, b in zip(probs, probs[1:]))
    paired = []
    params = param_sets[0]
    plan = samples_per_period(params)
    full = simulate(params, ProverStrategy.spread(30), plan, trials=100_000, seed=5000)
    for t in (1, 5, 15):
        short = simulate(params, ProverStrategy.spread(t), plan, trials=100_000, seed=5000)
        paired.append(short.empirical_p >= full.empirical_p - 3 * math.hypot(short.stderr, full.stderr))
    # the gap is exactly zero at g = 1; allow float rounding there
    record(5, "spread strategy", gap >= -4 * np.finfo(float).eps and monotone and all(paired), f"min lemma gap {gap:.3g}, monotone on 3x50 grids, {sum(paired)}/3 paired checks")


def test_criterion_6_completeness():
    exact = 0
    zero = True
    for seed in range(100):
        t = train(REFERENCE.replace(seed=seed))
        shard, log = log_for(t, 10)
        report = verify(t, commit(t), shard, log, VerificationConfig(deterministic_epsilon(t.meta.n_params), selection="all"))
        exact += report.accepted
        zero &= max(report.segment_distances) == 0.0
    cal = calibrate_epsilon(REFERENCE, 1e-4, runs=50)
    noisy = 0
    for seed in range(100):
        t = train(REFERENCE, noise_sigma=1e-4, noise_seed=seed)
        shard, log = log_for(t, 10)
        noisy += verify(t, commit(t), shard, log, VerificationConfig(cal.epsilon, selection="all")).accepted
    ok = exact == 100 and zero and noisy >= 99
    record(6, "transcript completeness", ok, f"{exact}/100 exact with zero distance, {noisy}/100 noisy at eps={cal.epsilon:.3g}")


def test_criterion_7_soundness(honest):
    shard, log = log_for(honest, 8)
    suite = spoof_suite(honest, log, shard, VerificationConfig(deterministic_epsilon(58), selection="all", check_precommitment=True))
    intersecting = caught = 0
    n_ck = len(honest.checkpoints)
    for trial in range(200):
        rng = np.random.default_rng(7000 + trial)
        if trial % 2:
            spoof = batch_substitution(honest, log, shard, position=int(rng.integers(0, honest.meta.total_steps)), seed=trial)
        else:
            index = int(rng.choice([i for i in range(1, n_ck - 1) if i != 8]))
            spoof = segment_splice(honest, log, shard, index=index, seed=trial)
        config = VerificationConfig(deterministic_epsilon(58), segments_to_check=0.1, seed=trial)
        out = run_attack(honest, spoof, config, rng=rng)
        if set(out.report.segments_checked) & set(spoof.modified_segments):
            intersecting += 1
            caught += out.rejected
    ok = suite.rejected == len(ATTACKS) and intersecting > 0 and caught == intersecting
    record(7, "transcript soundness", ok, f"{suite.rejected}/{len(ATTACKS)} attacks rejected, {caught}/{intersecting} intersecting trials rejected")


def test_criterion_8_gradients():
    errors = [gradient_check(i) for i in range(20)]
    record(8, "gradient check", max(errors) < 1e-4, f"max relative error {max(errors):.2e} over 20 instances")


@pytest.fixture(scope="module")
def audits():
    start = time.perf_counter()
    runs = {name: repeat_audits(load_scenario(SCENARIOS / f"{name}.json"), 500, keep_reports=True) for name in ("flagship", "honest", "withheld")}
    return runs, time.perf_counter() - start


def test_criterion_9_end_to_end(audits):
    runs, elapsed = audits
    flagship = runs["flagship"][0]["violation"] / 500
    band = 3 * math.sqrt(0.9 * 0.1 / 500)
    honest = runs["honest"][0]["compliant"]
    withheld = runs["withheld"][0]["non_cooperation"]
    ok = abs(flagship - 0.9) <= band and honest == 500 and withheld == 500 and elapsed < 300
    record(9, "end-to-end audit", ok, f"flagship {flagship:.3f} violation, honest {honest}/500 compliant, withheld {withheld}/500 non-cooperation, {elapsed:.0f}s")


def test_criterion_10_confidentiality(audits):
    runs, _ = audits
    outputs = leaks = 0
    for _, reports in runs.values():
        for report in reports:
            for rec in verifier_visible(report):
                outputs += 1
                leaks += len(scan_confidentiality(rec))
    record(10, "confidentiality", leaks == 0 and outputs > 1500, f"{outputs} verifier-visible records, {leaks} disallowed fields")
