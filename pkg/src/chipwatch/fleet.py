"""Monte Carlo simulation of Prover fleets under random chip inspection.

A trial places one training run on a Prover's fleet, lets the involved chips
log weight snapshots as a Poisson process, and lets the Verifier inspect a
fresh sample of the fleet at the end of every monitoring period.  The trial
counts as a detection when some inspected chip holds a snapshot from the
run's second half (the work beyond the first ``H`` FLOPs).

Only the number of inspected chips that land on the run matters, so hits are
drawn as Binomial(samples, involved/fleet) with chip ids uniform over the
involved chips; snapshot presence is then drawn lazily per distinct
(chip, window) and shared between duplicate hits.

Trials run in fixed-size chunks, each with a seed derived from
``(seed, chunk index)``, so results are bit-identical for any ``threads``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .detection import (
    InfeasibleError,
    PolicyParams,
    SamplingPlan,
    detection_prob_spread,
    samples_per_period,
)
from .prng import tag_id

STRATEGIES = ("honest_min_chips", "stretch", "spread", "collusion")
WINDOW_MODES = ("period", "cumulative")
CHUNK_CELLS = 2_000_000  # trial x window cells per chunk


@dataclass(frozen=True)
class ProverStrategy:
    """How the Prover lays out a run of ``run_flops`` (defaults to the policy threshold).

    stretch: ``factor`` times longer on ``1/factor`` of the minimum chips.
    spread: the whole run squeezed into ``days`` on proportionally more chips.
    collusion: the run's chips split across provers by ``shares``; the provers'
    fleets split the union fleet by ``fleet_shares``.
    """

    kind: str = "honest_min_chips"
    run_flops: float | None = None
    factor: float = 1.0
    days: float | None = None
    shares: tuple[float, ...] = ()
    fleet_shares: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind == "stretch" and not self.factor >= 1:
            raise ValueError("stretch factor must be >= 1")
        if self.kind == "spread" and not (self.days and self.days > 0):
            raise ValueError("spread needs a positive number of days")
        if self.kind == "collusion":
            if len(self.shares) < 2 or len(self.shares) != len(self.fleet_shares):
                raise ValueError("collusion needs matching shares and fleet_shares for >= 2 provers")
            for group in (self.shares, self.fleet_shares):
                if min(group) <= 0 or not math.isclose(sum(group), 1.0, rel_tol=1e-9):
                    raise ValueError("collusion shares must be positive and sum to 1")

    @classmethod
    def honest(cls, run_flops=None) -> "ProverStrategy":
        return cls("honest_min_chips", run_flops)

    @classmethod
    def stretched(cls, factor: float, run_flops=None) -> "ProverStrategy":
        return cls("stretch", run_flops, factor=factor)

    @classmethod
    def spread(cls, days: float, run_flops=None) -> "ProverStrategy":
        return cls("spread", run_flops, days=days)

    @classmethod
    def collusion(cls, shares, fleet_shares, run_flops=None) -> "ProverStrategy":
        return cls("collusion", run_flops, shares=tuple(shares), fleet_shares=tuple(fleet_shares))

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "run_flops": self.run_flops}
        if self.kind == "stretch":
            rec["factor"] = self.factor
        if self.kind == "spread":
            rec["days"] = self.days
        if self.kind == "collusion":
            rec["shares"] = list(self.shares)
            rec["fleet_shares"] = list(self.fleet_shares)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ProverStrategy":
        rec = dict(rec)
        for key in ("shares", "fleet_shares"):
            if key in rec:
                rec[key] = tuple(rec[key])
        return cls(**rec)


@dataclass(frozen=True)
class SimConfig:
    """window_mode "period": an inspection credits only snapshots logged since
    the previous inspection.  "cumulative": any qualifying snapshot logged so
    far counts (the chip log is append-only), which can only raise detection.
    phase_two_only=False counts snapshots from anywhere in the run.
    rounding: per-period sample counts for a fractional plan, either
    "stochastic" (floor or ceil, mean preserved) or "ceil".
    """

    window_mode: str = "period"
    phase_two_only: bool = True
    rounding: str = "stochastic"
    replace: bool = True

    def __post_init__(self):
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(f"unknown window mode {self.window_mode!r}")
        if self.rounding not in ("stochastic", "ceil"):
            raise ValueError(f"unknown rounding {self.rounding!r}")


@dataclass(frozen=True)
class SimOutcome:
    trials: int
    detections: int

    def __post_init__(self):
        if not 0 <= self.detections <= self.trials:
            raise ValueError("detections must lie in [0, trials]")

    @property
    def empirical_p(self) -> float:
        return self.detections / self.trials

    @property
    def stderr(self) -> float:
        p = self.empirical_p
        return math.sqrt(p * (1 - p) / self.trials)

    @property
    def ci_halfwidth(self) -> float:
        """3-sigma normal-approximation half-width."""
        return 3 * self.stderr

    def to_record(self) -> dict:
        return {
            "trials": self.trials,
            "detections": self.detections,
            "empirical_p": self.empirical_p,
            "ci_halfwidth": self.ci_halfwidth,
        }


@dataclass(frozen=True)
class _Layout:
    """One run as the simulator sees it."""

    groups: tuple[tuple[float, float], ...]  # (involved chips, fleet chips) per prover
    window_starts: np.ndarray
    window_ends: np.ndarray
    credit_from: float  # qualifying snapshots are logged at or after this day
    samples: float  # Verifier draws per window (whole union fleet)
    snapshot_rate: float


def _windows(lo: float, hi: float, period: float) -> tuple[np.ndarray, np.ndarray]:
    """Monitoring periods (aligned at day 0) intersected with [lo, hi)."""
    first = int(math.floor(lo / period + 1e-12))
    last = int(math.ceil(hi / period - 1e-12))
    edges = np.arange(first, last + 1, dtype=np.float64) * period
    starts = np.maximum(edges[:-1], lo)
    ends = np.minimum(edges[1:], hi)
    keep = ends > starts
    return starts[keep], ends[keep]


def _layout(params: PolicyParams, strategy: ProverStrategy, plan: SamplingPlan, config: SimConfig) -> _Layout:
    flops = params.threshold_flops if strategy.run_flops is None else strategy.run_flops
    fleet = params.chip_count
    if strategy.kind == "spread":
        days = strategy.days
        if days > params.monitoring_days:
            raise ValueError("spread days must not exceed the monitoring period")
        chips = flops / (params.chip_flops_per_day * days)
        lo, hi = (0.0, days)
        starts, ends = np.array([0.0]), np.array([days])
    else:
        train = params.training_days * (strategy.factor if strategy.kind == "stretch" else 1.0)
        chips = flops / (params.chip_flops_per_day * train)
        lo = train if config.phase_two_only else 0.0
        hi = 2 * train
        starts, ends = _windows(lo, hi, params.monitoring_days)
    if chips > fleet:
        raise InfeasibleError(f"strategy needs {chips:.4g} chips; the fleet holds {fleet:g}")
    if strategy.kind == "collusion":
        groups = tuple((chips * s, fleet * g) for s, g in zip(strategy.shares, strategy.fleet_shares))
        for involved, own in groups:
            if involved > own:
                raise InfeasibleError("a colluding prover's share exceeds its own fleet")
    else:
        groups = ((chips, fleet),)
    return _Layout(groups, starts, ends, lo, plan.s_per_period, params.snapshot_rate)


def _sample_counts(gen, shape, s: float, rounding: str) -> np.ndarray:
    if rounding == "ceil":
        return np.full(shape, math.ceil(s - 1e-9), dtype=np.int64)
    base = math.floor(s)
    frac = s - base
    return base + (gen.random(shape) < frac).astype(np.int64)


def _hits(gen, counts, involved: float, fleet: float, replace: bool):
    n_ids = max(1, int(round(involved)))
    if replace:
        return gen.binomial(counts, min(1.0, involved / fleet)), n_ids
    good = n_ids
    bad = int(round(fleet)) - good
    return gen.hypergeometric(good, bad, np.minimum(counts, good + bad)), n_ids


def _chip_ids(gen, hits, n_ids, replace: bool) -> np.ndarray:
    total = int(hits.sum())
    if replace:
        return gen.integers(0, n_ids, size=total)
    out = np.empty(total, dtype=np.int64)
    pos = 0
    for h in hits.ravel()[hits.ravel() > 0].tolist():
        out[pos : pos + h] = gen.choice(n_ids, size=h, replace=False)
        pos += h
    return out


def _chunk(layout: _Layout, config: SimConfig, trials: int, gen: np.random.Generator) -> int:
    n_w = len(layout.window_ends)
    lengths = layout.window_ends - layout.window_starts
    counts = _sample_counts(gen, (trials, n_w), layout.samples, config.rounding)
    if len(layout.groups) > 1:
        fleets = np.array([g[1] for g in layout.groups])
        per_group = gen.multinomial(counts.ravel(), fleets / fleets.sum())
        per_group = [per_group[:, i].reshape(trials, n_w) for i in range(len(layout.groups))]
    else:
        per_group = [counts]
    detected = np.zeros(trials, dtype=bool)
    cell = np.arange(trials * n_w)
    for (involved, fleet), n in zip(layout.groups, per_group):
        hits, n_ids = _hits(gen, n, involved, fleet, config.replace)
        hit_cell = np.repeat(cell, hits.ravel())
        if hit_cell.size == 0:
            continue
        chip = _chip_ids(gen, hits, n_ids, config.replace)
        trial = hit_cell // n_w
        window = hit_cell % n_w
        if config.window_mode == "period":
            keys, inv = np.unique(hit_cell * n_ids + chip, return_inverse=True)
            logged = gen.poisson(layout.snapshot_rate * lengths[keys // n_ids % n_w]) > 0
            ok = logged[inv]
        else:
            keys, inv = np.unique(trial * n_ids + chip, return_inverse=True)
            first = layout.credit_from + gen.exponential(1.0 / layout.snapshot_rate, size=keys.size)
            ok = first[inv] < layout.window_ends[window]
        detected |= np.bincount(trial[ok], minlength=trials) > 0
    return int(detected.sum())


def _spread_chunk(layout: _Layout, config: SimConfig, trials: int, gen: np.random.Generator) -> int:
    """Spread runs use common random numbers so that two seeded calls with
    different ``days`` are paired draw for draw."""
    (involved, fleet), = layout.groups
    days = float(layout.window_ends[0])
    s_max = math.ceil(layout.samples - 1e-9) if config.rounding == "ceil" else math.floor(layout.samples) + 1
    counts = _sample_counts(gen, (trials,), layout.samples, config.rounding)
    u = gen.random((trials, s_max))
    first = gen.exponential(1.0 / layout.snapshot_rate, size=(trials, s_max))
    used = np.arange(s_max)[None, :] < counts[:, None]
    chip = np.floor(u * fleet)
    hit = used & (chip < involved)
    t_idx, j_idx = np.nonzero(hit)
    if t_idx.size == 0:
        return 0
    key = t_idx * (int(fleet) + 1) + chip[t_idx, j_idx].astype(np.int64)
    _, first_pos, inv = np.unique(key, return_index=True, return_inverse=True)
    ok = first[t_idx, j_idx][first_pos][inv] < days
    return int((np.bincount(t_idx[ok], minlength=trials) > 0).sum())


def _base_seed(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(0, 2**63))
    return int(seed)


def simulate(
    params: PolicyParams,
    strategy: ProverStrategy,
    plan: SamplingPlan | None = None,
    trials: int = 10_000,
    seed: int | np.random.Generator = 0,
    config: SimConfig = SimConfig(),
    threads: int = 1,
) -> SimOutcome:
    """Empirical detection probability of ``strategy`` against ``plan``
    (by default the plan for an honest run of the policy threshold)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if plan is None:
        plan = samples_per_period(params)
    layout = _layout(params, strategy, plan, config)
    spread = strategy.kind == "spread"
    n_w = 1 if spread else len(layout.window_ends)
    chunk = max(100, min(10_000, CHUNK_CELLS // max(1, n_w)))
    base = _base_seed(seed)
    sizes = [min(chunk, trials - i) for i in range(0, trials, chunk)]
    work = _spread_chunk if spread else _chunk

    def run(i):
        gen = np.random.Generator(np.random.Philox(key=[base & (2**64 - 1), tag_id(f"fleet-chunk/{i}")]))
        return work(layout, config, sizes[i], gen)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(threads) as pool:
            found = sum(pool.map(run, range(len(sizes))))
    else:
        found = sum(run(i) for i in range(len(sizes)))
    return SimOutcome(trials, found)


def closed_form(params: PolicyParams, strategy: ProverStrategy, plan: SamplingPlan | None = None) -> float:
    """Analytic detection probability of the simulated model in period mode,
    treating the per-period sample count as continuous.  In cumulative mode
    the simulation can only exceed it."""
    if plan is None:
        plan = samples_per_period(params)
    if strategy.kind == "spread":
        return detection_prob_spread(strategy.days, params.replace(
            threshold_flops=params.threshold_flops if strategy.run_flops is None else strategy.run_flops
        ), plan.s_per_period)
    layout = _layout(params, strategy, plan, SimConfig())
    lengths = layout.window_ends - layout.window_starts
    p_logged = -np.expm1(-layout.snapshot_rate * lengths)
    frac = sum(inv for inv, _ in layout.groups) / params.chip_count
    log_miss = plan.s_per_period * np.log1p(-frac * p_logged).sum()
    return float(-math.expm1(log_miss))


@dataclass(frozen=True)
class SweepRow:
    params: PolicyParams
    strategy: ProverStrategy
    outcome: SimOutcome | None  # None when the strategy does not fit the fleet
    closed_form: float | None

    @property
    def delta(self) -> float | None:
        if self.outcome is None:
            return None
        return self.outcome.empirical_p - self.closed_form


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)

    def ratio(self, row: SweepRow) -> float | None:
        """Closed-form detection of ``row`` relative to an honest run at the same policy."""
        if row.closed_form is None:
            return None
        return row.closed_form / closed_form(row.params, ProverStrategy.honest(row.strategy.run_flops))


def sweep(
    param_grid,
    strategy_grid,
    trials: int,
    seed: int = 0,
    config: SimConfig = SimConfig(),
    threads: int = 1,
) -> SweepTable:
    """Simulate every (params, strategy) pair against the honest plan for params."""
    table = SweepTable()
    for i, params in enumerate(param_grid):
        plan = samples_per_period(params)
        for j, strategy in enumerate(strategy_grid):
            try:
                cf = closed_form(params, strategy, plan)
            except InfeasibleError:
                table.rows.append(SweepRow(params, strategy, None, None))
                continue
            out = simulate(params, strategy, plan, trials, seed=seed + 1_000_003 * i + j, config=config, threads=threads)
            table.rows.append(SweepRow(params, strategy, out, cf))
    return table
