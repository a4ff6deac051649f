"""Closed-form inspection-sampling calculus.

How many of a Prover's chips must a Verifier inspect per monitoring period to
catch at least one weight snapshot from a large training run with a given
probability, plus the two evasion analyses (stretching a run over fewer chips,
spreading it over more chips for less time).

All probability arithmetic is float64 and uses ``log1p``/``expm1`` so that
per-sample hit probabilities around 1e-5 keep their precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

H100_FLOPS_PER_DAY = 1e15 * 24 * 3600


class DomainError(ValueError):
    """An argument lies outside the domain of a closed form."""


class InfeasibleError(ValueError):
    """The training run needs more chips than the fleet holds."""


def _positive(**kwargs: float) -> None:
    for name, value in kwargs.items():
        if not value > 0 or not math.isfinite(value):
            raise DomainError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class PolicyParams:
    """One inspection scenario.

    threshold_flops: compute of the smallest run the Verifier must catch (FLOPs).
    chip_count: chips owned by the audited Prover.
    chip_flops_per_day: per-chip throughput.
    snapshot_rate: expected firmware snapshots per chip-day.
    target_prob: desired detection probability.
    monitoring_days: length of one sampling period.
    training_days: assumed duration of the run (>= monitoring_days).
    """

    threshold_flops: float
    chip_count: float
    chip_flops_per_day: float = H100_FLOPS_PER_DAY
    snapshot_rate: float = 0.1
    target_prob: float = 0.9
    monitoring_days: float = 30.0
    training_days: float = 365.0

    def __post_init__(self):
        _positive(
            threshold_flops=self.threshold_flops,
            chip_flops_per_day=self.chip_flops_per_day,
            snapshot_rate=self.snapshot_rate,
            monitoring_days=self.monitoring_days,
            training_days=self.training_days,
        )
        if not self.chip_count >= 1:
            raise DomainError(f"chip_count must be >= 1, got {self.chip_count!r}")
        if not 0 <= self.target_prob < 1:
            raise DomainError(f"target_prob must lie in [0, 1), got {self.target_prob!r}")
        if self.training_days < self.monitoring_days:
            raise DomainError("training_days must be >= monitoring_days")

    @property
    def chips_required(self) -> float:
        return chips_required(self.threshold_flops, self.chip_flops_per_day, self.training_days)

    @property
    def fleet_fraction(self) -> float:
        """Fraction of the fleet a minimum-chip run occupies."""
        return self.chips_required / self.chip_count

    @property
    def feasible(self) -> bool:
        return self.chips_required <= self.chip_count

    def replace(self, **changes) -> "PolicyParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return PolicyParams(**fields)


@dataclass(frozen=True)
class SamplingPlan:
    s_per_period: float
    s_per_period_int: int
    annual_samples: float
    p_w: float
    hit_prob: float
    n_periods: int
    monitoring_days: float


def chips_required(threshold_flops: float, chip_flops_per_day: float, training_days: float) -> float:
    """Minimum chips that finish ``threshold_flops`` of work in ``training_days``."""
    _positive(
        threshold_flops=threshold_flops,
        chip_flops_per_day=chip_flops_per_day,
        training_days=training_days,
    )
    return threshold_flops / (chip_flops_per_day * training_days)


def snapshot_presence_prob(snapshot_rate: float, days: float) -> float:
    """Probability that a Poisson(rate) logger records at least one snapshot in ``days``."""
    _positive(snapshot_rate=snapshot_rate, days=days)
    return -math.expm1(-snapshot_rate * days)


def samples_per_period(params: PolicyParams) -> SamplingPlan:
    if not params.feasible:
        raise InfeasibleError(
            f"run needs {params.chips_required:.4g} chips but the fleet has {params.chip_count:g}"
        )
    p_w = snapshot_presence_prob(params.snapshot_rate, params.monitoring_days)
    hit = params.fleet_fraction * p_w
    if hit >= 1:
        raise InfeasibleError("per-sample hit probability reaches 1")
    n_periods = math.ceil(params.training_days / params.monitoring_days - 1e-12)
    if params.target_prob == 0:
        total = 0.0
    else:
        total = math.log1p(-params.target_prob) / math.log1p(-hit)
    s = total * params.monitoring_days / params.training_days
    return SamplingPlan(
        s_per_period=s,
        s_per_period_int=math.ceil(s - 1e-9),
        annual_samples=365.0 * s / params.monitoring_days,
        p_w=p_w,
        hit_prob=hit,
        n_periods=n_periods,
        monitoring_days=params.monitoring_days,
    )


def sample_budget(target_prob: float, hit_prob: float) -> float:
    """Independent samples needed so that P(at least one hit) = target_prob."""
    if not 0 < hit_prob < 1:
        raise DomainError(f"hit_prob must lie in (0, 1), got {hit_prob!r}")
    if not 0 <= target_prob < 1:
        raise DomainError(f"target_prob must lie in [0, 1), got {target_prob!r}")
    return math.log1p(-target_prob) / math.log1p(-hit_prob)


def detection_prob(hit_prob: float, samples: float) -> float:
    """P(at least one hit) over ``samples`` independent draws."""
    return -math.expm1(samples * math.log1p(-hit_prob))


def detection_prob_stretched(stretch: float, fleet_fraction: float, target_prob: float) -> float:
    """Detection probability when the run is made ``stretch`` times longer on
    ``1/stretch`` as many chips, while the Verifier keeps the sampling rate it
    chose for the original run (every involved sampled chip assumed to hold a
    snapshot)."""
    if not stretch >= 1:
        raise DomainError(f"stretch must be >= 1, got {stretch!r}")
    if not 0 < fleet_fraction < 1:
        raise DomainError(f"fleet_fraction must lie in (0, 1), got {fleet_fraction!r}")
    if not 0 < target_prob < 1:
        raise DomainError(f"target_prob must lie in (0, 1), got {target_prob!r}")
    s = sample_budget(target_prob, fleet_fraction)
    return -math.expm1(stretch * s * math.log1p(-fleet_fraction / stretch))


def detection_prob_spread(days: float, params: PolicyParams, samples: float) -> float:
    """Detection probability of a run squeezed into ``days`` on ``H/(a*days)`` chips,
    inspected by ``samples`` draws after it ends."""
    if not 0 < days <= params.monitoring_days:
        raise DomainError(f"days must lie in (0, {params.monitoring_days}], got {days!r}")
    chips = params.threshold_flops / (params.chip_flops_per_day * days)
    if chips > params.chip_count:
        raise InfeasibleError(f"{days} days needs {chips:.4g} chips; fleet has {params.chip_count:g}")
    hit = chips / params.chip_count * snapshot_presence_prob(params.snapshot_rate, days)
    if hit >= 1:
        return 1.0
    return detection_prob(hit, samples)


def lemma_gap(g: float, b: float) -> float:
    """g * (1 - b**(1/g)) - (1 - b); non-negative for g >= 1, 0 < b < 1."""
    if not g >= 1 or not math.isfinite(g):
        raise DomainError(f"g must be >= 1, got {g!r}")
    if not 0 < b < 1:
        raise DomainError(f"b must lie in (0, 1), got {b!r}")
    # 1 - b**(1/g) == -expm1(log(b)/g)
    return -g * math.expm1(math.log(b) / g) - (1.0 - b)


# ---------------------------------------------------------------------------
# Table of annual sample requirements
# ---------------------------------------------------------------------------

TABLE1_ROWS = (
    ("GPT-3", 3.14e23),
    ("Chinchilla", 5.76e23),
    ("PaLM", 2.56e24),
    ("Chinchilla-280B", 9.9e24),
    ("Chinchilla-1T", 1.27e26),
    ("Chinchilla-10T", 1.3e28),
)
TABLE1_CHIP_COUNTS = (1e3, 1e5, 1e7)


@dataclass(frozen=True)
class TableRow:
    model: str
    flops: float
    chip_days: float
    chips_1yr: float
    annual: tuple  # float or None (infeasible) per chip count


def table1(
    rows=TABLE1_ROWS,
    chip_counts=TABLE1_CHIP_COUNTS,
    chip_flops_per_day: float = H100_FLOPS_PER_DAY,
    snapshot_rate: float = 0.1,
    monitoring_days: float = 30.0,
    target_prob: float = 0.9,
    training_days: float = 365.0,
) -> list[TableRow]:
    out = []
    for model, flops in rows:
        annual = []
        for count in chip_counts:
            params = PolicyParams(
                threshold_flops=flops,
                chip_count=count,
                chip_flops_per_day=chip_flops_per_day,
                snapshot_rate=snapshot_rate,
                target_prob=target_prob,
                monitoring_days=monitoring_days,
                training_days=training_days,
            )
            annual.append(samples_per_period(params).annual_samples if params.feasible else None)
        out.append(
            TableRow(
                model=model,
                flops=flops,
                chip_days=flops / chip_flops_per_day,
                chips_1yr=chips_required(flops, chip_flops_per_day, training_days),
                annual=tuple(annual),
            )
        )
    return out


def display_count(x: float | None) -> str:
    """Integer cells as the table shows them: ceil(), 3 significant figures from 1000 up."""
    if x is None:
        return "---"
    n = math.ceil(x - 1e-9)
    if n < 1000:
        return str(n)
    return f"{n:.2e}".replace("e+0", "e+")


def display_sig3(x: float) -> str:
    if x < 1000:
        return f"{x:.3g}"
    return f"{x:.2e}".replace("e+0", "e+")
