"""Declarative audit scenarios: a Prover's fleet, the runs placed on it, the
rules and the Verifier's settings, plus the simulated world they describe.

Scenario files are JSON.  Every random choice is derived from the scenario
seed and the repetition index, so repetition ``r`` of a scenario is the same
world and the same audit on every machine.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .chip import Chip, LogEntry, RunPlacement, WeightShard, advance
from .detection import PolicyParams, SamplingPlan, samples_per_period
from .inspection import (
    ConfigurationError,
    DetectionReport,
    RuleSet,
    audit_rng,
    flops_per_step,
    run_audit,
)
from .pott import HashedTranscript, VerificationConfig, commit, commit_prefix, deterministic_epsilon
from .prng import tag_id
from .registry import CustodyEvent, Directory
from .training import Hyperparams, TrainingTranscript, shard_weights, train


@dataclass(frozen=True)
class RunSpec:
    meta: Hyperparams
    first_chip: int
    chips: int
    start_day: float
    end_day: float
    withhold: bool = False  # the Prover refuses to commit to this run

    @property
    def flops(self) -> float:
        return self.meta.total_steps * flops_per_step(self.meta.n_params, self.meta.batch_size)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = dict(d)
        d["meta"] = Hyperparams.from_dict(d["meta"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta.to_dict(),
            "first_chip": self.first_chip,
            "chips": self.chips,
            "start_day": self.start_day,
            "end_day": self.end_day,
            "withhold": self.withhold,
        }


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    chip_count: int
    chip_flops_per_day: float
    snapshot_rate: float
    runs: tuple[RunSpec, ...]
    rules: RuleSet
    owner: str = "prover"
    target_prob: float = 0.9
    monitoring_days: float = 30.0
    training_days: float = 120.0
    audit_days: float | None = None  # defaults to the end of the last run
    tampered: tuple[int, ...] = ()
    firmware_signed: bool = True
    verification: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.chip_count < 1:
            raise ConfigurationError("chip_count must be >= 1")
        self.rules.validate()
        busy: dict[int, list[tuple[float, float]]] = {}
        for run in self.runs:
            if run.chips < 1 or run.first_chip < 0 or run.first_chip + run.chips > self.chip_count:
                raise ConfigurationError(f"run chips {run.first_chip}+{run.chips} fall outside the fleet")
            if run.chips > run.meta.n_params:
                raise ConfigurationError("a run cannot be sharded over more chips than it has parameters")
            if not run.end_day > run.start_day >= 0:
                raise ConfigurationError("runs need 0 <= start_day < end_day")
            per_chip = run.flops / (run.chips * (run.end_day - run.start_day))
            if per_chip > self.chip_flops_per_day * (1 + 1e-9):
                raise ConfigurationError(
                    f"run needs {per_chip:.6g} FLOP/chip-day; chips deliver {self.chip_flops_per_day:.6g}"
                )
            for c in range(run.first_chip, run.first_chip + run.chips):
                for lo, hi in busy.get(c, []):
                    if run.start_day < hi and lo < run.end_day:
                        raise ConfigurationError(f"chip {c} hosts two runs at once")
                busy.setdefault(c, []).append((run.start_day, run.end_day))
        for c in self.tampered:
            if not 0 <= c < self.chip_count:
                raise ConfigurationError(f"tampered chip {c} is outside the fleet")
        self.verification_config()  # validates the block

    # -- derived -------------------------------------------------------------

    @property
    def horizon(self) -> float:
        if self.audit_days is not None:
            return self.audit_days
        return max((r.end_day for r in self.runs), default=self.monitoring_days)

    @property
    def n_periods(self) -> int:
        return math.ceil(self.horizon / self.monitoring_days - 1e-12)

    def policy(self, chip_count: int | None = None) -> PolicyParams:
        return PolicyParams(
            threshold_flops=self.rules.max_compute,
            chip_count=self.chip_count if chip_count is None else chip_count,
            chip_flops_per_day=self.chip_flops_per_day,
            snapshot_rate=self.snapshot_rate,
            target_prob=self.target_prob,
            monitoring_days=self.monitoring_days,
            training_days=self.training_days,
        )

    def verification_config(self) -> VerificationConfig:
        v = dict(self.verification)
        if v.get("epsilon") is None:
            n = max((r.meta.n_params for r in self.runs), default=1)
            v["epsilon"] = deterministic_epsilon(n)
        v.setdefault("seed", self.seed)
        try:
            return VerificationConfig(**v)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def serial(self, index: int) -> str:
        return f"chip-{index:05d}"

    # -- files ---------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        try:
            d["runs"] = tuple(RunSpec.from_dict(r) for r in d.get("runs", ()))
            d["rules"] = RuleSet(**d["rules"])
            d["tampered"] = tuple(d.get("tampered", ()))
            return cls(**d)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid scenario: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "chip_count": self.chip_count,
            "chip_flops_per_day": self.chip_flops_per_day,
            "snapshot_rate": self.snapshot_rate,
            "runs": [r.to_dict() for r in self.runs],
            "rules": self.rules.to_record(),
            "owner": self.owner,
            "target_prob": self.target_prob,
            "monitoring_days": self.monitoring_days,
            "training_days": self.training_days,
            "audit_days": self.audit_days,
            "tampered": list(self.tampered),
            "firmware_signed": self.firmware_signed,
            "verification": dict(self.verification),
            "seed": self.seed,
        }


def load_scenario(path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read scenario {path}: {exc}") from exc
    return ScenarioConfig.from_dict(data)


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _trained(meta: Hyperparams) -> tuple[TrainingTranscript, HashedTranscript]:
    t = train(meta, keep_trajectory=True)
    return t, commit(t)


@dataclass
class PlacedRun:
    spec: RunSpec
    serials: tuple[str, ...]
    transcript: TrainingTranscript
    commitment: HashedTranscript
    _shards: dict = field(default_factory=dict, repr=False)

    def shard(self, serial: str, step: int) -> WeightShard:
        if step not in self._shards:
            self._shards[step] = shard_weights(self.transcript.trajectory[step], len(self.serials))
        return self._shards[step][self.serials.index(serial)]

    def covers(self, serial: str, day: float) -> bool:
        return serial in self.serials and self.spec.start_day <= day < self.spec.end_day


class ReportingProver:
    """Answers every commitment demand with the shortest honest transcript
    that explains the snapshot: the run up to the first checkpoint at or
    after the snapshot's step.  Withheld runs get no answer."""

    def __init__(self, runs: list[PlacedRun]):
        self.runs = runs

    def _find(self, serial: str, entry: LogEntry):
        for run in self.runs:
            if run.covers(serial, entry.wallclock_day):
                k = run.spec.meta.checkpoint_interval
                steps = min(run.spec.meta.total_steps, -(-entry.step // k) * k)
                return run, steps
        return None, 0

    def commitment_for(self, serial: str, entry: LogEntry) -> HashedTranscript | None:
        run, steps = self._find(serial, entry)
        if run is None or run.spec.withhold:
            return None
        return commit_prefix(run.commitment, run.spec.meta, steps)

    def reveal(self, serial: str, entry: LogEntry):
        run, steps = self._find(serial, entry)
        if run is None or run.spec.withhold:
            return None
        return run.transcript.prefix(steps), run.shard(serial, entry.step)


@dataclass
class World:
    scenario: ScenarioConfig
    directory: Directory
    chips: dict[str, Chip]
    runs: list[PlacedRun]
    placements: dict[str, list[RunPlacement]]
    rngs: dict[str, np.random.Generator]

    def advance_to(self, day: float) -> None:
        for serial, placements in self.placements.items():
            chip = self.chips[serial]
            if day > chip.now:
                advance(chip, day - chip.now, self.rngs[serial], placements)

    @property
    def prover(self) -> ReportingProver:
        return ReportingProver(self.runs)


def build_world(scenario: ScenarioConfig, repetition: int = 0) -> World:
    directory = Directory()
    chips = {}
    for i in range(scenario.chip_count):
        serial = scenario.serial(i)
        directory.record_event(CustodyEvent(serial, scenario.owner, "fabricated", 0.0))
        chips[serial] = Chip(
            serial,
            scenario.owner,
            scenario.chip_flops_per_day,
            scenario.snapshot_rate,
            firmware_signed=scenario.firmware_signed,
            tampered=i in scenario.tampered,
        )
    runs, placements = [], {}
    for spec in scenario.runs:
        transcript, commitment = _trained(spec.meta)
        serials = tuple(scenario.serial(i) for i in range(spec.first_chip, spec.first_chip + spec.chips))
        run = PlacedRun(spec, serials, transcript, commitment)
        runs.append(run)
        for serial in serials:
            placements.setdefault(serial, []).append(
                RunPlacement(
                    spec.start_day,
                    spec.end_day,
                    spec.meta.total_steps,
                    lambda step, run=run, serial=serial: run.shard(serial, step),
                )
            )
    base = scenario.seed & (2**64 - 1)
    rngs = {
        s: np.random.Generator(np.random.Philox(key=[base, tag_id(f"chip/{repetition}/{s}")])) for s in placements
    }
    return World(scenario, directory, chips, runs, placements, rngs)


def plan_for(scenario: ScenarioConfig, directory: Directory) -> SamplingPlan:
    """The Verifier's plan, sized from the owner's current holdings."""
    return samples_per_period(scenario.policy(len(directory.holdings(scenario.owner))))


def audit_scenario(scenario: ScenarioConfig, repetition: int = 0) -> DetectionReport:
    world = build_world(scenario, repetition)
    return run_audit(
        world.directory,
        world.chips,
        world.prover,
        plan_for(scenario, world.directory),
        scenario.rules,
        scenario.verification_config(),
        audit_rng(scenario.seed, repetition),
        scenario.owner,
        scenario.n_periods,
        advance_to=world.advance_to,
    )


def repeat_audits(scenario: ScenarioConfig, repetitions: int, first: int = 0, keep_reports: bool = False):
    """Verdict counts over seeded repetitions (and the reports, if asked)."""
    counts: Counter = Counter()
    reports = []
    for r in range(first, first + repetitions):
        report = audit_scenario(scenario, r)
        counts[report.overall] += 1
        if keep_reports:
            reports.append(report)
    return counts, reports
