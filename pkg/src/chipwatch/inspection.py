"""The Verifier's audit: sample chips, inspect them, demand commitments for
every logged snapshot, verify the revealed transcripts inside a trusted
cluster and evaluate the training rules there.

The trusted cluster is the only component that sees raw transcripts.  What it
hands back to the Verifier is limited to pass/fail flags, failed check ids,
counts, distances and rule scalars; ``scan_confidentiality`` checks that a
Verifier-visible record stays inside that vocabulary.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .chip import Chip, InspectionFinding, LogEntry, WeightShard, physical_inspect
from .detection import SamplingPlan
from .pott import HashedTranscript, ProtocolError, VerificationConfig, verify
from .prng import tag_id
from .registry import Directory, sample_for_inspection
from .training import TrainingTranscript, evaluate_loss, forward, holdout_data, init_weights

VERDICTS = ("compliant", "violation", "non_cooperation")
RULE_NAMES = ("compute", "data", "benchmark")
PREDICATE_SAMPLE = 64


class ConfigurationError(ValueError):
    pass


class ProtocolOrderError(ProtocolError):
    """A reveal arrived for a commitment the cluster never registered."""


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------

DATA_PREDICATES: dict[str, Callable[[np.ndarray, np.ndarray], bool]] = {
    "never": lambda x, t: False,
    "always": lambda x, t: True,
    "large_inputs": lambda x, t: bool(np.max(np.abs(x)) > 3.0),
}


def flops_per_step(n_params: int, batch_size: int) -> float:
    """Dense-training estimate: 6 FLOPs per parameter per example."""
    return 6.0 * n_params * batch_size


def training_compute(transcript: TrainingTranscript) -> float:
    meta = transcript.meta
    return meta.total_steps * flops_per_step(meta.n_params, meta.batch_size)


@dataclass(frozen=True)
class RuleSet:
    """max_compute: FLOPs a run may use.  data_predicate flags a disallowed
    batch; at most ``max_data_fraction`` of sampled batches may be flagged.
    benchmark: held-out dataset id whose score must stay <= ``max_score``
    (None disables it).  combination: boolean expression over
    ``compute``, ``data`` and ``benchmark``."""

    max_compute: float
    data_predicate: str = "never"
    max_data_fraction: float = 0.0
    benchmark: str | None = None
    max_score: float = 1.0
    combination: str = "compute and data and benchmark"

    def __post_init__(self):
        if not self.max_compute > 0:
            raise ConfigurationError("max_compute must be positive")
        if not 0 <= self.max_data_fraction <= 1:
            raise ConfigurationError("max_data_fraction must lie in [0, 1]")

    def validate(self) -> "RuleSet":
        if self.data_predicate not in DATA_PREDICATES:
            raise ConfigurationError(f"unknown data predicate {self.data_predicate!r}")
        _combine(self.combination, dict.fromkeys(RULE_NAMES, True))
        return self

    def to_record(self) -> dict:
        return {
            "max_compute": self.max_compute,
            "data_predicate": self.data_predicate,
            "max_data_fraction": self.max_data_fraction,
            "benchmark": self.benchmark,
            "max_score": self.max_score,
            "combination": self.combination,
        }


def _combine(expr: str, values: Mapping[str, bool]) -> bool:
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"bad rule combination {expr!r}") from exc

    def ev(node) -> bool:
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.BoolOp):
            parts = [ev(v) for v in node.values]
            return all(parts) if isinstance(node.op, ast.And) else any(parts)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            return not ev(node.operand)
        if isinstance(node, ast.Name) and node.id in values:
            return bool(values[node.id])
        if isinstance(node, ast.Constant) and isinstance(node.value, bool):
            return node.value
        raise ConfigurationError(f"unsupported term in rule combination {expr!r}")

    return ev(tree)


def benchmark_score(weights: np.ndarray, meta, dataset_id: str) -> float:
    """Accuracy for classifiers; for regression, the fraction of the
    initialization's held-out loss that training removed."""
    x, t = holdout_data(meta, dataset_id)
    if meta.loss_id == "cross_entropy":
        y = forward(weights.astype(np.float64), x.astype(np.float64), meta.layer_sizes)
        return float(np.mean(np.argmax(y, axis=1) == np.argmax(t, axis=1)))
    base = evaluate_loss(init_weights(meta), x, t, meta)
    return 1.0 - evaluate_loss(weights, x, t, meta) / base


@dataclass(frozen=True)
class RuleVerdicts:
    compute_flops: float
    compute_ok: bool
    data_fraction: float
    data_ok: bool
    benchmark_score: float | None
    benchmark_ok: bool
    overall_ok: bool

    def to_record(self) -> dict:
        return {
            "compute_flops": self.compute_flops,
            "compute_ok": self.compute_ok,
            "data_fraction": self.data_fraction,
            "data_ok": self.data_ok,
            "benchmark_score": self.benchmark_score,
            "benchmark_ok": self.benchmark_ok,
            "overall_ok": self.overall_ok,
        }


def evaluate_rules(
    transcript: TrainingTranscript, rules: RuleSet, rng: np.random.Generator | None = None
) -> RuleVerdicts:
    if rules.data_predicate not in DATA_PREDICATES:
        raise ConfigurationError(f"unknown data predicate {rules.data_predicate!r}")
    predicate = DATA_PREDICATES[rules.data_predicate]
    rng = np.random.default_rng(0) if rng is None else rng

    compute = training_compute(transcript)
    compute_ok = compute <= rules.max_compute

    n = len(transcript.data)
    if n:
        picks = np.sort(rng.choice(n, size=min(PREDICATE_SAMPLE, n), replace=False))
        flagged = sum(predicate(*transcript.data.batch(int(i))) for i in picks)
        fraction = flagged / len(picks)
    else:
        fraction = 0.0
    data_ok = fraction <= rules.max_data_fraction

    score = None
    bench_ok = True
    if rules.benchmark is not None:
        score = benchmark_score(transcript.checkpoints.weights[-1], transcript.meta, rules.benchmark)
        bench_ok = score <= rules.max_score

    overall = _combine(rules.combination, {"compute": compute_ok, "data": data_ok, "benchmark": bench_ok})
    return RuleVerdicts(compute, compute_ok, fraction, data_ok, score, bench_ok, overall)


# ---------------------------------------------------------------------------
# trusted cluster
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionResult:
    commitment: str  # hex digest of the registered commitment
    passed: bool
    failed_checks: tuple[str, ...]
    segments_checked: int
    cost_J: int
    max_segment_distance: float | None
    rules: RuleVerdicts | None

    @property
    def violation(self) -> bool:
        return self.passed and self.rules is not None and not self.rules.overall_ok

    def to_record(self) -> dict:
        return {
            "commitment": self.commitment,
            "passed": self.passed,
            "failed_checks": list(self.failed_checks),
            "segments_checked": self.segments_checked,
            "cost_J": self.cost_J,
            "max_segment_distance": self.max_segment_distance,
            "rules": None if self.rules is None else self.rules.to_record(),
        }


class TrustedCluster:
    """Commit first, then reveal.  Sessions run one after another."""

    def __init__(self, config: VerificationConfig, rules: RuleSet):
        self.config = config
        self.rules = rules
        self._registered: dict[bytes, HashedTranscript] = {}

    def register(self, commitment: HashedTranscript) -> str:
        digest = commitment.digest()
        self._registered[digest] = commitment
        return digest.hex()

    def is_registered(self, commitment: HashedTranscript) -> bool:
        return commitment.digest() in self._registered

    def session(
        self,
        commitment: HashedTranscript,
        reveal: TrainingTranscript,
        target: WeightShard,
        chip_log: Sequence[LogEntry],
    ) -> SessionResult:
        digest = commitment.digest()
        if digest not in self._registered:
            raise ProtocolOrderError("reveal received before its commitment was registered")
        seed_key = [self.config.seed & (2**64 - 1), int.from_bytes(digest[:8], "little")]
        rng = np.random.Generator(np.random.Philox(key=seed_key))
        try:
            report = verify(reveal, commitment, target, chip_log, self.config, rng=rng)
        except ProtocolError:
            return SessionResult(digest.hex(), False, ("malformed",), 0, 0, None, None)
        max_d = max(report.segment_distances) if report.segment_distances else None
        verdicts = evaluate_rules(reveal, self.rules, rng) if report.accepted else None
        return SessionResult(
            digest.hex(),
            report.accepted,
            report.failed_ids,
            len(report.segments_checked),
            report.cost_J,
            max_d,
            verdicts,
        )


def trusted_cluster_session(
    cluster: TrustedCluster,
    commitment: HashedTranscript,
    reveal: TrainingTranscript,
    target: WeightShard,
    chip_log: Sequence[LogEntry],
) -> SessionResult:
    return cluster.session(commitment, reveal, target, chip_log)


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


class ProverInterface(Protocol):
    def commitment_for(self, serial: str, entry: LogEntry) -> HashedTranscript | None: ...

    def reveal(self, serial: str, entry: LogEntry) -> tuple[TrainingTranscript, WeightShard] | None: ...


@dataclass(frozen=True)
class EntryResult:
    period: int
    serial: str
    step: int
    wallclock_day: float
    shard_hash: str
    status: str  # "verified" | "rejected" | "missing"
    session: SessionResult | None

    def to_record(self) -> dict:
        return {
            "period": self.period,
            "serial": self.serial,
            "step": self.step,
            "wallclock_day": self.wallclock_day,
            "shard_hash": self.shard_hash,
            "status": self.status,
            "session": None if self.session is None else self.session.to_record(),
        }


@dataclass(frozen=True)
class ChipRecord:
    period: int
    finding: InspectionFinding
    reviewed: tuple[LogEntry, ...]

    def to_record(self) -> dict:
        return {
            "period": self.period,
            "serial": self.finding.serial,
            "serial_match": self.finding.serial_match,
            "tamper_detected": self.finding.tamper_detected,
            "log_entries": len(self.finding.log_copy),
            "reviewed": [
                {"step": e.step, "wallclock_day": e.wallclock_day, "shard_hash": e.shard_hash.hex()}
                for e in self.reviewed
            ],
        }


@dataclass
class DetectionReport:
    sampled: list[tuple[int, str]] = field(default_factory=list)
    chips: list[ChipRecord] = field(default_factory=list)
    entries: list[EntryResult] = field(default_factory=list)
    commitments: list[HashedTranscript] = field(default_factory=list)  # as received

    @property
    def tamper_detected(self) -> bool:
        return any(c.finding.tamper_detected for c in self.chips)

    @property
    def rule_violations(self) -> int:
        return sum(1 for e in self.entries if e.session is not None and e.session.violation)

    @property
    def refusals(self) -> int:
        missing = sum(1 for e in self.entries if e.status != "verified")
        return missing + sum(1 for c in self.chips if not c.finding.serial_match)

    @property
    def overall(self) -> str:
        if self.tamper_detected or self.rule_violations:
            return "violation"
        if self.refusals:
            return "non_cooperation"
        return "compliant"

    def to_record(self) -> dict:
        return {
            "overall": self.overall,
            "sampled": [{"period": p, "serial": s} for p, s in self.sampled],
            "chips": [c.to_record() for c in self.chips],
            "entries": [e.to_record() for e in self.entries],
            "rule_violations": self.rule_violations,
            "refusals": self.refusals,
        }


def run_audit(
    directory: Directory,
    fleet: Mapping[str, Chip],
    prover: ProverInterface,
    plan: SamplingPlan,
    rules: RuleSet,
    config: VerificationConfig,
    rng: np.random.Generator,
    owner: str,
    n_periods: int,
    advance_to: Callable[[float], None] | None = None,
) -> DetectionReport:
    """Inspect ``plan.s_per_period_int`` of ``owner``'s chips at the end of each
    of ``n_periods`` monitoring periods.  Each inspection reviews the log
    entries written during that period.  ``advance_to(day)`` lets the world
    run forward before each inspection round."""
    report = DetectionReport()
    cluster = TrustedCluster(config, rules)
    period = plan.monitoring_days
    for j in range(1, n_periods + 1):
        lo, hi = (j - 1) * period, j * period
        if advance_to is not None:
            advance_to(hi)
        held = len(directory.holdings(owner))
        serials = sample_for_inspection(directory, owner, min(plan.s_per_period_int, held), rng)
        for serial in serials:
            report.sampled.append((j, serial))
            chip = fleet.get(serial)
            if chip is None:
                missing = InspectionFinding(serial, False, False, ())
                report.chips.append(ChipRecord(j, missing, ()))
                continue
            finding = physical_inspect(chip, serial)
            reviewed = tuple(e for e in finding.log_copy if lo < e.wallclock_day <= hi)
            report.chips.append(ChipRecord(j, finding, reviewed))
            for entry in reviewed:
                report.entries.append(_review_entry(j, serial, entry, prover, cluster, report))
    return report


def _review_entry(period, serial, entry, prover, cluster, report) -> EntryResult:
    def result(status, session=None):
        return EntryResult(period, serial, entry.step, entry.wallclock_day, entry.shard_hash.hex(), status, session)

    commitment = prover.commitment_for(serial, entry)
    if commitment is None:
        return result("missing")
    cluster.register(commitment)
    report.commitments.append(commitment)
    revealed = prover.reveal(serial, entry)
    if revealed is None:
        return result("missing")
    transcript, shard = revealed
    session = cluster.session(commitment, transcript, shard, [entry])
    return result("verified" if session.passed else "rejected", session)


def audit_rng(seed: int, repetition: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), tag_id(f"audit/{repetition}")]))


# ---------------------------------------------------------------------------
# confidentiality
# ---------------------------------------------------------------------------

_DIGEST = re.compile(r"^[0-9a-f]{64}$")
_IDENT = re.compile(r"^[A-Za-z0-9_.:-]{1,64}$")
IDENTIFIER_KEYS = frozenset({"serial", "overall", "status", "failed_checks", "verdict", "check_id"})
SCALAR_KEYS = frozenset(
    {
        "wallclock_day",
        "compute_flops",
        "data_fraction",
        "benchmark_score",
        "max_segment_distance",
    }
)
DISTANCE_LIST_KEYS = frozenset({"distance_metadata", "segment_distances"})


def scan_confidentiality(record, path: str = "$", key: str | None = None) -> list[str]:
    """Paths in a Verifier-visible record holding anything other than digests,
    booleans, counts, distances, rule scalars or identifiers."""
    bad: list[str] = []
    if record is None or isinstance(record, bool):
        return bad
    if isinstance(record, int):
        return bad
    if isinstance(record, float):
        if key not in SCALAR_KEYS and key not in DISTANCE_LIST_KEYS:
            bad.append(path)
        return bad
    if isinstance(record, str):
        if not (_DIGEST.match(record) or (key in IDENTIFIER_KEYS and _IDENT.match(record))):
            bad.append(path)
        return bad
    if isinstance(record, Mapping):
        for k, v in record.items():
            bad.extend(scan_confidentiality(v, f"{path}.{k}", k))
        return bad
    if isinstance(record, (list, tuple)):
        for i, v in enumerate(record):
            if isinstance(v, float) and key not in DISTANCE_LIST_KEYS:
                bad.append(f"{path}[{i}]")
                continue
            bad.extend(scan_confidentiality(v, f"{path}[{i}]", key))
        return bad
    bad.append(path)
    return bad


def verifier_visible(report: DetectionReport) -> list[dict]:
    """Everything the Verifier receives during an audit."""
    return [report.to_record(), *(c.to_record() for c in report.commitments)]
