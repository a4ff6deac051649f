"""Canonical spoofed-transcript attacks and the suite that runs them.

Each attack starts from an honest transcript, the chip log holding a snapshot
of it and the snapshotted shard, and builds the reveal an adversarial Prover
would hand to the trusted cluster.  The adversary commits to its own spoof,
so the hash check always passes; the remaining checks have to catch it.

``compute_steps`` is the number of optimizer steps the adversary executed to
build the spoof (its cost).  All five canonical attacks reuse material from
the honest run and cost nothing beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .chip import LogEntry, WeightShard, hash_shard
from .pott import (
    HashedTranscript,
    TranscriptDistance,
    VerificationConfig,
    VerificationReport,
    commit,
    precommitment_digest,
    transcript_distance,
    verify,
)
from .prng import Stream
from .training import CheckpointSeries, DataSequence, TrainingTranscript, generate_data

ATTACKS = ("run_splitting", "batch_substitution", "segment_splice", "free_lunch", "stale_precommit")
DELTA3 = 2
DELTA4 = 1


@dataclass(frozen=True)
class Spoof:
    name: str
    transcript: TrainingTranscript
    commitment: HashedTranscript
    chip_log: tuple[LogEntry, ...]
    target: WeightShard
    compute_steps: int
    modified_segments: frozenset  # segment indices whose replay the change breaks
    # what the spoof claims happened, when that is not the reveal itself
    claimed: TrainingTranscript | None = None


@dataclass(frozen=True)
class AttackOutcome:
    name: str
    report: VerificationReport
    distance: TranscriptDistance
    compute_steps: int
    modified_segments: frozenset

    @property
    def rejected(self) -> bool:
        return not self.report.accepted

    @property
    def substantially_different(self) -> bool:
        return self.distance.d1 >= DELTA3 or self.distance.d2 >= DELTA4


def _target_checkpoint(original: TrainingTranscript, target: WeightShard, chip_log=()) -> int:
    """Checkpoint holding the target, else the one preceding its logged step."""
    start, end = target.slice_range
    for i, w in enumerate(original.checkpoints.weights):
        if w[start:end].tobytes() == target.values.tobytes():
            return i
    h = hash_shard(target)
    steps = [e.step for e in chip_log if e.shard_hash == h]
    if not steps:
        raise ValueError("the target shard matches no checkpoint and no log entry")
    return min(steps[0] // original.meta.checkpoint_interval, len(original.checkpoints) - 1)


def _transcript(meta, inputs, targets, weights, opt) -> TrainingTranscript:
    return TrainingTranscript(meta, DataSequence(inputs, targets), CheckpointSeries(weights, opt))


def _opt_slice(opt, sl):
    return None if opt is None else opt[sl]


def run_splitting(original, chip_log, target, split: int | None = None) -> Spoof:
    """Report the tail of the run as a fresh run 'initialized' at a checkpoint."""
    j = _target_checkpoint(original, target, chip_log) if split is None else split
    if j < 1:
        raise ValueError("run splitting needs a split point after initialization")
    k = original.meta.checkpoint_interval
    meta = original.meta.replace(seed=original.meta.seed + 1, total_steps=original.meta.total_steps - j * k)
    ck = original.checkpoints
    t = _transcript(
        meta,
        original.data.inputs[j * k :],
        original.data.targets[j * k :],
        ck.weights[j:],
        _opt_slice(ck.opt_state, slice(j, None)),
    )
    return Spoof("run_splitting", t, commit(t), tuple(chip_log), target, 0, frozenset())


def batch_substitution(original, chip_log, target, position: int | None = None, seed: int = 0) -> Spoof:
    """Swap one recorded batch for a fresh one; checkpoints untouched (d1 = 2)."""
    n = original.meta.total_steps
    pos = n // 2 if position is None else position
    stream = Stream(seed, f"spoof-batch/{pos}")
    x = original.data.inputs.copy()
    y = original.data.targets.copy()
    fresh = stream.normal(x[pos].size).reshape(x[pos].shape).astype(np.float32)
    x[pos] = fresh
    y[pos] = y[(pos + 1) % n]
    ck = original.checkpoints
    t = _transcript(original.meta, x, y, ck.weights, ck.opt_state)
    seg = pos // original.meta.checkpoint_interval
    return Spoof("batch_substitution", t, commit(t), tuple(chip_log), target, 0, frozenset({seg}))


def segment_splice(original, chip_log, target, index: int | None = None, scale: float = 1e-2, seed: int = 0) -> Spoof:
    """Replace one intermediate checkpoint with a perturbed copy."""
    n_ck = len(original.checkpoints)
    if n_ck < 3:
        raise ValueError("segment splice needs at least one intermediate checkpoint")
    tgt = _target_checkpoint(original, target, chip_log)
    j = index
    if j is None:
        j = next(i for i in range(1, n_ck) if i != tgt)
    if j == 0 or j == tgt:
        raise ValueError("splice point must differ from the initialization and the target checkpoint")
    w = original.checkpoints.weights.copy()
    noise = Stream(seed, f"spoof-splice/{j}").normal(w.shape[1]).astype(np.float32)
    w[j] = w[j] + np.float32(scale) * noise
    t = _transcript(original.meta, original.data.inputs, original.data.targets, w, original.checkpoints.opt_state)
    touched = {j - 1} | ({j} if j < n_ck - 1 else set())
    return Spoof("segment_splice", t, commit(t), tuple(chip_log), target, 0, frozenset(touched))


def free_lunch(original, chip_log, target) -> Spoof:
    """Claim the snapshot was simply the random initialization: no training at all."""
    j = _target_checkpoint(original, target, chip_log)
    meta = original.meta.replace(total_steps=0)
    ck = original.checkpoints
    shape_x = (0,) + original.data.inputs.shape[1:]
    shape_y = (0,) + original.data.targets.shape[1:]
    t = _transcript(
        meta,
        np.empty(shape_x, np.float32),
        np.empty(shape_y, np.float32),
        ck.weights[j : j + 1].copy(),
        None if ck.opt_state is None else np.zeros_like(ck.opt_state[j : j + 1]),
    )
    return Spoof("free_lunch", t, commit(t), tuple(chip_log), target, 0, frozenset())


def stale_precommit(original, chip_log, target, seed_offset: int = 7919) -> Spoof:
    """The chip logged a precommitment to a benign batch plan; a different one was trained."""
    plan_meta = original.meta.replace(seed=original.meta.seed + seed_offset)
    plan = generate_data(plan_meta)
    plan_t = _transcript(
        original.meta, plan.inputs, plan.targets, original.checkpoints.weights, original.checkpoints.opt_state
    )
    plan_commit = commit(plan_t, with_distances=False)
    pre = precommitment_digest(plan_commit.meta_hash, plan_commit.batch_hashes)
    log = tuple(replace(e, precommitment_hash=pre) for e in chip_log)
    return Spoof("stale_precommit", original, commit(original), log, target, 0, frozenset(), claimed=plan_t)


BUILDERS = {
    "run_splitting": run_splitting,
    "batch_substitution": batch_substitution,
    "segment_splice": segment_splice,
    "free_lunch": free_lunch,
    "stale_precommit": stale_precommit,
}


def run_attack(original: TrainingTranscript, spoof: Spoof, config: VerificationConfig, rng=None) -> AttackOutcome:
    report = verify(spoof.transcript, spoof.commitment, spoof.target, spoof.chip_log, config, rng=rng)
    dist = transcript_distance(original, spoof.claimed if spoof.claimed is not None else spoof.transcript)
    return AttackOutcome(spoof.name, report, dist, spoof.compute_steps, spoof.modified_segments)


@dataclass(frozen=True)
class SuiteReport:
    outcomes: tuple[AttackOutcome, ...]

    @property
    def rejected(self) -> int:
        return sum(o.rejected for o in self.outcomes)

    @property
    def total(self) -> int:
        return len(self.outcomes)

    def to_record(self) -> dict:
        return {
            "rejected": self.rejected,
            "total": self.total,
            "attacks": [
                {
                    "name": o.name,
                    "verdict": o.report.verdict,
                    "failed_checks": list(o.report.failed_ids),
                    "d1": o.distance.d1,
                    "d2": o.distance.d2,
                    "compute_steps": o.compute_steps,
                }
                for o in self.outcomes
            ],
        }


def spoof_suite(
    original: TrainingTranscript,
    chip_log: Sequence[LogEntry],
    target: WeightShard,
    config: VerificationConfig,
    attacks: Sequence[str] = ATTACKS,
) -> SuiteReport:
    outcomes = []
    for name in attacks:
        spoof = BUILDERS[name](original, chip_log, target)
        outcomes.append(run_attack(original, spoof, config))
    return SuiteReport(tuple(outcomes))
