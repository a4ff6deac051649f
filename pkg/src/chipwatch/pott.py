"""Proof-of-Training-Transcript: commitments and verification.

The Prover first hands over only a :class:`HashedTranscript`.  Later the full
transcript is revealed (inside a trusted cluster) and :func:`verify` runs the
check list below, in order:

1. ``hash_consistency``  revealed transcript matches the commitment (and any
   reported checkpoint distances, ``distance_metadata``)
2. ``target_linkage``    the snapshotted shard is reached by the transcript
3. ``init``              first checkpoint is the seeded PRNG initialization
4. ``precommitment``     the chip-logged precommitment binds (meta, batches)
5. ``segment_replay``    selected k-step segments reproduce within epsilon
6. ``loss_decrease``     loss at the last checkpoint is below loss at the first

A failed hash check stops verification before any replay.  A missing
commitment or a malformed reveal raises :class:`ProtocolError` instead of
producing a reject, so that refusal to comply stays distinguishable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chip import LogEntry, WeightShard, hash_shard
from .training import (
    Hyperparams,
    TrainingTranscript,
    batch_bytes,
    checkpoint_bytes,
    evaluate_loss,
    init_weights,
    meta_bytes,
    replay,
    train,
)

CHECKS = ("hash_consistency", "distance_metadata", "target_linkage", "init", "precommitment", "segment_replay", "loss_decrease")
SELECTIONS = ("uniform_random", "largest_jump", "all")
LOSS_PROBE_BATCHES = 64


class ProtocolError(Exception):
    """The Prover did not follow the reporting protocol."""


class MissingCommitment(ProtocolError):
    pass


class MalformedTranscript(ProtocolError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class HashedTranscript:
    meta_hash: bytes
    batch_hashes: tuple[bytes, ...]
    checkpoint_hashes: tuple[bytes, ...]
    distance_metadata: tuple[float, ...] | None = None

    def to_record(self) -> dict:
        return {
            "meta_hash": self.meta_hash.hex(),
            "batch_hashes": [h.hex() for h in self.batch_hashes],
            "checkpoint_hashes": [h.hex() for h in self.checkpoint_hashes],
            "distance_metadata": None if self.distance_metadata is None else list(self.distance_metadata),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HashedTranscript":
        dist = rec.get("distance_metadata")
        return cls(
            meta_hash=bytes.fromhex(rec["meta_hash"]),
            batch_hashes=tuple(bytes.fromhex(h) for h in rec["batch_hashes"]),
            checkpoint_hashes=tuple(bytes.fromhex(h) for h in rec["checkpoint_hashes"]),
            distance_metadata=None if dist is None else tuple(float(x) for x in dist),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_record(), indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "HashedTranscript":
        return cls.from_record(json.loads(text))

    def digest(self) -> bytes:
        return sha256(json.dumps(self.to_record(), sort_keys=True, separators=(",", ":")).encode())

    @property
    def precommitment(self) -> bytes:
        return precommitment_digest(self.meta_hash, self.batch_hashes)


def precommitment_digest(meta_hash: bytes, batch_hashes: Sequence[bytes]) -> bytes:
    return sha256(meta_hash + b"".join(batch_hashes))


def checkpoint_distances(transcript: TrainingTranscript) -> tuple[float, ...]:
    w = transcript.checkpoints.weights.astype(np.float64)
    return tuple(float(x) for x in np.linalg.norm(np.diff(w, axis=0), axis=1))


def commit(transcript: TrainingTranscript, with_distances: bool = True) -> HashedTranscript:
    data = transcript.data
    ck = transcript.checkpoints
    opt = ck.opt_state
    return HashedTranscript(
        meta_hash=sha256(meta_bytes(transcript.meta)),
        batch_hashes=tuple(sha256(batch_bytes(data.inputs[i], data.targets[i])) for i in range(len(data))),
        checkpoint_hashes=tuple(
            sha256(checkpoint_bytes(ck.weights[i], None if opt is None else opt[i])) for i in range(len(ck))
        ),
        distance_metadata=checkpoint_distances(transcript) if with_distances else None,
    )


def commit_prefix(full: HashedTranscript, meta: Hyperparams, steps: int) -> HashedTranscript:
    """Commitment to ``transcript.prefix(steps)`` reusing the digests of the full run."""
    n = steps // meta.checkpoint_interval + 1
    return HashedTranscript(
        meta_hash=sha256(meta_bytes(meta.replace(total_steps=steps))),
        batch_hashes=full.batch_hashes[:steps],
        checkpoint_hashes=full.checkpoint_hashes[:n],
        distance_metadata=None if full.distance_metadata is None else full.distance_metadata[: n - 1],
    )


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def deterministic_epsilon(n_params: int) -> float:
    return 1e-9 * math.sqrt(n_params)


@dataclass(frozen=True)
class VerificationConfig:
    epsilon: float
    segments_to_check: float = 0.1  # int -> count, float in (0, 1] -> fraction
    selection: str = "uniform_random"
    delta1: float = 0.01
    check_init: bool = True
    check_precommitment: bool = False
    check_loss_decrease: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}")
        if isinstance(self.segments_to_check, float):
            if not 0 < self.segments_to_check <= 1:
                raise ValueError("fractional segments_to_check must lie in (0, 1]")
        elif self.segments_to_check < 1:
            raise ValueError("segments_to_check must be >= 1")

    def segment_count(self, n_segments: int) -> int:
        if self.selection == "all":
            return n_segments
        if isinstance(self.segments_to_check, float):
            want = max(1, round(self.segments_to_check * n_segments))
        else:
            want = int(self.segments_to_check)
        return min(want, n_segments)

    def replace(self, **changes) -> "VerificationConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return VerificationConfig(**fields)


@dataclass(frozen=True)
class FailedCheck:
    check_id: str
    segment: int | None = None
    value: float | None = None


@dataclass(frozen=True)
class VerificationReport:
    verdict: str
    failed_checks: tuple[FailedCheck, ...]
    segments_checked: tuple[int, ...]
    segment_distances: tuple[float, ...]
    cost_J: int
    linkage_steps: int = 0

    @property
    def accepted(self) -> bool:
        return self.verdict == "accept"

    @property
    def failed_ids(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(c.check_id for c in self.failed_checks))

    def to_record(self) -> dict:
        return {
            "verdict": self.verdict,
            "failed_checks": [
                {"check_id": c.check_id, "segment": c.segment, "value": c.value} for c in self.failed_checks
            ],
            "segments_checked": list(self.segments_checked),
            "segment_distances": list(self.segment_distances),
            "cost_J": self.cost_J,
            "linkage_steps": self.linkage_steps,
        }


def _report(failed, segments=(), distances=(), cost=0, linkage=0) -> VerificationReport:
    return VerificationReport(
        verdict="reject" if failed else "accept",
        failed_checks=tuple(failed),
        segments_checked=tuple(segments),
        segment_distances=tuple(distances),
        cost_J=cost,
        linkage_steps=linkage,
    )


def _check_wellformed(t: TrainingTranscript) -> None:
    meta = t.meta
    ck = t.checkpoints
    if len(t.data) != meta.total_steps:
        raise MalformedTranscript(f"{len(t.data)} batches for {meta.total_steps} steps")
    if ck.weights.ndim != 2 or ck.weights.shape != (meta.n_checkpoints, meta.n_params):
        raise MalformedTranscript(f"checkpoint array {ck.weights.shape} does not fit the hyperparameters")
    if (meta.optimizer == "momentum") != (ck.opt_state is not None):
        raise MalformedTranscript("optimizer state presence does not match the optimizer")
    n_in, n_out = meta.layer_sizes[0], meta.layer_sizes[-1]
    if meta.total_steps and (
        t.data.inputs.shape[1:] != (meta.batch_size, n_in) or t.data.targets.shape[1:] != (meta.batch_size, n_out)
    ):
        raise MalformedTranscript("batch shapes do not fit the hyperparameters")


def _as_shard(target) -> WeightShard:
    return target if isinstance(target, WeightShard) else WeightShard.full(target)


def _select_segments(n_segments: int, commitment: HashedTranscript, transcript, config, rng) -> list[int]:
    count = config.segment_count(n_segments)
    if n_segments == 0:
        return []
    if config.selection == "all" or count == n_segments:
        return list(range(n_segments))
    if config.selection == "largest_jump":
        jumps = commitment.distance_metadata
        if jumps is None:
            jumps = checkpoint_distances(transcript)
        order = sorted(range(n_segments), key=lambda i: (-jumps[i], i))
        return sorted(order[:count])
    return sorted(int(i) for i in rng.choice(n_segments, size=count, replace=False))


def _link_target(transcript, shard: WeightShard, chip_log, epsilon):
    """Returns (ok, measured distance, replay steps spent)."""
    h = hash_shard(shard)
    entries = [e for e in chip_log if e.shard_hash == h]
    if not entries:
        return False, None, 0
    start, end = shard.slice_range
    weights = transcript.checkpoints.weights
    if end > weights.shape[1]:
        return False, None, 0
    for w in weights:
        if hash_shard(WeightShard(w[start:end], shard.shard_index, shard.slice_range)) == h:
            return True, 0.0, 0
    # snapshot fell between checkpoints: replay from the preceding one
    meta = transcript.meta
    k = meta.checkpoint_interval
    best, spent = None, 0
    for entry in entries:
        if not 0 <= entry.step <= meta.total_steps:
            continue
        i = entry.step // k
        opt = transcript.checkpoints.opt_state
        w, _ = replay(
            weights[i], transcript.data[i * k : entry.step], meta, None if opt is None else opt[i]
        )
        spent += entry.step - i * k
        d = float(np.linalg.norm(w[start:end].astype(np.float64) - shard.values.astype(np.float64)))
        best = d if best is None else min(best, d)
    if best is None:
        return False, None, spent
    return best < epsilon, best, spent


def checkpoint_losses(transcript: TrainingTranscript, indices=None) -> list[float]:
    """Loss of checkpoints on an evenly spaced probe of at most 64 batches."""
    data = transcript.data
    n = len(data)
    if n == 0:
        return []
    picks = np.unique(np.linspace(0, n - 1, min(n, LOSS_PROBE_BATCHES)).round().astype(int))
    x = data.inputs[picks].reshape(-1, data.inputs.shape[-1])
    t = data.targets[picks].reshape(-1, data.targets.shape[-1])
    weights = transcript.checkpoints.weights
    indices = range(len(weights)) if indices is None else indices
    return [evaluate_loss(weights[i], x, t, transcript.meta) for i in indices]


def verify(
    transcript: TrainingTranscript,
    commitment: HashedTranscript | None,
    target,
    chip_log: Sequence[LogEntry],
    config: VerificationConfig,
    rng: np.random.Generator | None = None,
) -> VerificationReport:
    if commitment is None:
        raise MissingCommitment("no commitment was recorded for this transcript")
    if transcript is None:
        raise MalformedTranscript("no transcript was revealed")
    _check_wellformed(transcript)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    meta = transcript.meta
    k = meta.checkpoint_interval

    recomputed = commit(transcript, with_distances=False)
    if (
        recomputed.meta_hash != commitment.meta_hash
        or recomputed.batch_hashes != commitment.batch_hashes
        or recomputed.checkpoint_hashes != commitment.checkpoint_hashes
    ):
        return _report([FailedCheck("hash_consistency")])
    if commitment.distance_metadata is not None:
        actual = checkpoint_distances(transcript)
        if len(actual) != len(commitment.distance_metadata) or any(
            abs(a - b) > 1e-6 * max(1.0, abs(a)) for a, b in zip(actual, commitment.distance_metadata)
        ):
            return _report([FailedCheck("distance_metadata")])

    failed = []
    shard = _as_shard(target)
    linked, link_dist, link_steps = _link_target(transcript, shard, chip_log, config.epsilon)
    if not linked:
        failed.append(FailedCheck("target_linkage", value=link_dist))

    if config.check_init:
        w0 = transcript.checkpoints.weights[0]
        ok = w0.tobytes() == init_weights(meta).tobytes()
        opt = transcript.checkpoints.opt_state
        if opt is not None:
            ok = ok and not np.any(opt[0])
        if not ok:
            dist = float(np.linalg.norm(w0.astype(np.float64) - init_weights(meta).astype(np.float64)))
            failed.append(FailedCheck("init", value=dist))

    if config.check_precommitment:
        expected = precommitment_digest(commitment.meta_hash, commitment.batch_hashes)
        h = hash_shard(shard)
        logged = [e.precommitment_hash for e in chip_log if e.shard_hash == h]
        if not logged or any(p != expected for p in logged):
            failed.append(FailedCheck("precommitment"))

    n_segments = meta.total_steps // k
    segments = _select_segments(n_segments, commitment, transcript, config, rng)
    distances = []
    weights = transcript.checkpoints.weights
    opt = transcript.checkpoints.opt_state
    for i in segments:
        w, _ = replay(weights[i], transcript.data[i * k : (i + 1) * k], meta, None if opt is None else opt[i])
        d = float(np.linalg.norm(w.astype(np.float64) - weights[i + 1].astype(np.float64)))
        distances.append(d)
        if not d < config.epsilon:
            failed.append(FailedCheck("segment_replay", segment=i, value=d))

    if config.check_loss_decrease and n_segments >= 1:
        first, last = checkpoint_losses(transcript, [0, n_segments])
        if not last < first:
            failed.append(FailedCheck("loss_decrease", value=last - first))

    return _report(failed, segments, distances, cost=len(segments) * k, linkage=link_steps)


# ---------------------------------------------------------------------------
# epsilon calibration
# ---------------------------------------------------------------------------


def segment_distances(transcript: TrainingTranscript) -> list[float]:
    """Deterministic-replay distance of every segment of a transcript."""
    meta = transcript.meta
    k = meta.checkpoint_interval
    weights = transcript.checkpoints.weights
    opt = transcript.checkpoints.opt_state
    out = []
    for i in range(meta.total_steps // k):
        w, _ = replay(weights[i], transcript.data[i * k : (i + 1) * k], meta, None if opt is None else opt[i])
        out.append(float(np.linalg.norm(w.astype(np.float64) - weights[i + 1].astype(np.float64))))
    return out


@dataclass(frozen=True)
class Calibration:
    epsilon: float
    max_distance: float
    runs: int
    noise_sigma: float
    multiplier: float


def calibrate_epsilon(
    meta: Hyperparams,
    noise_sigma: float,
    runs: int = 50,
    multiplier: float = 3.0,
    first_noise_seed: int = 10_000,
) -> Calibration:
    """Set epsilon to ``multiplier`` x the largest honest noisy segment distance
    observed over ``runs`` independently-noised trainings of ``meta``."""
    if noise_sigma == 0:
        eps = deterministic_epsilon(meta.n_params)
        return Calibration(eps, 0.0, 0, 0.0, multiplier)
    worst = 0.0
    for r in range(runs):
        t = train(meta, noise_sigma=noise_sigma, noise_seed=first_noise_seed + r)
        worst = max([worst, *segment_distances(t)])
    return Calibration(multiplier * worst, worst, runs, noise_sigma, multiplier)


# ---------------------------------------------------------------------------
# transcript distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptDistance:
    d1: int
    d2: int


def indel_distance(a: Sequence, b: Sequence) -> int:
    """Minimum insertions + deletions turning ``a`` into ``b`` (len(a) + len(b) - 2 LCS)."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return len(a) + len(b) - 2 * prev[-1]


def _meta_field_diff(m1: Hyperparams, m2: Hyperparams) -> int:
    d1, d2 = m1.to_dict(), m2.to_dict()
    return sum(d1[key] != d2[key] for key in d1)


def transcript_distance(t1, t2) -> TranscriptDistance:
    """d1 over batch-hash sequences; d2 counts differing hyperparameter fields.

    For two commitments only the meta digest is visible, so d2 is 0 or 1
    (a lower bound on the field count).
    """
    h1 = t1 if isinstance(t1, HashedTranscript) else commit(t1, with_distances=False)
    h2 = t2 if isinstance(t2, HashedTranscript) else commit(t2, with_distances=False)
    d1 = indel_distance(h1.batch_hashes, h2.batch_hashes)
    if isinstance(t1, TrainingTranscript) and isinstance(t2, TrainingTranscript):
        d2 = _meta_field_diff(t1.meta, t2.meta)
    else:
        d2 = int(h1.meta_hash != h2.meta_hash)
    return TranscriptDistance(d1, d2)
