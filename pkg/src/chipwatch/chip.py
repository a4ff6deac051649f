"""Simulated ML accelerator with random-interrupt weight snapshotting.

Firmware freezes the chip at Poisson-distributed times, hashes the weight
shard held in memory and appends the digest to an on-chip, append-only log.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class WeightShard:
    values: np.ndarray
    shard_index: int
    slice_range: tuple[int, int]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        start, end = self.slice_range
        if start < 0 or end < start:
            raise ValueError(f"bad slice range {self.slice_range}")
        if values.ndim != 1 or values.shape[0] != end - start:
            raise ValueError(f"shard holds {values.shape} values for range {self.slice_range}")

    @classmethod
    def full(cls, weights) -> "WeightShard":
        weights = np.asarray(weights, dtype=np.float32)
        return cls(weights, 0, (0, weights.shape[0]))


def shard_bytes(shard: WeightShard) -> bytes:
    start, end = shard.slice_range
    header = struct.pack("<QQQ", shard.shard_index, start, end)
    return header + shard.values.astype("<f4").tobytes()


def hash_shard(shard: WeightShard) -> bytes:
    return hashlib.sha256(shard_bytes(shard)).digest()


@dataclass(frozen=True)
class LogEntry:
    step: int
    wallclock_day: float
    shard_hash: bytes
    precommitment_hash: bytes | None = None

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "wallclock_day": self.wallclock_day,
            "shard_hash": self.shard_hash.hex(),
            "precommitment_hash": None if self.precommitment_hash is None else self.precommitment_hash.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LogEntry":
        pre = rec.get("precommitment_hash")
        return cls(
            step=int(rec["step"]),
            wallclock_day=float(rec["wallclock_day"]),
            shard_hash=bytes.fromhex(rec["shard_hash"]),
            precommitment_hash=None if pre is None else bytes.fromhex(pre),
        )


def dump_log(entries: Iterable[LogEntry]) -> str:
    """One JSON object per line, fields in the fixed order
    step, wallclock_day, shard_hash, precommitment_hash."""
    return "".join(json.dumps(e.to_record()) + "\n" for e in entries)


def load_log(text: str) -> list[LogEntry]:
    return [LogEntry.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


@dataclass
class RunPlacement:
    """Where and when a training run occupies a chip.

    ``shard_at_step(step)`` returns this chip's shard of the weights after
    ``step`` completed optimizer steps.
    """

    start_day: float
    end_day: float
    total_steps: int
    shard_at_step: Callable[[int], WeightShard]
    precommitment_hash: bytes | None = None

    def step_at(self, day: float) -> int:
        frac = (day - self.start_day) / (self.end_day - self.start_day)
        return min(self.total_steps, int(math.floor(frac * self.total_steps)))

    def active(self, day: float) -> bool:
        return self.start_day <= day < self.end_day


@dataclass(frozen=True)
class InspectionFinding:
    serial: str
    serial_match: bool
    tamper_detected: bool
    log_copy: tuple[LogEntry, ...]

    @property
    def clean(self) -> bool:
        return self.serial_match and not self.tamper_detected


class Chip:
    def __init__(
        self,
        serial: str,
        owner_id: str,
        throughput: float,
        snapshot_rate: float,
        firmware_signed: bool = True,
        tampered: bool = False,
    ):
        if snapshot_rate <= 0:
            raise ValueError("snapshot_rate must be positive")
        self._serial = serial
        self.owner_id = owner_id
        self.throughput = throughput
        self.snapshot_rate = snapshot_rate
        self.firmware_signed = firmware_signed
        self.tampered = tampered
        self.now = 0.0
        self.memory: WeightShard | None = None
        self._log: list[LogEntry] = []

    @property
    def serial(self) -> str:
        return self._serial

    @property
    def log(self) -> tuple[LogEntry, ...]:
        return tuple(self._log)

    @property
    def logging_enabled(self) -> bool:
        return not (self.tampered and not self.firmware_signed)

    def _append(self, entry: LogEntry) -> None:
        if self._log and entry.wallclock_day <= self._log[-1].wallclock_day:
            raise RuntimeError("log entries must be strictly increasing in time")
        self._log.append(entry)

    def __repr__(self):
        return f"Chip({self._serial!r}, owner={self.owner_id!r}, entries={len(self._log)})"


def poisson_times(rng: np.random.Generator, rate: float, start: float, stop: float) -> np.ndarray:
    """Event times of a homogeneous Poisson process on ``(start, stop]``."""
    n = rng.poisson(rate * (stop - start))
    return np.sort(rng.uniform(start, stop, size=n))


def advance(
    chip: Chip,
    duration: float,
    rng: np.random.Generator,
    active_run: RunPlacement | Sequence[RunPlacement] | None = None,
) -> list[LogEntry]:
    """Run the chip's clock forward by ``duration`` days.

    Snapshot interrupts are drawn even when nothing is logged so that the
    random stream does not depend on tamper state.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    runs = [] if active_run is None else [active_run] if isinstance(active_run, RunPlacement) else list(active_run)
    start, stop = chip.now, chip.now + duration
    new = []
    for t in poisson_times(rng, chip.snapshot_rate, start, stop).tolist():
        run = next((r for r in runs if r.active(t)), None)
        if run is None:
            continue
        step = run.step_at(t)
        shard = run.shard_at_step(step)
        chip.memory = shard
        if not chip.logging_enabled:
            continue
        entry = LogEntry(step, t, hash_shard(shard), run.precommitment_hash)
        chip._append(entry)
        new.append(entry)
    chip.now = stop
    return new


def physical_inspect(chip: Chip, expected_serial: str) -> InspectionFinding:
    return InspectionFinding(
        serial=chip.serial,
        serial_match=chip.serial == expected_serial,
        tamper_detected=bool(chip.tampered),
        log_copy=chip.log,
    )
