"""Chip-owner directory: an append-only custody event log with a derived index.

The index (serial -> holder, state) is always a pure fold over the log, so the
directory as of any past day is recovered by folding a prefix of the log.
Transfers carry both parties' acknowledgments; damage reports carry a
justification.  Inconsistent events are rejected with a specific exception.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

EVENTS = ("fabricated", "transferred", "damaged", "destroyed", "inspected")


class CustodyViolation(ValueError):
    pass


class UnknownSerial(CustodyViolation):
    """Non-fabrication event for a chip the directory has never seen; the
    most recent holder cannot be established."""


class DuplicateFabrication(CustodyViolation):
    pass


class EventAfterDestruction(CustodyViolation):
    pass


class TimestampRegression(CustodyViolation):
    pass


class MissingAcknowledgment(CustodyViolation):
    pass


class WrongHolder(CustodyViolation):
    pass


@dataclass(frozen=True)
class CustodyEvent:
    serial: str
    holder: str
    event: str
    timestamp: float
    sender: str | None = None  # transfers: acknowledged by both parties
    receiver: str | None = None
    justification: str | None = None  # required for damage reports

    def __post_init__(self):
        if self.event not in EVENTS:
            raise ValueError(f"unknown custody event {self.event!r}")

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class ChipState:
    holder: str
    state: str  # "active" | "damaged" | "destroyed"
    last_timestamp: float


def _apply(index: dict, ev: CustodyEvent) -> None:
    cur = index.get(ev.serial)
    if ev.event == "fabricated":
        if cur is not None:
            raise DuplicateFabrication(f"{ev.serial} was already fabricated")
        index[ev.serial] = ChipState(ev.holder, "active", ev.timestamp)
        return
    if cur is None:
        raise UnknownSerial(f"{ev.serial}: no custody record; accountability rests with the most recent holder")
    if cur.state == "destroyed":
        raise EventAfterDestruction(f"{ev.serial} was destroyed at day {cur.last_timestamp}")
    if ev.timestamp < cur.last_timestamp:
        raise TimestampRegression(f"{ev.serial}: day {ev.timestamp} precedes day {cur.last_timestamp}")
    if ev.event == "transferred":
        if not ev.sender or not ev.receiver:
            raise MissingAcknowledgment(f"{ev.serial}: transfer needs sender and receiver acknowledgments")
        if ev.sender != cur.holder:
            raise WrongHolder(f"{ev.serial} is held by {cur.holder}, not {ev.sender}")
        if ev.receiver != ev.holder:
            raise MissingAcknowledgment(f"{ev.serial}: receiver {ev.receiver} is not the new holder {ev.holder}")
        index[ev.serial] = ChipState(ev.holder, cur.state, ev.timestamp)
        return
    if ev.holder != cur.holder:
        raise WrongHolder(f"{ev.serial} is held by {cur.holder}, not {ev.holder}")
    if ev.event == "damaged":
        if not ev.justification:
            raise MissingAcknowledgment(f"{ev.serial}: damage report needs a justification")
        index[ev.serial] = ChipState(cur.holder, "damaged", ev.timestamp)
    elif ev.event == "destroyed":
        index[ev.serial] = ChipState(cur.holder, "destroyed", ev.timestamp)
    else:  # inspected
        index[ev.serial] = ChipState(cur.holder, cur.state, ev.timestamp)


def fold(events: Iterable[CustodyEvent]) -> dict[str, ChipState]:
    index: dict[str, ChipState] = {}
    for ev in events:
        _apply(index, ev)
    return index


class Directory:
    def __init__(self, events: Iterable[CustodyEvent] = ()):
        self._events: list[CustodyEvent] = []
        self._index: dict[str, ChipState] = {}
        for ev in events:
            self.record_event(ev)

    @property
    def events(self) -> tuple[CustodyEvent, ...]:
        return tuple(self._events)

    @property
    def index(self) -> dict[str, ChipState]:
        return dict(self._index)

    def record_event(self, event: CustodyEvent) -> "Directory":
        _apply(self._index, event)  # raises before anything is appended
        self._events.append(event)
        return self

    def as_of(self, day: float) -> dict[str, ChipState]:
        return fold(e for e in self._events if e.timestamp <= day)

    def holdings(self, owner: str) -> list[str]:
        return holdings(self, owner)

    def dumps(self) -> str:
        return "".join(json.dumps(e.to_record()) + "\n" for e in self._events)

    @classmethod
    def loads(cls, text: str) -> "Directory":
        return cls(CustodyEvent(**json.loads(line)) for line in text.splitlines() if line.strip())

    def __len__(self):
        return len(self._events)


def record_event(directory: Directory, event: CustodyEvent) -> Directory:
    return directory.record_event(event)


def holdings(directory: Directory, owner: str) -> list[str]:
    return sorted(s for s, st in directory._index.items() if st.holder == owner and st.state != "destroyed")


class SampleTooLarge(ValueError):
    pass


def sample_for_inspection(directory: Directory, owner: str, s: int, rng: np.random.Generator) -> list[str]:
    """Uniform sample of ``s`` of the owner's chips, without replacement."""
    held = holdings(directory, owner)
    if s > len(held):
        raise SampleTooLarge(f"asked for {s} chips; {owner} holds {len(held)}")
    if s < 0:
        raise ValueError("sample size must be non-negative")
    picks = rng.choice(len(held), size=s, replace=False)
    return [held[i] for i in sorted(picks)]
