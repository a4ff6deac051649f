import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipwatch.registry import (
    CustodyEvent,
    Directory,
    DuplicateFabrication,
    EventAfterDestruction,
    MissingAcknowledgment,
    SampleTooLarge,
    TimestampRegression,
    UnknownSerial,
    WrongHolder,
    fold,
    holdings,
    record_event,
    sample_for_inspection,
)


def fab(serial, holder, day=0.0):
    return CustodyEvent(serial, holder, "fabricated", day)


def move(serial, sender, receiver, day):
    return CustodyEvent(serial, receiver, "transferred", day, sender=sender, receiver=receiver)


def test_transfer_changes_current_holder():
    d = Directory()
    record_event(d, fab("c1", "fab"))
    record_event(d, move("c1", "fab", "lab", 3.0))
    assert d.index["c1"].holder == "lab"
    assert holdings(d, "lab") == ["c1"] and holdings(d, "fab") == []


def test_unknown_serial_points_at_last_holder_gap():
    with pytest.raises(UnknownSerial, match="most recent holder"):
        Directory().record_event(move("ghost", "a", "b", 1.0))


def test_empty_directory_holds_nothing():
    assert holdings(Directory(), "anyone") == []


def test_destroyed_chips_leave_holdings():
    d = Directory([fab(f"c{i}", "lab") for i in range(4)])
    d.record_event(CustodyEvent("c2", "lab", "destroyed", 5.0))
    assert holdings(d, "lab") == ["c0", "c1", "c3"]


@pytest.mark.parametrize(
    "events,error",
    [
        ([fab("c", "a"), fab("c", "a")], DuplicateFabrication),
        ([fab("c", "a"), CustodyEvent("c", "a", "destroyed", 1), CustodyEvent("c", "a", "inspected", 2)], EventAfterDestruction),
        ([fab("c", "a", 5.0), move("c", "a", "b", 4.0)], TimestampRegression),
        ([fab("c", "a"), CustodyEvent("c", "b", "transferred", 1, sender="a")], MissingAcknowledgment),
        ([fab("c", "a"), move("c", "x", "b", 1.0)], WrongHolder),
        ([fab("c", "a"), CustodyEvent("c", "a", "damaged", 1)], MissingAcknowledgment),
        ([fab("c", "a"), CustodyEvent("c", "b", "inspected", 1)], WrongHolder),
    ],
)
def test_inconsistent_events_are_rejected(events, error):
    d = Directory(events[:-1])
    before = len(d)
    with pytest.raises(error):
        d.record_event(events[-1])
    assert len(d) == before


def test_unknown_event_kind():
    with pytest.raises(ValueError):
        CustodyEvent("c", "a", "stolen", 0.0)


def test_as_of_recovers_past_holder():
    d = Directory([fab("c1", "fab", 0.0), move("c1", "fab", "lab", 10.0)])
    assert d.as_of(5.0)["c1"].holder == "fab"
    assert d.as_of(10.0)["c1"].holder == "lab"


OWNERS = ("a", "b", "c")


@st.composite
def histories(draw):
    """Valid random custody histories built from a running model of the index."""
    state: dict[str, tuple[str, str]] = {}
    events = []
    day = 0.0
    for _ in range(draw(st.integers(0, 40))):
        day += draw(st.floats(0, 3))
        live = [s for s, (_, st_) in state.items() if st_ != "destroyed"]
        kind = draw(st.sampled_from(("fabricated",) + (("transferred", "damaged", "destroyed", "inspected") if live else ())))
        if kind == "fabricated":
            serial, holder = f"s{len(state)}", draw(st.sampled_from(OWNERS))
            events.append(fab(serial, holder, day))
            state[serial] = (holder, "active")
            continue
        serial = draw(st.sampled_from(live))
        holder, cond = state[serial]
        if kind == "transferred":
            new = draw(st.sampled_from(OWNERS))
            events.append(move(serial, holder, new, day))
            state[serial] = (new, cond)
        elif kind == "damaged":
            events.append(CustodyEvent(serial, holder, kind, day, justification="fan failure"))
            state[serial] = (holder, "damaged")
        elif kind == "destroyed":
            events.append(CustodyEvent(serial, holder, kind, day))
            state[serial] = (holder, "destroyed")
        else:
            events.append(CustodyEvent(serial, holder, kind, day))
    return events, state


@settings(max_examples=200, deadline=None)
@given(histories())
def test_index_is_a_fold_of_the_log(history):
    events, model = history
    d = Directory()
    for e in events:
        d.record_event(e)
    assert {s: (c.holder, c.state) for s, c in d.index.items()} == model
    assert fold(d.events) == d.index
    assert Directory.loads(d.dumps()).index == d.index


@settings(max_examples=100, deadline=None)
@given(histories())
def test_holdings_partition_live_chips(history):
    events, _ = history
    d = Directory(events)
    fabricated = sum(e.event == "fabricated" for e in events)
    destroyed = sum(e.event == "destroyed" for e in events)
    assert sum(len(holdings(d, o)) for o in OWNERS) == fabricated - destroyed


@pytest.fixture
def ten_chips():
    return Directory([fab(f"c{i}", "lab") for i in range(10)] + [fab("x", "other")])


def test_full_sample_is_whole_holding(ten_chips):
    assert sample_for_inspection(ten_chips, "lab", 10, np.random.default_rng(0)) == holdings(ten_chips, "lab")


def test_sample_is_reproducible(ten_chips):
    a = sample_for_inspection(ten_chips, "lab", 4, np.random.default_rng(9))
    b = sample_for_inspection(ten_chips, "lab", 4, np.random.default_rng(9))
    assert a == b and len(set(a)) == 4 and "x" not in a


def test_oversized_sample(ten_chips):
    with pytest.raises(SampleTooLarge):
        sample_for_inspection(ten_chips, "lab", 11, np.random.default_rng(0))


def test_sampling_is_uniform(ten_chips):
    rng = np.random.default_rng(123)
    n, s = 100_000, 3
    counts = dict.fromkeys(holdings(ten_chips, "lab"), 0)
    for _ in range(n):
        for serial in sample_for_inspection(ten_chips, "lab", s, rng):
            counts[serial] += 1
    p = s / 10
    sigma = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) < 3 * sigma for c in counts.values())
