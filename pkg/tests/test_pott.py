import numpy as np
import pytest
from conftest import log_for
from hypothesis import given, settings
from hypothesis import strategies as st

from chipwatch.chip import LogEntry, WeightShard, hash_shard
from chipwatch.pott import (
    HashedTranscript,
    MissingCommitment,
    VerificationConfig,
    calibrate_epsilon,
    commit,
    commit_prefix,
    deterministic_epsilon,
    indel_distance,
    transcript_distance,
    verify,
)
from chipwatch.training import CheckpointSeries, DataSequence, TrainingTranscript


def naive_indel(a, b):
    """Plain recursion over the first symbols."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return naive_indel(a[1:], b[1:])
    return 1 + min(naive_indel(a[1:], b), naive_indel(a, b[1:]))


seqs = st.lists(st.integers(0, 3), max_size=8)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_indel_matches_naive_recursion(a, b):
    assert indel_distance(a, b) == naive_indel(a, b)


@given(seqs, seqs, seqs)
def test_indel_is_a_metric(a, b, c):
    assert indel_distance(a, b) == indel_distance(b, a)
    assert (indel_distance(a, b) == 0) == (a == b)
    assert indel_distance(a, c) <= indel_distance(a, b) + indel_distance(b, c)


def test_indel_counts_a_substitution_as_two():
    assert indel_distance("abc", "axc") == 2
    assert indel_distance("abc", "bc") == 1


def _config(epsilon=None, **kw):
    return VerificationConfig(epsilon=epsilon or deterministic_epsilon(58), **kw)


def test_commitment_round_trip(honest_commitment):
    again = HashedTranscript.loads(honest_commitment.dumps())
    assert again == honest_commitment
    assert again.digest() == honest_commitment.digest()


def test_prefix_commitment_equals_commitment_of_prefix(honest, honest_commitment):
    for steps in (0, 60, 200):
        assert commit_prefix(honest_commitment, honest.meta, steps) == commit(honest.prefix(steps))


def test_honest_transcript_is_accepted(honest, honest_commitment):
    shard, log = log_for(honest, 5)
    report = verify(honest, honest_commitment, shard, log, _config(selection="all", check_precommitment=True))
    assert report.accepted
    assert report.segments_checked == tuple(range(10))
    assert report.cost_J == 200
    assert max(report.segment_distances) == 0.0


def test_random_selection_checks_ten_percent(honest, honest_commitment):
    shard, log = log_for(honest, 10)
    report = verify(honest, honest_commitment, shard, log, _config())
    assert report.accepted and len(report.segments_checked) == 1 and report.cost_J == 20


def test_largest_jump_selection_follows_distance_metadata(honest, honest_commitment):
    shard, log = log_for(honest, 10)
    report = verify(honest, honest_commitment, shard, log, _config(selection="largest_jump", segments_to_check=2))
    jumps = np.array(honest_commitment.distance_metadata)
    assert set(report.segments_checked) == set(np.argsort(-jumps)[:2].tolist())


def test_altered_batch_fails_at_hash_check_before_replay(honest, honest_commitment):
    x = honest.data.inputs.copy()
    x[3, 0, 0] += 1.0
    tampered = TrainingTranscript(honest.meta, DataSequence(x, honest.data.targets), honest.checkpoints)
    shard, log = log_for(honest, 10)
    report = verify(tampered, honest_commitment, shard, log, _config(selection="all"))
    assert report.failed_ids == ("hash_consistency",)
    assert report.cost_J == 0 and report.segments_checked == ()


def test_wrong_distance_metadata_is_rejected(honest, honest_commitment):
    from dataclasses import replace

    lying = replace(honest_commitment, distance_metadata=tuple(d * 0.5 for d in honest_commitment.distance_metadata))
    shard, log = log_for(honest, 10)
    assert verify(honest, lying, shard, log, _config()).failed_ids == ("distance_metadata",)


def test_missing_commitment_raises(honest):
    shard, log = log_for(honest, 10)
    with pytest.raises(MissingCommitment):
        verify(honest, None, shard, log, _config())


def test_unlogged_target_fails_linkage(honest, honest_commitment):
    shard, _ = log_for(honest, 10)
    other = (LogEntry(0, 1.0, b"\x00" * 32),)
    assert "target_linkage" in verify(honest, honest_commitment, shard, other, _config()).failed_ids


def test_snapshot_between_checkpoints_links_by_replay(honest, honest_commitment):
    step = 125
    shard = WeightShard.full(honest.trajectory[step])
    log = (LogEntry(step, 2.0, hash_shard(shard)),)
    report = verify(honest, honest_commitment, shard, log, _config())
    assert report.accepted and report.linkage_steps == 5


def test_partial_shard_links(honest, honest_commitment):
    w = honest.checkpoints.weights[4]
    shard = WeightShard(w[20:40], 1, (20, 40))
    log = (LogEntry(80, 2.0, hash_shard(shard)),)
    assert verify(honest, honest_commitment, shard, log, _config()).accepted


def test_forged_checkpoint_fails_replay(honest):
    w = honest.checkpoints.weights.copy()
    w[3] += 1e-3
    forged = TrainingTranscript(honest.meta, honest.data, CheckpointSeries(w))
    shard, log = log_for(forged, 10, with_precommit=False)
    report = verify(forged, commit(forged), shard, log, _config(selection="all"))
    assert {c.segment for c in report.failed_checks if c.check_id == "segment_replay"} == {2, 3}


def test_calibration_scales_the_worst_honest_distance(reference_meta):
    cal = calibrate_epsilon(reference_meta.replace(total_steps=40), 1e-4, runs=3)
    assert cal.epsilon == pytest.approx(3 * cal.max_distance)
    assert cal.max_distance > 0
    assert calibrate_epsilon(reference_meta, 0.0).epsilon == deterministic_epsilon(reference_meta.n_params)


def test_transcript_distance_counts_batches_and_fields(honest):
    x = honest.data.inputs.copy()
    x[7] = 0.0
    other = TrainingTranscript(honest.meta.replace(learning_rate=0.1), DataSequence(x, honest.data.targets), honest.checkpoints)
    d = transcript_distance(honest, other)
    assert (d.d1, d.d2) == (2, 1)
    hashed = transcript_distance(commit(honest), commit(other))
    assert (hashed.d1, hashed.d2) == (2, 1)


@pytest.mark.parametrize("bad", [{"epsilon": 0}, {"epsilon": 1, "selection": "first"}, {"epsilon": 1, "segments_to_check": 1.5}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        VerificationConfig(**bad)
