import pytest

from chipwatch.chip import LogEntry, WeightShard, hash_shard
from chipwatch.pott import commit
from chipwatch.training import Hyperparams, train

REFERENCE = Hyperparams(
    seed=1,
    layer_sizes=(4, 8, 2),
    learning_rate=0.05,
    batch_size=16,
    total_steps=200,
    checkpoint_interval=20,
)

ACCEPTANCE_LINES: list[str] = []


def log_for(transcript, checkpoint: int, day: float = 1.0, with_precommit: bool = True):
    """A one-entry chip log holding the full-model snapshot at ``checkpoint``."""
    shard = WeightShard.full(transcript.checkpoints.weights[checkpoint])
    pre = commit(transcript, with_distances=False).precommitment if with_precommit else None
    step = transcript.checkpoint_step(checkpoint)
    return shard, (LogEntry(step, day, hash_shard(shard), pre),)


@pytest.fixture(scope="session")
def reference_meta():
    return REFERENCE


@pytest.fixture(scope="session")
def honest():
    return train(REFERENCE, keep_trajectory=True)


@pytest.fixture(scope="session")
def honest_commitment(honest):
    return commit(honest)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def gradient_check(instance: int) -> float:
    """Relative error (2-norm) between the analytic gradient and central
    finite differences in float64 on a random small network."""
    import numpy as np

    from chipwatch.training import loss_and_grad, param_count

    rng = np.random.default_rng(instance)
    depth = int(rng.integers(2, 4))
    sizes = tuple(int(n) for n in rng.integers(1, 6, size=depth + 1))
    loss_id = "cross_entropy" if instance % 2 and sizes[-1] >= 2 else "mse"
    batch = int(rng.integers(1, 8))
    w = rng.normal(size=param_count(sizes))
    x = rng.normal(size=(batch, sizes[0]))
    if loss_id == "mse":
        t = rng.normal(size=(batch, sizes[-1]))
    else:
        t = np.eye(sizes[-1])[rng.integers(0, sizes[-1], size=batch)]
    _, g = loss_and_grad(w, x, t, sizes, loss_id)
    h = 1e-6
    fd = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        fd[i] = (loss_and_grad(w + e, x, t, sizes, loss_id)[0] - loss_and_grad(w - e, x, t, sizes, loss_id)[0]) / (2 * h)
    scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(g - fd) / scale)
