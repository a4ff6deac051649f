"""Deterministic toy trainer producing training transcripts.

A transcript is the triple (hyperparameters, ordered data batches, weight
checkpoints every ``checkpoint_interval`` steps).  The model is a fully
connected MLP with tanh hidden layers trained by plain SGD (or SGD with
momentum, whose velocity is then stored alongside each checkpoint).

Determinism contract: single-threaded numpy float32 arithmetic on one
platform; replaying a segment from a recorded checkpoint over the recorded
batches reproduces the next checkpoint bit for bit when the original run was
trained with ``noise_sigma=0``.

Weights are flattened layer by layer: the ``fan_in x fan_out`` matrix in
row-major order followed by the bias vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prng import Stream

LOSSES = ("mse", "cross_entropy")
DATA_GENERATORS = ("teacher_regression", "teacher_classification")
OPTIMIZERS = ("sgd", "momentum")
TEACHER_WIDTH = 8
TARGET_NOISE = 0.1
TRANSCRIPT_FORMAT = "chipwatch-transcript/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class Hyperparams:
    seed: int
    layer_sizes: tuple[int, ...]
    learning_rate: float
    batch_size: int
    total_steps: int
    checkpoint_interval: int
    loss_id: str = "mse"
    data_gen_id: str = "teacher_regression"
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"layer_sizes must have >= 2 entries, all >= 1: {self.layer_sizes}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.checkpoint_interval < 1 or self.total_steps < 0:
            raise ValueError("batch_size, checkpoint_interval must be >= 1 and total_steps >= 0")
        if self.total_steps % self.checkpoint_interval:
            raise ValueError("checkpoint_interval must divide total_steps")
        if self.loss_id not in LOSSES:
            raise ValueError(f"unknown loss_id {self.loss_id!r}")
        if self.data_gen_id not in DATA_GENERATORS:
            raise ValueError(f"unknown data_gen_id {self.data_gen_id!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_id == "cross_entropy" and self.layer_sizes[-1] < 2:
            raise ValueError("cross_entropy needs at least 2 outputs")

    @property
    def n_params(self) -> int:
        return param_count(self.layer_sizes)

    @property
    def n_checkpoints(self) -> int:
        return self.total_steps // self.checkpoint_interval + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)

    def replace(self, **changes) -> "Hyperparams":
        d = self.to_dict()
        d.update(changes)
        return Hyperparams(**d)


@dataclass(frozen=True)
class DataSequence:
    inputs: np.ndarray  # (steps, batch, n_in) float32
    targets: np.ndarray  # (steps, batch, n_out) float32

    def __len__(self):
        return self.inputs.shape[0]

    def batch(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[i], self.targets[i]

    def __getitem__(self, sl: slice) -> "DataSequence":
        return DataSequence(self.inputs[sl], self.targets[sl])


@dataclass(frozen=True)
class CheckpointSeries:
    weights: np.ndarray  # (n_checkpoints, n_params) float32
    opt_state: np.ndarray | None = None  # momentum velocity, same shape

    def __len__(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class TrainingTranscript:
    meta: Hyperparams
    data: DataSequence
    checkpoints: CheckpointSeries
    # weights after every step; kept by the trainer for the chip simulator,
    # never part of the reported transcript
    trajectory: np.ndarray | None = field(default=None, compare=False, repr=False)

    def checkpoint_step(self, i: int) -> int:
        return i * self.meta.checkpoint_interval

    def prefix(self, steps: int) -> "TrainingTranscript":
        """The transcript a run would have reported had it stopped after ``steps``."""
        k = self.meta.checkpoint_interval
        if steps % k or not 0 <= steps <= self.meta.total_steps:
            raise ValueError(f"prefix length {steps} must be a multiple of {k} within the run")
        n = steps // k + 1
        ck = self.checkpoints
        return TrainingTranscript(
            meta=self.meta.replace(total_steps=steps),
            data=self.data[:steps],
            checkpoints=CheckpointSeries(
                ck.weights[:n], None if ck.opt_state is None else ck.opt_state[:n]
            ),
            trajectory=None if self.trajectory is None else self.trajectory[: steps + 1],
        )


def param_count(layer_sizes) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def unflatten(flat: np.ndarray, layer_sizes) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    pos = 0
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = flat[pos : pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((w, flat[pos : pos + b]))
        pos += b
    return layers


def init_weights(meta: Hyperparams) -> np.ndarray:
    """N(0, 1/fan_in) weight matrices, zero biases, from the ``init`` stream."""
    stream = Stream(meta.seed, "init")
    parts = []
    for a, b in zip(meta.layer_sizes[:-1], meta.layer_sizes[1:]):
        parts.append(stream.normal(a * b) / np.sqrt(a))
        parts.append(np.zeros(b))
    return np.concatenate(parts).astype(np.float32)


def _teacher(seed: int, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    stream = Stream(seed, "teacher")
    a = (stream.normal(n_in * TEACHER_WIDTH) / np.sqrt(n_in)).reshape(n_in, TEACHER_WIDTH)
    b = (stream.normal(TEACHER_WIDTH * n_out) / np.sqrt(TEACHER_WIDTH)).reshape(TEACHER_WIDTH, n_out)
    return a, b


def _draw_examples(stream: Stream, teacher, n_rows: int, n_in: int, n_out: int, data_gen_id: str):
    x = stream.normal(n_rows * n_in).reshape(n_rows, n_in)
    noise = stream.normal(n_rows * n_out).reshape(n_rows, n_out)
    a, b = teacher
    y = np.tanh(x @ a) @ b + TARGET_NOISE * noise
    if data_gen_id == "teacher_classification":
        y = np.eye(n_out)[np.argmax(y, axis=1)]
    return x.astype(np.float32), y.astype(np.float32)


def generate_data(meta: Hyperparams, steps: int | None = None) -> DataSequence:
    """Batches 0..steps-1, drawn in order from the ``data`` stream.

    Inputs are standard normal; targets come from a fixed random tanh teacher
    (``teacher`` stream) plus noise, arg-maxed to one-hot for classification.
    """
    steps = meta.total_steps if steps is None else steps
    n_in, n_out = meta.layer_sizes[0], meta.layer_sizes[-1]
    teacher = _teacher(meta.seed, n_in, n_out)
    stream = Stream(meta.seed, "data")
    xs = np.empty((steps, meta.batch_size, n_in), np.float32)
    ts = np.empty((steps, meta.batch_size, n_out), np.float32)
    for i in range(steps):
        xs[i], ts[i] = _draw_examples(stream, teacher, meta.batch_size, n_in, n_out, meta.data_gen_id)
    return DataSequence(xs, ts)


def holdout_data(meta: Hyperparams, dataset_id: str, n_rows: int = 256) -> tuple[np.ndarray, np.ndarray]:
    n_in, n_out = meta.layer_sizes[0], meta.layer_sizes[-1]
    teacher = _teacher(meta.seed, n_in, n_out)
    return _draw_examples(Stream(meta.seed, f"holdout:{dataset_id}"), teacher, n_rows, n_in, n_out, meta.data_gen_id)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def forward(flat: np.ndarray, x: np.ndarray, layer_sizes) -> np.ndarray:
    h = x
    layers = unflatten(flat, layer_sizes)
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
    return h


def _loss_from_output(y, t, loss_id):
    if loss_id == "mse":
        diff = y - t
        return np.mean(diff * diff), (2.0 / diff.size) * diff
    z = y - y.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -np.sum(t * logp) / n
    return loss, (np.exp(logp) - t) / n


def loss_and_grad(flat: np.ndarray, x: np.ndarray, t: np.ndarray, layer_sizes, loss_id: str):
    """Mean loss over the batch and its gradient w.r.t. the flattened weights.

    Works in whatever float dtype ``flat`` carries (float64 for gradient checks).
    """
    layers = unflatten(flat, layer_sizes)
    acts = [x.astype(flat.dtype, copy=False)]
    h = acts[0]
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    loss, delta = _loss_from_output(acts[-1], t.astype(flat.dtype, copy=False), loss_id)
    delta = delta.astype(flat.dtype, copy=False)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((delta.sum(axis=0), acts[i].T @ delta))
        if i:
            delta = (delta @ w.T) * (1 - acts[i] * acts[i])
    out = np.empty_like(flat)
    pos = 0
    for (gb, gw) in reversed(grads):
        out[pos : pos + gw.size] = gw.ravel()
        pos += gw.size
        out[pos : pos + gb.size] = gb
        pos += gb.size
    return flat.dtype.type(loss), out


def evaluate_loss(flat: np.ndarray, x: np.ndarray, t: np.ndarray, meta: Hyperparams) -> float:
    y = forward(flat.astype(np.float64), x.astype(np.float64), meta.layer_sizes)
    return float(_loss_from_output(y, t.astype(np.float64), meta.loss_id)[0])


def _sgd_step(w, v, x, t, meta, lr, mu, noise=None):
    loss, g = loss_and_grad(w, x, t, meta.layer_sizes, meta.loss_id)
    if noise is not None:
        g = g + noise
    if meta.optimizer == "momentum":
        v = mu * v + g
        w = w - lr * v
    else:
        w = w - lr * g
    return loss, w, v


def replay(w_start, batches: DataSequence, meta: Hyperparams, opt_start=None):
    """Re-execute ``len(batches)`` optimizer steps; returns (weights, velocity)."""
    w = np.array(w_start, dtype=np.float32)
    if w.shape != (meta.n_params,):
        raise ValueError(f"weight vector has shape {w.shape}, expected ({meta.n_params},)")
    n_in, n_out = meta.layer_sizes[0], meta.layer_sizes[-1]
    if batches.inputs.shape[1:] != (meta.batch_size, n_in) or batches.targets.shape[1:] != (meta.batch_size, n_out):
        raise ValueError("batch shapes do not match the hyperparameters")
    v = np.zeros_like(w) if opt_start is None else np.array(opt_start, dtype=np.float32)
    lr, mu = np.float32(meta.learning_rate), np.float32(meta.momentum)
    for i in range(len(batches)):
        _, w, v = _sgd_step(w, v, batches.inputs[i], batches.targets[i], meta, lr, mu)
    return w, v


def replay_segment(w_start, batches: DataSequence, meta: Hyperparams, opt_start=None) -> np.ndarray:
    return replay(w_start, batches, meta, opt_start)[0]


def train(
    meta: Hyperparams,
    noise_sigma: float = 0.0,
    noise_seed: int = 0,
    keep_trajectory: bool = False,
) -> TrainingTranscript:
    """Train from the seeded initialization and record a transcript.

    With ``noise_sigma > 0`` every gradient is perturbed by N(0, sigma^2) noise
    from a stream keyed by ``noise_seed``; this stands in for hardware
    nondeterminism and is not reproducible from the transcript.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    data = generate_data(meta)
    w = init_weights(meta)
    v = np.zeros_like(w)
    lr, mu = np.float32(meta.learning_rate), np.float32(meta.momentum)
    k = meta.checkpoint_interval
    ck_w = [w]
    ck_v = [v]
    traj = [w] if keep_trajectory else None
    noise_stream = Stream(noise_seed, f"hardware-noise/{meta.seed}") if noise_sigma > 0 else None
    for step in range(meta.total_steps):
        noise = None
        if noise_stream is not None:
            noise = (noise_sigma * noise_stream.normal(w.size)).astype(np.float32)
        loss, w, v = _sgd_step(w, v, data.inputs[step], data.targets[step], meta, lr, mu, noise)
        if not np.isfinite(loss) or not np.all(np.isfinite(w)):
            raise TrainingDiverged(step, float(loss))
        if traj is not None:
            traj.append(w)
        if (step + 1) % k == 0:
            ck_w.append(w)
            ck_v.append(v)
    opt_state = np.stack(ck_v) if meta.optimizer == "momentum" else None
    return TrainingTranscript(
        meta=meta,
        data=data,
        checkpoints=CheckpointSeries(np.stack(ck_w), opt_state),
        trajectory=None if traj is None else np.stack(traj),
    )


def shard_weights(weights, n_chips: int) -> list:
    """Contiguous order-preserving split; the first ``len % n`` shards get one extra value."""
    from .chip import WeightShard

    weights = np.asarray(weights, dtype=np.float32)
    n = weights.shape[0]
    if not 1 <= n_chips <= n:
        raise ValueError(f"cannot split {n} parameters across {n_chips} chips")
    base, extra = divmod(n, n_chips)
    shards = []
    start = 0
    for i in range(n_chips):
        end = start + base + (1 if i < extra else 0)
        shards.append(WeightShard(weights[start:end], i, (start, end)))
        start = end
    return shards


# ---------------------------------------------------------------------------
# canonical encodings (hash pre-images) and transcript files
# ---------------------------------------------------------------------------


def meta_bytes(meta: Hyperparams) -> bytes:
    return json.dumps(meta.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def batch_bytes(x: np.ndarray, t: np.ndarray) -> bytes:
    header = struct.pack("<QQQ", x.shape[0], x.shape[1], t.shape[1])
    return header + x.astype("<f4").tobytes() + t.astype("<f4").tobytes()


def checkpoint_bytes(w: np.ndarray, opt_state: np.ndarray | None = None) -> bytes:
    header = struct.pack("<QQ", w.shape[0], 0 if opt_state is None else 1)
    body = w.astype("<f4").tobytes()
    if opt_state is not None:
        body += opt_state.astype("<f4").tobytes()
    return header + body


def transcripts_identical(a: TrainingTranscript, b: TrainingTranscript) -> bool:
    def same(x, y):
        if x is None or y is None:
            return x is None and y is None
        return x.shape == y.shape and x.tobytes() == y.tobytes()

    return (
        a.meta == b.meta
        and same(a.data.inputs, b.data.inputs)
        and same(a.data.targets, b.data.targets)
        and same(a.checkpoints.weights, b.checkpoints.weights)
        and same(a.checkpoints.opt_state, b.checkpoints.opt_state)
    )


def save_transcript(transcript: TrainingTranscript, directory) -> Path:
    """Write ``manifest.json`` plus little-endian float32 blobs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ck = transcript.checkpoints
    files = {
        "checkpoints": "checkpoints.bin",
        "inputs": "inputs.bin",
        "targets": "targets.bin",
    }
    (d / files["checkpoints"]).write_bytes(ck.weights.astype("<f4").tobytes())
    (d / files["inputs"]).write_bytes(transcript.data.inputs.astype("<f4").tobytes())
    (d / files["targets"]).write_bytes(transcript.data.targets.astype("<f4").tobytes())
    if ck.opt_state is not None:
        files["opt_state"] = "opt_state.bin"
        (d / files["opt_state"]).write_bytes(ck.opt_state.astype("<f4").tobytes())
    manifest = {
        "format": TRANSCRIPT_FORMAT,
        "meta": transcript.meta.to_dict(),
        "counts": {
            "batches": len(transcript.data),
            "checkpoints": len(ck),
            "params": transcript.meta.n_params,
        },
        "dtype": "<f4",
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_transcript(directory) -> TrainingTranscript:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != TRANSCRIPT_FORMAT:
        raise ValueError(f"unsupported transcript format {manifest.get('format')!r}")
    meta = Hyperparams.from_dict(manifest["meta"])
    counts = manifest["counts"]
    files = manifest["files"]
    n_in, n_out = meta.layer_sizes[0], meta.layer_sizes[-1]

    def blob(name, shape):
        return np.frombuffer((d / files[name]).read_bytes(), dtype="<f4").astype(np.float32).reshape(shape)

    weights = blob("checkpoints", (counts["checkpoints"], counts["params"]))
    opt = blob("opt_state", weights.shape) if "opt_state" in files else None
    data = DataSequence(
        blob("inputs", (counts["batches"], meta.batch_size, n_in)),
        blob("targets", (counts["batches"], meta.batch_size, n_out)),
    )
    return TrainingTranscript(meta, data, CheckpointSeries(weights, opt))
