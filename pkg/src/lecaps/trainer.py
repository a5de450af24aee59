"""Training loop: Adam with bias correction, exponential LR decay,
checkpointing, and per-epoch metrics.

Determinism contract: all randomness flows through one np.random.Generator
whose bit-generator state is serialized into checkpoints, and
``single_thread()`` pins the BLAS pools so results are bit-reproducible.
In deterministic runs the metrics CSV records epoch_seconds as 0.0 because
wall time is the one column that can never reproduce.
"""

from __future__ import annotations

import io
import json
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DatasetSplit
from .losses import LossParams, total_loss
from .models import ModelConfig, build_model
from .routing import capsule_lengths, classify
from .tensor import Tensor, clear_tape, no_grad

__all__ = [
    "TrainConfig",
    "EpochStats",
    "AdamOptimizer",
    "TrainingDiverged",
    "CheckpointMismatch",
    "Checkpoint",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from",
    "apply_checkpoint",
    "model_from_checkpoint",
    "restore_rng",
    "metrics_to_csv",
    "single_thread",
]

CHECKPOINT_MAGIC = b"LECAPS01"
CSV_HEADER = "epoch,train_loss,test_acc,lr,epoch_seconds"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training state is not worth keeping."""


class CheckpointMismatch(RuntimeError):
    """Checkpoint tensors do not line up with the model being restored."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    gamma: float = 0.96
    batch_size: int = 128
    epochs: int = 3
    seed: int = 0
    hard_training: bool = False
    dropout_rate: float | None = None  # overrides the model config when set
    deterministic: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.gamma <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and gamma must be positive, batch_size >= 1, epochs >= 0")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_acc: float
    lr: float
    epoch_seconds: float


@contextmanager
def single_thread():
    """Pin BLAS thread pools to one thread for bit-reproducible numerics."""
    with threadpool_limits(limits=1):
        yield


class AdamOptimizer:
    """Adam with bias correction over a fixed set of named parameters."""

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        names = [n for n, _ in named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """One update; parameters with no gradient this step are skipped."""
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index batches covering [0, n); shuffled when an rng is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(model, split: DatasetSplit, batch_size: int = 256) -> float:
    """Accuracy under no_grad with dropout off; mutates nothing."""
    correct = 0
    with no_grad():
        for idx in iterate_batches(len(split), batch_size):
            x = Tensor(split.images[idx])
            predictions = classify(model.forward(x, training=False))
            correct += int((predictions == split.labels[idx]).sum())
    clear_tape()
    return correct / max(1, len(split))


def _run_epochs(
    model,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    config: TrainConfig,
    loss_params: LossParams,
    optimizer: AdamOptimizer,
    rng: np.random.Generator,
    start_epoch: int,
    epochs: int,
    on_epoch: Callable[[EpochStats], None] | None,
) -> list[EpochStats]:
    history: list[EpochStats] = []
    for offset in range(epochs):
        epoch = start_epoch + offset
        lr = config.lr * (config.gamma**epoch)
        began = time.perf_counter()
        batch_losses: list[float] = []
        for idx in iterate_batches(len(train_split), config.batch_size, rng):
            x = Tensor(train_split.images[idx])
            y = train_split.labels[idx]
            clear_tape()
            optimizer.zero_grad()
            caps = model.forward(x, training=True, rng=rng)
            recon = model.reconstruct(caps, y)
            loss, parts = total_loss(capsule_lengths(caps), y, recon, x, loss_params)
            if not np.isfinite(parts["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} after {len(batch_losses)} batches")
            loss.backward()
            optimizer.step(lr)
            batch_losses.append(parts["total"])
        optimizer.zero_grad()
        seconds = time.perf_counter() - began
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)) if batch_losses else 0.0,
            test_acc=evaluate(model, test_split, config.batch_size),
            lr=lr,
            epoch_seconds=0.0 if config.deterministic else seconds,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def train(
    model,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    config: TrainConfig,
    loss_params: LossParams = LossParams(),
    on_epoch: Callable[[EpochStats], None] | None = None,
    rng: np.random.Generator | None = None,
    optimizer: AdamOptimizer | None = None,
    start_epoch: int = 0,
) -> tuple[list[EpochStats], AdamOptimizer, np.random.Generator]:
    """Run the configured epochs (twice with tightened margins when
    hard_training is set; the second round resumes from a checkpoint of the
    first so the resume path is exercised, and epoch numbering continues).
    """
    if config.dropout_rate is not None:
        model.config = replace(model.config, dropout_rate=config.dropout_rate)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    optimizer = optimizer if optimizer is not None else AdamOptimizer(list(model.named_parameters()))

    history = _run_epochs(
        model, train_split, test_split, config, loss_params, optimizer, rng, start_epoch, config.epochs, on_epoch
    )
    if config.hard_training:
        buffer = io.BytesIO()
        save_checkpoint(buffer, checkpoint_from(model, optimizer, start_epoch + config.epochs, rng, config))
        buffer.seek(0)
        ckpt = load_checkpoint(buffer)
        rng = apply_checkpoint(model, optimizer, ckpt)
        history += _run_epochs(
            model,
            train_split,
            test_split,
            config,
            loss_params.hard_round(),
            optimizer,
            rng,
            start_epoch + config.epochs,
            config.epochs,
            on_epoch,
        )
    return history, optimizer, rng


# ---------------------------------------------------------------------------
# metrics


def metrics_to_csv(history: list[EpochStats]) -> str:
    """Stable text form: repr-round-trip floats, one row per epoch."""
    lines = [CSV_HEADER]
    for s in history:
        lines.append(f"{s.epoch},{s.train_loss!r},{s.test_acc!r},{s.lr!r},{s.epoch_seconds!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step_count: int
    epoch: int
    rng_state: dict
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)


def checkpoint_from(
    model,
    optimizer: AdamOptimizer,
    epoch: int,
    rng: np.random.Generator,
    train_config: TrainConfig | None = None,
) -> Checkpoint:
    return Checkpoint(
        params={n: np.array(p.data, copy=True) for n, p in model.named_parameters()},
        adam_m={n: np.array(a, copy=True) for n, a in optimizer.m.items()},
        adam_v={n: np.array(a, copy=True) for n, a in optimizer.v.items()},
        step_count=optimizer.step_count,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        model_config=asdict(model.config),
        train_config=asdict(train_config) if train_config is not None else {},
    )


def _dtype_tag(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("<").str  # e.g. '<f4'


def save_checkpoint(path_or_file, ckpt: Checkpoint) -> None:
    """Binary layout: magic, u64 header length, JSON header, raw little-endian
    tensor payloads in header order. Bit-exact round trip by construction."""
    entries = []
    payloads = []
    for group, tensors in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            entries.append(
                {"group": group, "name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr)}
            )
            payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = {
        "tensors": entries,
        "step_count": ckpt.step_count,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    def write(f) -> None:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)

    if isinstance(path_or_file, (str, Path)):
        with open(path_or_file, "wb") as f:
            write(f)
    else:
        write(path_or_file)


def load_checkpoint(path_or_file) -> Checkpoint:
    if isinstance(path_or_file, (str, Path)):
        path = Path(path_or_file)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        raw = path.read_bytes()
    else:
        raw = path_or_file.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch("not a checkpoint file (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointMismatch(f"checkpoint truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = arr.copy()
        offset += nbytes
    return Checkpoint(
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step_count=header["step_count"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        model_config=header.get("model_config", {}),
        train_config=header.get("train_config", {}),
    )


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def apply_checkpoint(model, optimizer: AdamOptimizer | None, ckpt: Checkpoint) -> np.random.Generator:
    """Load tensors into an existing model/optimizer, validating every shape.

    Returns a generator restored to the checkpoint's rng state.
    """
    model_params = dict(model.named_parameters())
    if set(model_params) != set(ckpt.params):
        missing = set(model_params) - set(ckpt.params)
        extra = set(ckpt.params) - set(model_params)
        raise CheckpointMismatch(f"parameter names differ (missing: {sorted(missing)}, extra: {sorted(extra)})")
    for name, tensor in model_params.items():
        saved = ckpt.params[name]
        if tuple(saved.shape) != tensor.shape:
            raise CheckpointMismatch(f"shape mismatch for {name!r}: checkpoint {saved.shape} vs model {tensor.shape}")
        tensor.data = saved.astype(tensor.dtype, copy=True)
        tensor.grad = None
    if optimizer is not None:
        for name in optimizer.params:
            if name in ckpt.adam_m:
                optimizer.m[name] = ckpt.adam_m[name].astype(optimizer.m[name].dtype, copy=True)
                optimizer.v[name] = ckpt.adam_v[name].astype(optimizer.v[name].dtype, copy=True)
        optimizer.step_count = ckpt.step_count
    return restore_rng(ckpt.rng_state)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the architecture recorded in the checkpoint and load it."""
    config = ModelConfig(**ckpt.model_config)
    model = build_model(config, np.random.default_rng(0))
    apply_checkpoint(model, None, ckpt)
    return model
