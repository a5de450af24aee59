"""Parameter counting and wall-clock benchmarking.

Timings measure a full optimization step (forward, loss, backward, Adam)
and an inference step (forward + argmax) on synthetic batches. Per-batch
times are collected over several repeats; comparisons should use the
medians, which shrug off scheduler noise much better than means.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import LossParams, total_loss
from .models import ModelConfig, build_model, expected_primary_caps
from .routing import capsule_lengths, classify
from .tensor import Tensor, clear_tape, no_grad
from .trainer import AdamOptimizer, single_thread

__all__ = ["BenchReport", "count_params", "benchmark", "report_text", "report_csv", "BENCH_CSV_HEADER"]

BENCH_CSV_HEADER = (
    "model,image_size,in_channels,param_count,primary_caps,batch_size,warmup,iters,repeats,"
    "train_mean_s,train_median_s,train_min_s,train_max_s,infer_mean_s,infer_median_s,infer_min_s,infer_max_s"
)


@dataclass(frozen=True)
class BenchReport:
    model: str
    image_size: int
    in_channels: int
    param_count: int
    primary_caps: int
    batch_size: int
    warmup: int
    iters: int
    repeats: int
    train_times: tuple[float, ...]  # per-batch seconds, all measured iterations
    infer_times: tuple[float, ...]

    @property
    def train_median(self) -> float:
        return float(np.median(self.train_times))

    @property
    def infer_median(self) -> float:
        return float(np.median(self.infer_times))

    @property
    def train_mean(self) -> float:
        return float(np.mean(self.train_times))

    @property
    def infer_mean(self) -> float:
        return float(np.mean(self.infer_times))


def count_params(config: ModelConfig) -> int:
    """Trainable scalar count; a pure function of the configuration."""
    model = build_model(config, np.random.default_rng(0))
    return sum(p.size for _, p in model.named_parameters())


def benchmark(
    config: ModelConfig,
    batch_size: int = 128,
    warmup: int = 1,
    iters: int = 3,
    repeats: int = 3,
    seed: int = 0,
    deterministic: bool = True,
) -> BenchReport:
    """Time optimization and inference steps on random batches.

    warmup iterations run first and are discarded; each of ``repeats``
    rounds then times ``iters`` steps individually, so the report holds
    iters*repeats samples per phase.
    """
    if iters < 1 or repeats < 1 or warmup < 0:
        raise ValueError(f"need iters >= 1, repeats >= 1, warmup >= 0 (got {iters}, {repeats}, {warmup})")
    rng = np.random.default_rng(seed)
    model = build_model(config, rng)
    optimizer = AdamOptimizer(list(model.named_parameters()))
    x = Tensor(rng.random((batch_size, config.in_channels, config.image_size, config.image_size), dtype=np.float32))
    y = rng.integers(0, config.n_classes, size=batch_size)

    def train_step() -> None:
        clear_tape()
        optimizer.zero_grad()
        caps = model.forward(x, training=True, rng=rng)
        recon = model.reconstruct(caps, y)
        loss, _ = total_loss(capsule_lengths(caps), y, recon, x, LossParams())
        loss.backward()
        optimizer.step(1e-3)

    def infer_step() -> None:
        with no_grad():
            classify(model.forward(x, training=False))
        clear_tape()

    def measure(step) -> tuple[float, ...]:
        for _ in range(warmup):
            step()
        samples = []
        for _ in range(repeats):
            for _ in range(iters):
                began = time.perf_counter()
                step()
                samples.append(time.perf_counter() - began)
        return tuple(samples)

    if deterministic:
        with single_thread():
            train_times = measure(train_step)
            infer_times = measure(infer_step)
    else:
        train_times = measure(train_step)
        infer_times = measure(infer_step)

    return BenchReport(
        model=config.variant,
        image_size=config.image_size,
        in_channels=config.in_channels,
        param_count=count_params(config),
        primary_caps=expected_primary_caps(config),
        batch_size=batch_size,
        warmup=warmup,
        iters=iters,
        repeats=repeats,
        train_times=train_times,
        infer_times=infer_times,
    )


def report_text(report: BenchReport) -> str:
    """Human-oriented key=value lines."""
    lines = [
        f"model={report.model}",
        f"geometry={report.image_size}x{report.image_size}x{report.in_channels}",
        f"param_count={report.param_count}",
        f"primary_caps={report.primary_caps}",
        f"batch_size={report.batch_size}",
        f"timing=warmup {report.warmup}, {report.iters} iters x {report.repeats} repeats",
        f"train_batch_seconds median={report.train_median:.4f} mean={report.train_mean:.4f} "
        f"min={min(report.train_times):.4f} max={max(report.train_times):.4f}",
        f"infer_batch_seconds median={report.infer_median:.4f} mean={report.infer_mean:.4f} "
        f"min={min(report.infer_times):.4f} max={max(report.infer_times):.4f}",
    ]
    return "\n".join(lines) + "\n"


def report_csv(reports: list[BenchReport]) -> str:
    """Machine-oriented CSV, one row per report."""
    rows = [BENCH_CSV_HEADER]
    for r in reports:
        rows.append(
            ",".join(
                str(v)
                for v in (
                    r.model,
                    r.image_size,
                    r.in_channels,
                    r.param_count,
                    r.primary_caps,
                    r.batch_size,
                    r.warmup,
                    r.iters,
                    r.repeats,
                    f"{r.train_mean:.6f}",
                    f"{r.train_median:.6f}",
                    f"{min(r.train_times):.6f}",
                    f"{max(r.train_times):.6f}",
                    f"{r.infer_mean:.6f}",
                    f"{r.infer_median:.6f}",
                    f"{min(r.infer_times):.6f}",
                    f"{max(r.infer_times):.6f}",
                )
            )
        )
    return "\n".join(rows) + "\n"
