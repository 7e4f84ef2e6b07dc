"""Optimisation loop: Adam, warmup plus inverse-sqrt decay, label smoothing, telemetry."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import EmptyBatchError, NumericalOverflowError
from .kvconfig import KVConfig
from .tensor import ParamStore, Tensor, backward, global_grad_norm

METRICS_HEADER = ["step", "lr", "loss", "grad_norm", "block_grad_norms(json)", "coeffs(json)", "secs"]
DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig(KVConfig):
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 32  # sequences per batch
    adam_beta1: float = 0.9
    adam_beta2: float = 0.997
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    clip_norm: Optional[float] = None
    seed: int = 1
    precision: str = "f64"
    log_interval: int = 10

    def __post_init__(self):
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.total_steps < 0 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("total_steps >= 0, batch_size >= 1 and log_interval >= 1 required")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    @property
    def dtype(self):
        return DTYPES[self.precision]


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup to ``peak_lr``, then ``peak_lr * sqrt(warmup / step)``."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = config.warmup_steps
    if step <= w:
        return config.peak_lr * step / w
    return config.peak_lr * math.sqrt(w / step)


@dataclass
class AdamMoments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, moments: AdamMoments, config: TrainConfig, step: int,
              lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update using the ``.grad`` of every parameter.

    All gradients are checked before anything is written, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    lr = lr_at(config, step) if lr is None else lr
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    live = [(n, p) for n, p in params.items() if p.grad is not None]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalOverflowError(f"non-finite gradient for parameter {name!r}", step=step)
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in live:
        g = p.grad
        m = moments.m.get(name)
        if m is None:
            m = moments.m[name] = np.zeros_like(p.data)
            moments.v[name] = np.zeros_like(p.data)
        v = moments.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)


def smoothed_cross_entropy(logits: Tensor, targets: np.ndarray, label_smoothing: float,
                           pad_id: Optional[int] = 0) -> Tensor:
    """Label-smoothed cross-entropy averaged over non-pad targets."""
    targets = np.asarray(targets)
    ignore = targets == pad_id if pad_id is not None else np.zeros(targets.shape, bool)
    count = int((~ignore).sum())
    if count == 0:
        raise EmptyBatchError("batch has no non-pad target tokens")
    per = T.softmax_cross_entropy(logits, targets, label_smoothing, ignore=ignore)
    return T.scalar_mul(T.sum(per), 1.0 / count)


def clip_gradients(tensors: Iterable[Tensor], clip_norm: Optional[float]) -> float:
    """Rescale grads in place so their global norm is at most ``clip_norm``; returns the pre-clip norm."""
    tensors = [t for t in tensors if t.grad is not None]
    norm = global_grad_norm(tensors)
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
        for t in tensors:
            t.grad = t.grad * factor
    return norm


def block_grad_norms(params: ParamStore, prefixes: list[str]) -> list[float]:
    """L2 norm of the parameter gradients under each block prefix."""
    out = []
    for prefix in prefixes:
        total = 0.0
        for name, p in params.items():
            if name.startswith(prefix + ".") and p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        out.append(math.sqrt(total))
    return out


def coefficient_snapshot(params: ParamStore) -> dict[str, list[float]]:
    """Values of every learned block coefficient (names containing ``.coef``)."""
    return {n: [float(x) for x in p.data.ravel()] for n, p in params.items() if ".coef" in n}


@dataclass
class MetricsRow:
    step: int
    lr: float
    train_loss: float
    grad_norm_global: float
    grad_norm_per_block: list[float]
    coefficients: dict[str, list[float]]
    wall_time: float

    def csv_fields(self) -> list[str]:
        return [str(self.step), repr(self.lr), repr(self.train_loss), repr(self.grad_norm_global),
                json.dumps(self.grad_norm_per_block), json.dumps(self.coefficients, sort_keys=True),
                f"{self.wall_time:.3f}"]


class MetricsWriter:
    """Appends rows to a CSV file, flushing after each one."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(METRICS_HEADER)
        self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._csv.writerow(row.csv_fields())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    params: ParamStore
    rows: list[MetricsRow]
    losses: list[float]  # every step, not only logged ones
    steps: int
    stopped_early: bool = False


def cast_params(params: ParamStore, dtype) -> None:
    for _, p in params.items():
        if p.data.dtype != dtype:
            p.data = p.data.astype(dtype)


def train(model, data: Iterable, config: TrainConfig, *, metrics_path=None, checkpoint_path=None,
          callback: Optional[Callable[[int, float], bool]] = None) -> TrainResult:
    """Run ``config.total_steps`` optimisation steps of ``model`` on batches from ``data``.

    ``model`` provides ``params``, ``config.pad_id``, ``block_prefixes()`` and
    ``logits_and_targets(batch, rng)``. ``callback(step, loss)`` may return True
    to stop early. On numerical overflow the last good parameters are written to
    ``checkpoint_path`` before the error propagates.
    """
    params: ParamStore = model.params
    cast_params(params, config.dtype)
    prefixes = model.block_prefixes()
    pad_id = model.config.pad_id
    drop_rng = np.random.default_rng([config.seed, 0xD0])
    moments = AdamMoments()
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None
    rows, losses = [], []
    start = time.perf_counter()
    stopped = False
    stream = iter(data)
    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            batch = next(stream)
            params.zero_grad()
            try:
                logits, targets = model.logits_and_targets(batch, rng=drop_rng)
                loss = smoothed_cross_entropy(logits, targets, config.label_smoothing, pad_id)
                backward(loss)
                norm = clip_gradients([p for _, p in params.items()], config.clip_norm)
                lr = lr_at(config, step)
                log_now = step == 1 or step % config.log_interval == 0 or step == config.total_steps
                per_block = block_grad_norms(params, prefixes) if log_now else None
                adam_step(params, moments, config, step, lr)
            except NumericalOverflowError as err:
                if checkpoint_path is not None:
                    params.save(checkpoint_path)
                if err.step is None:
                    err.step = step
                raise
            value = float(loss.data)
            losses.append(value)
            if log_now:
                row = MetricsRow(step, lr, value, norm, per_block, coefficient_snapshot(params),
                                 time.perf_counter() - start)
                rows.append(row)
                if writer:
                    writer.write(row)
            if callback is not None and callback(step, value):
                stopped = True
                break
    finally:
        if writer:
            writer.close()
    return TrainResult(params, rows, losses, step if config.total_steps else 0, stopped)
