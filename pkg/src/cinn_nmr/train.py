"""Mini-batch training with fixed-epoch early stopping and per-epoch logs."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .chemdata import DatasetRow, rows_to_arrays
from .evaluate import f1_bits
from .invnet import InvertibleNet, Y_DIM
from .loss import POS_WEIGHT, LossWeights, total_loss
from .numeric import NonFiniteGradientError, RngStream, adam_step, no_grad

__all__ = [
    "TrainConfig",
    "EpochLog",
    "TrainingAborted",
    "split_dataset",
    "fit",
    "evaluate_losses",
    "format_epoch_logs",
    "write_epoch_logs",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "f1", "loss_y_train", "loss_x_train", "loss_y_val", "loss_x_val")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    split_fraction: float = 0.8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    blocks_per_stage: int = 2
    pos_weight: float = POS_WEIGHT
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.split_fraction < 1:
            raise ValueError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    f1_val: float
    loss_y_train: float
    loss_x_train: float
    loss_y_val: float
    loss_x_val: float


class TrainingAborted(RuntimeError):
    """Loss or gradient went non-finite; ``net`` holds the last good parameters."""

    def __init__(self, message: str, net: InvertibleNet, logs: list[EpochLog]):
        super().__init__(message)
        self.net = net
        self.logs = logs


def split_dataset(rows: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle; the first ``ceil(fraction * n)`` rows go to training."""
    n = len(rows)
    if n < 2:
        raise ValueError(f"need at least 2 rows to split, got {n}")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    perm = RngStream(seed).substream(0xD47A).permutation(n)
    n_train = min(n - 1, math.ceil(round(fraction * n, 9)))
    return [rows[i] for i in perm[:n_train]], [rows[i] for i in perm[n_train:]]


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def evaluate_losses(
    net: InvertibleNet,
    x: np.ndarray,
    codes: np.ndarray,
    weights: LossWeights,
    rng: RngStream,
    batch_size: int = 64,
    pos_weight: float = POS_WEIGHT,
) -> tuple[float, float, np.ndarray]:
    """Sample-weighted (loss_y, loss_x) and the y-latent logits, without gradients."""
    loss_y = loss_x = 0.0
    logits = []
    with no_grad():
        for b, idx in enumerate(_batches(len(x), batch_size)):
            lb = total_loss((x[idx], codes[idx]), net, weights, rng.substream(b), pos_weight)
            loss_y += lb.loss_y * len(idx)
            loss_x += lb.loss_x * len(idx)
            logits.append(net.forward(x[idx]).data[:, :Y_DIM])
    n = max(len(x), 1)
    return loss_y / n, loss_x / n, np.concatenate(logits) if logits else np.zeros((0, Y_DIM))


def fit(
    rows: Sequence[DatasetRow],
    config: TrainConfig,
    checkpoint_path=None,
    on_epoch: Callable[[EpochLog, InvertibleNet], None] | None = None,
) -> tuple[InvertibleNet, list[EpochLog]]:
    """Train a fresh network for exactly ``config.epochs`` epochs.

    Everything random (split, init, shuffles, prior draws) derives from
    ``config.seed``, so the logs are reproducible bit for bit. ``on_epoch``
    receives each epoch's log and the live network after that epoch.
    """
    train_rows, val_rows = split_dataset(rows, config.split_fraction, config.seed)
    x_tr, c_tr = rows_to_arrays(train_rows)
    x_va, c_va = rows_to_arrays(val_rows)

    root = RngStream(config.seed)
    net = InvertibleNet(blocks_per_stage=config.blocks_per_stage, seed=root.substream(1).seed)
    params = net.parameters()
    logs: list[EpochLog] = []

    for epoch in range(1, config.epochs + 1):
        order = root.substream(2, epoch).permutation(len(x_tr))
        sum_y = sum_x = 0.0
        for b, idx in enumerate(_batches(len(x_tr), config.batch_size, order)):
            good = net.state_dict()
            lb = total_loss(
                (x_tr[idx], c_tr[idx]), net, config.weights, root.substream(3, epoch, b), config.pos_weight
            )
            try:
                if not math.isfinite(lb.total):
                    raise NonFiniteGradientError(f"non-finite loss {lb.total}")
                lb.tensor.backward()
                adam_step(params, config.learning_rate, config.beta1, config.beta2, config.eps)
            except NonFiniteGradientError as exc:
                net.load_state_dict(good)
                if checkpoint_path is not None:
                    save_checkpoint(net, checkpoint_path)
                raise TrainingAborted(f"epoch {epoch} batch {b}: {exc}", net, logs) from exc
            sum_y += lb.loss_y * len(idx)
            sum_x += lb.loss_x * len(idx)

        val_y, val_x, logits = evaluate_losses(
            net, x_va, c_va, config.weights, root.substream(4, epoch), pos_weight=config.pos_weight
        )
        entry = EpochLog(
            epoch=epoch,
            f1_val=f1_bits(logits, c_va),
            loss_y_train=sum_y / len(x_tr),
            loss_x_train=sum_x / len(x_tr),
            loss_y_val=val_y,
            loss_x_val=val_x,
        )
        logs.append(entry)
        log.info("epoch %d f1=%.4f loss_y=%.4f/%.4f", epoch, entry.f1_val, entry.loss_y_train, entry.loss_y_val)
        if on_epoch is not None:
            on_epoch(entry, net)

    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    return net, logs


def format_epoch_logs(logs: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for entry in logs:
        values = [getattr(entry, f.name) for f in fields(EpochLog)]
        writer.writerow([values[0], *(f"{v:.6f}" for v in values[1:])])
    return buf.getvalue()


def write_epoch_logs(logs: Sequence[EpochLog], path) -> None:
    atomic_write_bytes(path, format_epoch_logs(logs).encode())
