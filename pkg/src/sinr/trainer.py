"""Training protocol: 9:1 split, Adam, early stopping on rising validation loss."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from .channel import ChannelConfig, Permutation, channel_as_dropout, sample_rng, transmit_batch
from .data import Dataset, write_csv
from .errors import ConfigError, TrainingDivergedError
from .model import SubModelPair, set_all_dropout, split_at
from .nn import Adam, Mode, Network, check_rate, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 150
    patience: int = 20
    batch_size: int = 128
    lr: float = 0.001
    seed: int = 0
    dropout: float | None = None  # None keeps the model's own rates

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.dropout is not None:
            self.dropout = check_rate(self.dropout)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from string-valued config entries; unknown keys are an error."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown training config key {key!r}")
            if key in ("max_epochs", "patience", "batch_size", "seed"):
                kwargs[key] = int(raw)
            elif key == "dropout":
                kwargs[key] = None if str(raw).lower() in ("", "none") else float(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    stop_reason: str = "max_epochs"
    best_epoch: int = 0  # 1-based
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def rows(self):
        for k, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), 1):
            yield (k, *row)

    def to_csv(self, path) -> None:
        write_csv(path, ["epoch", "train_loss", "val_loss", "val_acc"], self.rows())

    def summary(self) -> str:
        return (f"epochs={self.epochs} stop={self.stop_reason} best_epoch={self.best_epoch} "
                f"best_val_loss={self.val_loss[self.best_epoch - 1]:.6f} "
                f"best_val_acc={self.val_acc[self.best_epoch - 1]:.4f} wall={self.wall_time:.1f}s")


def split_train_validation(dataset: Dataset, seed: int = 0, ratio: float = 0.9) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    cut = math.floor(ratio * n)
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict(model, images: np.ndarray, batch_size: int = 256,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Eval-mode logits for a Network or a SubModelPair, in batches."""
    outs = []
    for sl in _batches(len(images), batch_size):
        if isinstance(model, SubModelPair):
            outs.append(model.compose(images[sl]))
        else:
            outs.append(model.forward(images[sl], Mode.EVAL, rng))
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def _loss_and_accuracy(model: Network, data: Dataset, batch_size: int) -> tuple[float, float]:
    total, correct = 0.0, 0
    for sl in _batches(len(data), batch_size):
        logits = model.forward(data.images[sl], Mode.EVAL)
        loss, _ = softmax_cross_entropy(logits, data.labels[sl])
        total += loss * (sl.stop - sl.start)
        correct += int((logits.argmax(axis=1) == data.labels[sl]).sum())
    return total / len(data), correct / len(data)


def train(model: Network, update: Dataset, validation: Dataset,
          cfg: TrainConfig | None = None) -> tuple[Network, TrainReport]:
    """Fit ``model`` in place and return it with its report.

    Training stops after ``max_epochs`` or once the validation loss has gone
    up (strictly) ``patience`` epochs in a row.  The parameters from the
    epoch with the lowest validation loss are restored at the end.
    """
    cfg = cfg or TrainConfig()
    if len(update) == 0 or len(validation) == 0:
        raise ConfigError("update and validation sets must be nonempty")
    if cfg.dropout is not None:
        set_all_dropout(model, cfg.dropout)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    report = TrainReport()
    best_loss, best_state = math.inf, [p.data.copy() for p in params]
    rising = 0
    t0 = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(update))
        running = 0.0
        for sl in _batches(len(update), cfg.batch_size):
            idx = order[sl]
            logits = model.forward(update.images[idx], Mode.TRAIN, rng)
            loss, grad = softmax_cross_entropy(logits, update.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}: training loss is {loss}")
            model.backward(grad)
            opt.step()
            running += loss * len(idx)
        val_loss, val_acc = _loss_and_accuracy(model, validation, 512)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"epoch {epoch}: validation loss is {val_loss}")
        if report.val_loss and val_loss > report.val_loss[-1]:
            rising += 1
        else:
            rising = 0
        report.train_loss.append(running / len(update))
        report.val_loss.append(val_loss)
        report.val_acc.append(val_acc)
        if val_loss < best_loss:
            best_loss, report.best_epoch = val_loss, epoch
            best_state = [p.data.copy() for p in params]
        log.debug("epoch %d train %.4f val %.4f acc %.4f", epoch, report.train_loss[-1], val_loss, val_acc)
        if rising >= cfg.patience:
            report.stop_reason = "early_stop"
            break

    for p, saved in zip(params, best_state):
        p.data[...] = saved
    for layer in model.layers:
        layer.clear()
    report.wall_time = time.perf_counter() - t0
    return model, report


def evaluate_accuracy(model: Network | SubModelPair, dataset: Dataset, channel: ChannelConfig | None = None,
                      *, division: int | None = None, granularity: str = "packet",
                      batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions.

    With a channel, every sample's representation takes an independent trip
    through it.  ``granularity="packet"`` permutes, packetizes and drops
    whole packets (one rng per sample, seeded from ``(channel.seed, index)``);
    ``"element"`` forces the division dropout on at rate ``p``.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if channel is None:
        logits = predict(model, dataset.images, batch_size)
        return float(np.mean(logits.argmax(axis=1) == dataset.labels))

    pair = model if isinstance(model, SubModelPair) else None
    if pair is None:
        if division is None:
            raise ConfigError("evaluating a full network through a channel needs a division point")
        pair = split_at(model, division)

    if granularity == "element":
        lossy = channel_as_dropout(pair, channel.p)
        logits = predict(lossy, dataset.images, batch_size, np.random.default_rng(channel.seed))
    elif granularity == "packet":
        perm = Permutation.from_seed(channel.seed, pair.n_elem)
        outs = []
        for sl in _batches(len(dataset), batch_size):
            y = pair.intermediate(dataset.images[sl])
            rngs = [sample_rng(channel.seed, i) for i in range(sl.start, sl.stop)]
            outs.append(pair.output_sub(transmit_batch(y, perm, channel, rngs)))
        logits = np.concatenate(outs)
    else:
        raise ConfigError(f"granularity must be 'packet' or 'element', got {granularity!r}")
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))
