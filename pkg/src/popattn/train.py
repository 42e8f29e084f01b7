"""Mini-batch training with the two-phase learning-rate schedule, and evaluation metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataset import LabeledExample
from .environment import UserEnvironment
from .errors import InvalidInputError, TrainingError
from .model import DualAttentionModel, make_batch

log = logging.getLogger(__name__)

THRESHOLD = 0.5
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "val_precision", "val_recall", "val_f", "val_accuracy")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    lr_initial: float = 1e-3
    lr_after: float = 1e-4
    lr_switch_epoch: int = 2
    patience: int = 5
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.lr_initial <= 0 or self.lr_after <= 0:
            raise InvalidInputError("learning rates must be positive")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr_initial if epoch <= self.lr_switch_epoch else self.lr_after


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f_measure: float
    accuracy: float
    f_undefined: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        total = tp + fp + tn + fn
        if total == 0:
            raise InvalidInputError("metrics of an empty evaluation set")
        precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        undefined = precision + recall == 0
        f = 0.0 if undefined else 2 * precision * recall / (precision + recall)
        return cls(tp, fp, tn, fn, precision, recall, f, 100.0 * (tp + tn) / total, undefined)

    @classmethod
    def from_predictions(cls, labels, predicted) -> "Metrics":
        y = np.asarray(labels, dtype=bool)
        p = np.asarray(predicted, dtype=bool)
        return cls.from_counts(int(np.sum(y & p)), int(np.sum(~y & p)), int(np.sum(~y & ~p)), int(np.sum(y & ~p)))

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f_measure": self.f_measure,
                "accuracy": self.accuracy, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "f_undefined": self.f_undefined}


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val: Metrics


@dataclass
class TrainResult:
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_state: dict[str, np.ndarray] = field(default_factory=dict)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for e in self.history:
            w.writerow([e.epoch, f"{e.lr:g}", f"{e.train_loss:.6f}", f"{e.val.precision:.4f}",
                        f"{e.val.recall:.4f}", f"{e.val.f_measure:.4f}", f"{e.val.accuracy:.4f}"])
        return buf.getvalue()


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict(model: DualAttentionModel, examples: Sequence[LabeledExample],
            envs: Mapping[str, UserEnvironment] | None, batch_size: int = 256) -> np.ndarray:
    if not examples:
        return np.zeros(0)
    probs = []
    for idx in iterate_batches(len(examples), batch_size, None):
        probs.append(model.predict_proba(make_batch([examples[i] for i in idx], envs, model.cfg)))
    return np.concatenate(probs)


def evaluate(model: DualAttentionModel, examples: Sequence[LabeledExample],
             envs: Mapping[str, UserEnvironment] | None, threshold: float = THRESHOLD) -> Metrics:
    if not examples:
        raise InvalidInputError("cannot evaluate on an empty set")
    probs = predict(model, examples, envs)
    return Metrics.from_predictions([e.label for e in examples], probs >= threshold)


def train_step(model: DualAttentionModel, batch, state: T.AdamState, lr: float,
               clip_norm: float | None = None) -> float:
    params = model.parameters()
    T.zero_grads(params)
    loss = model.loss(batch)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    T.backward(loss)
    if clip_norm:
        T.clip_grad_norm(params, clip_norm)
    T.adam_step(params, state, lr)
    return value


def train(model: DualAttentionModel, train_set: Sequence[LabeledExample], val_set: Sequence[LabeledExample],
          envs: Mapping[str, UserEnvironment] | None, cfg: TrainConfig) -> TrainResult:
    """Train in place; on return the model holds the best-validation-accuracy weights."""
    if not train_set or not val_set:
        raise InvalidInputError("training and validation splits must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    state = T.AdamState()
    result = TrainResult()
    best_acc = -1.0
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        total, seen = 0.0, 0
        for b, idx in enumerate(iterate_batches(len(train_set), cfg.batch_size, rng)):
            batch = make_batch([train_set[i] for i in idx], envs, model.cfg)
            loss = train_step(model, batch, state, lr, cfg.clip_norm)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            total += loss * len(idx)
            seen += len(idx)
        val = evaluate(model, val_set, envs)
        result.history.append(EpochLog(epoch, lr, total / seen, val))
        log.info("epoch %d lr %g loss %.4f val acc %.2f", epoch, lr, total / seen, val.accuracy)
        if val.accuracy > best_acc:
            best_acc = val.accuracy
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    model.load_state_dict(result.best_state)
    return result
