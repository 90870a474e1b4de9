"""SGD training with one checkpoint per epoch.

The store also answers which epoch is fully trained (lowest validation loss)
and which epochs count as undertrained (higher validation loss *and* earlier
than the fully trained epoch).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, _Reader, atomic_write, decode_tensors, encode_tensors,
                         read_checkpoint, write_checkpoint)
from .datasets import Dataset, iterate_batches
from .models import Model, forward, input_gradient, predict_logits

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, storage failure, bad configuration)."""


@dataclass(frozen=True)
class SteppedSchedule:
    base_lr: float = 0.1
    decay_factor: float = 0.1
    milestones: tuple[int, ...] = (15, 30)


@dataclass(frozen=True)
class CyclicSchedule:
    min_lr: float = 0.0
    max_lr: float = 0.2
    period: int = 10


Schedule = Union[SteppedSchedule, CyclicSchedule]


@dataclass(frozen=True)
class FastFGSM:
    epsilon: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: Schedule = field(default_factory=SteppedSchedule)
    seed: int = 0
    adversarial: FastFGSM | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.momentum < 0:
            problems.append("momentum must be >= 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        s = self.schedule
        if isinstance(s, SteppedSchedule):
            if not s.base_lr > 0:
                problems.append("schedule.base_lr must be > 0")
            if not s.decay_factor > 0:
                problems.append("schedule.decay_factor must be > 0")
            ms = list(s.milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                problems.append("schedule.milestones must be strictly increasing")
            if any(m < 1 or m >= self.epochs for m in ms):
                problems.append("schedule.milestones must lie in [1, epochs)")
        elif isinstance(s, CyclicSchedule):
            if s.min_lr < 0 or not s.max_lr > 0 or s.max_lr < s.min_lr:
                problems.append("cyclic schedule needs 0 <= min_lr <= max_lr and max_lr > 0")
            if s.period < 2:
                problems.append("schedule.period must be >= 2")
        else:
            problems.append(f"unknown schedule {s!r}")
        if self.adversarial is not None and self.adversarial.epsilon < 0:
            problems.append("adversarial.epsilon must be >= 0")
        return problems


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate used during ``epoch`` (1-based)."""
    if isinstance(schedule, SteppedSchedule):
        drops = sum(1 for m in schedule.milestones if m <= epoch - 1)
        return schedule.base_lr * schedule.decay_factor ** drops
    if isinstance(schedule, CyclicSchedule):
        phase = (epoch % schedule.period) / schedule.period
        tri = 1.0 - abs(2.0 * phase - 1.0)
        return schedule.min_lr + (schedule.max_lr - schedule.min_lr) * tri
    raise TypeError(f"unknown schedule {schedule!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float


def format_log(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.lr)])
    return buf.getvalue()


def parse_log(text: str) -> list[EpochRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != LOG_FIELDS:
        raise TrainingError(f"epoch log header must be {','.join(LOG_FIELDS)}")
    out = []
    for row in rows[1:]:
        if len(row) != len(LOG_FIELDS):
            raise TrainingError(f"malformed epoch log row {row}")
        out.append(EpochRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]), float(row[4])))
    return out


class CheckpointStore:
    """Directory of ``epoch_XXX.ckpt`` files plus ``log.csv``.

    A checkpoint file is always written before its log row, so every logged
    epoch has a readable checkpoint.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records: list[EpochRecord] = []
        log_path = self.root / "log.csv"
        if log_path.is_file():
            self.records = parse_log(log_path.read_text())
            for r in self.records:
                if not self.path(r.epoch).is_file():
                    raise TrainingError(f"{self.root}: epoch {r.epoch} logged without a checkpoint")
            expected = list(range(1, len(self.records) + 1))
            if [r.epoch for r in self.records] != expected:
                raise TrainingError(f"{self.root}: epoch log is not contiguous from 1")

    def path(self, epoch: int) -> Path:
        return self.root / f"epoch_{epoch:03d}.ckpt"

    def optimizer_path(self, epoch: int) -> Path:
        return self.root / f"epoch_{epoch:03d}.momentum"

    @property
    def epochs(self) -> list[int]:
        return [r.epoch for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def record(self, epoch: int) -> EpochRecord:
        for r in self.records:
            if r.epoch == epoch:
                return r
        raise KeyError(f"epoch {epoch} not in store {self.root} (have {self.epochs})")

    def load(self, epoch: int) -> Checkpoint:
        self.record(epoch)
        return read_checkpoint(self.path(epoch))

    def append(self, model: Model, record: EpochRecord, momentum: dict[str, np.ndarray] | None = None) -> None:
        if record.epoch != len(self.records) + 1:
            raise TrainingError(f"expected epoch {len(self.records) + 1}, got {record.epoch}")
        try:
            write_checkpoint(self.path(record.epoch), model, record.epoch, record.val_loss)
            if momentum is not None:
                atomic_write(self.optimizer_path(record.epoch), encode_tensors(momentum))
            atomic_write(self.root / "log.csv", format_log(self.records + [record]))
        except OSError as exc:
            raise TrainingError(f"could not write epoch {record.epoch} to {self.root}: {exc}") from exc
        self.records.append(record)

    def load_momentum(self, epoch: int) -> dict[str, np.ndarray] | None:
        p = self.optimizer_path(epoch)
        if not p.is_file():
            return None
        return decode_tensors(_Reader(p.read_bytes()))


def evaluate_split(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (fraction) of an eval-mode model."""
    if len(x) == 0:
        raise TrainingError("cannot evaluate on an empty split")
    total = 0.0
    correct = 0
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            logits, _ = forward(model, xb)
            total += float(T.cross_entropy(logits, yb, reduction="sum").data)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total / len(x), correct / len(x)


def fast_fgsm_perturb(model: Model, xb: np.ndarray, yb: np.ndarray, epsilon: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Single-step FGSM from a uniform random start inside the epsilon-ball."""
    dt = xb.dtype
    eps = dt.type(epsilon)
    delta = rng.uniform(-epsilon, epsilon, size=xb.shape).astype(dt)
    start = np.clip(xb + delta, 0, 1)
    was = model.mode
    model.eval()
    grad = input_gradient(model, start, yb)
    model.set_mode(was)
    delta = np.clip(delta + eps * np.sign(grad), -eps, eps)
    return np.clip(xb + delta, 0, 1).astype(dt, copy=False)


def train(model: Model, dataset: Dataset, config: TrainConfig, store: CheckpointStore | str | Path,
          progress: Callable[[EpochRecord], None] | None = None) -> CheckpointStore:
    """Mini-batch SGD with momentum; one checkpoint and log row per epoch.

    Updates follow ``v = momentum * v + (g + weight_decay * p)`` and
    ``p -= lr * v``. Shuffling uses ``default_rng([seed, epoch])``, so a run
    is a pure function of (model, dataset, config). A store that already holds
    some epochs of the same run is resumed from its last checkpoint.
    """
    problems = config.validate()
    if problems:
        raise TrainingError("; ".join(problems))
    if not isinstance(store, CheckpointStore):
        store = CheckpointStore(store)
    x_tr, y_tr = dataset.split("train")
    x_va, y_va = dataset.split("val")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise TrainingError("training needs non-empty train and validation splits")

    momentum = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    done = len(store)
    if done > config.epochs:
        raise TrainingError(f"store has {done} epochs, config asks for {config.epochs}")
    if done:
        ck = store.load(done)
        for name, p in model.params.items():
            p.data = ck.model.params[name].data.copy()
        saved = store.load_momentum(done)
        if saved is None:
            raise TrainingError(f"cannot resume {store.root}: momentum state for epoch {done} missing")
        momentum = {name: saved[name].copy() for name in momentum}
        log.info("resuming %s after epoch %d", store.root, done)

    dt = model.dtype
    mu = dt.type(config.momentum)
    wd = dt.type(config.weight_decay)
    for epoch in range(done + 1, config.epochs + 1):
        lr = lr_at(config.schedule, epoch)
        lr_t = dt.type(lr)
        rng = np.random.default_rng([config.seed, epoch])
        noise_rng = np.random.default_rng([config.seed, epoch, 1])
        model.train()
        loss_sum = 0.0
        for b, idx in enumerate(iterate_batches(len(x_tr), config.batch_size, rng)):
            xb, yb = x_tr[idx], y_tr[idx]
            if config.adversarial is not None:
                xb = fast_fgsm_perturb(model, xb, yb, config.adversarial.epsilon, noise_rng)
            try:
                logits, _ = forward(model, xb)
                loss = T.cross_entropy(logits, yb)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from None
            loss_sum += float(loss.data) * len(idx)
            for name, p in model.params.items():
                g = p.grad + wd * p.data
                v = momentum[name]
                v *= mu
                v += g
                p.data = p.data - lr_t * v
                p.grad = None
            if not all(np.isfinite(p.data).all() for p in model.params.values()):
                raise TrainingError(f"non-finite parameters after epoch {epoch}, batch {b}")
        model.eval()
        val_loss, val_acc = evaluate_split(model, x_va, y_va)
        record = EpochRecord(epoch, loss_sum / len(x_tr), val_loss, val_acc, lr)
        store.append(model, record, momentum)
        log.info("epoch %d lr=%.4g train_loss=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, lr, record.train_loss, val_loss, val_acc)
        if progress is not None:
            progress(record)
    return store


def adversarial_train_fgsm(model: Model, dataset: Dataset, config: TrainConfig,
                           store: CheckpointStore | str | Path,
                           progress: Callable[[EpochRecord], None] | None = None) -> CheckpointStore:
    """``train`` with fast-FGSM perturbed minibatches; requires ``config.adversarial``."""
    if config.adversarial is None:
        raise TrainingError("adversarial_train_fgsm needs config.adversarial = FastFGSM(epsilon)")
    return train(model, dataset, config, store, progress)


def _val_losses(store) -> list[tuple[int, float]]:
    records = store.records if isinstance(store, CheckpointStore) else list(store)
    if not records:
        raise TrainingError("store has no epochs")
    return [(r.epoch, r.val_loss) for r in records]


def select_fully_trained(store) -> int:
    """Epoch with the lowest validation loss; ties go to the earliest epoch."""
    pairs = _val_losses(store)
    best_epoch, best = pairs[0]
    for epoch, loss in pairs[1:]:
        if loss < best:
            best_epoch, best = epoch, loss
    return best_epoch


def is_undertrained(store, epoch: int) -> bool:
    pairs = dict(_val_losses(store))
    if epoch not in pairs:
        raise KeyError(f"epoch {epoch} not in store")
    full = select_fully_trained(store)
    return pairs[epoch] > pairs[full] and epoch < full
