"""Transfer evaluation: attack a surrogate checkpoint, score a target checkpoint.

The surrogate never sees the target: ``best_surrogate_epoch`` only consumes a
finished matrix, and attacks are generated from surrogate gradients alone.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackSpec, run_attack
from .checkpoint import Checkpoint
from .models import Model, predict_logits

CSV_FIELDS = ("surrogate_arch", "surrogate_epoch", "target_arch", "target_epoch", "attack",
              "epsilon", "n", "clean_acc", "post_attack_acc")


class TransferError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelRef:
    """A checkpoint tagged with the name it is reported under."""

    arch: str
    epoch: int
    model: Model

    @classmethod
    def from_checkpoint(cls, arch: str, ck: Checkpoint) -> "ModelRef":
        return cls(arch, ck.epoch, ck.model)


@dataclass(frozen=True)
class TransferCell:
    surrogate_arch: str
    surrogate_epoch: int
    target_arch: str
    target_epoch: int
    attack: str
    epsilon: float
    n: int
    clean_acc: float
    post_attack_acc: float

    def __post_init__(self):
        if self.n <= 0:
            raise TransferError(f"cell {self.key}: example count must be > 0")
        for label in ("clean_acc", "post_attack_acc"):
            if not 0.0 <= getattr(self, label) <= 100.0:
                raise TransferError(f"cell {self.key}: {label} outside [0, 100]")

    @property
    def key(self) -> tuple:
        return (self.surrogate_arch, self.surrogate_epoch, self.target_arch, self.target_epoch, self.attack)


@dataclass
class TransferMatrix:
    cells: list[TransferCell] = field(default_factory=list)

    def __post_init__(self):
        self.cells = sorted(self.cells, key=lambda c: c.key)
        keys = [c.key for c in self.cells]
        if len(set(keys)) != len(keys):
            raise TransferError("duplicate cells in transfer matrix")

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def surrogate_epochs(self) -> list[int]:
        return sorted({c.surrogate_epoch for c in self.cells})

    @property
    def targets(self) -> list[tuple[str, int]]:
        return sorted({(c.target_arch, c.target_epoch) for c in self.cells})

    @property
    def attacks(self) -> list[str]:
        return sorted({c.attack for c in self.cells})

    @property
    def surrogates(self) -> list[str]:
        return sorted({c.surrogate_arch for c in self.cells})

    def select(self, attack: str | None = None, surrogate: str | None = None,
               target: str | None = None) -> "TransferMatrix":
        return TransferMatrix([c for c in self.cells
                               if (attack is None or c.attack == attack)
                               and (surrogate is None or c.surrogate_arch == surrogate)
                               and (target is None or c.target_arch == target)])

    def mean_by_epoch(self, attack: str | None = None) -> dict[int, float]:
        """Mean post-attack accuracy over targets (and attacks, if pooled) per surrogate epoch."""
        sums: dict[int, list[float]] = {}
        for c in self.cells:
            if attack is None or c.attack == attack:
                sums.setdefault(c.surrogate_epoch, []).append(c.post_attack_acc)
        return {e: float(np.mean(v)) for e, v in sorted(sums.items())}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in self.cells:
            w.writerow([c.surrogate_arch, c.surrogate_epoch, c.target_arch, c.target_epoch, c.attack,
                        repr(c.epsilon), c.n, repr(c.clean_acc), repr(c.post_attack_acc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransferMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_FIELDS:
            raise TransferError(f"transfer matrix header must be {','.join(CSV_FIELDS)}")
        cells = []
        for row in rows[1:]:
            if len(row) != len(CSV_FIELDS):
                raise TransferError(f"malformed transfer matrix row {row}")
            cells.append(TransferCell(row[0], int(row[1]), row[2], int(row[3]), row[4], float(row[5]),
                                      int(row[6]), float(row[7]), float(row[8])))
        return cls(cells)


def evaluate_accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> float:
    """Top-1 accuracy in percent."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise TransferError("evaluate_accuracy: empty batch")
    logits = predict_logits(model, inputs, batch_size)
    return 100.0 * float((logits.argmax(axis=1) == labels).sum()) / len(labels)


def _check_shapes(ref: ModelRef, x: np.ndarray, role: str) -> None:
    if tuple(x.shape[1:]) != ref.model.descriptor.input_shape:
        raise TransferError(f"{role} {ref.arch}@{ref.epoch} expects inputs {ref.model.descriptor.input_shape}, "
                            f"eval set has {tuple(x.shape[1:])}")


def transfer_cells(surrogate: ModelRef, targets: Sequence[ModelRef], spec: AttackSpec,
                   x: np.ndarray, y: np.ndarray, batch_size: int = 500,
                   clean_cache: dict | None = None) -> list[TransferCell]:
    """One attack on the surrogate, scored against every target."""
    if len(y) == 0:
        raise TransferError("transfer_cell: empty eval set")
    _check_shapes(surrogate, x, "surrogate")
    for t in targets:
        _check_shapes(t, x, "target")
    adv = run_attack(surrogate.model, x, y, spec, batch_size=batch_size).x_adv
    out = []
    for t in targets:
        ck = (t.arch, t.epoch)
        if clean_cache is not None and ck in clean_cache:
            clean = clean_cache[ck]
        else:
            clean = evaluate_accuracy(t.model, x, y, batch_size)
            if clean_cache is not None:
                clean_cache[ck] = clean
        post = evaluate_accuracy(t.model, adv, y, batch_size)
        out.append(TransferCell(surrogate.arch, surrogate.epoch, t.arch, t.epoch, spec.label,
                                float(spec.epsilon), int(len(y)), clean, post))
    return out


def transfer_cell(surrogate: ModelRef, target: ModelRef, spec: AttackSpec, x: np.ndarray, y: np.ndarray,
                  batch_size: int = 500) -> TransferCell:
    return transfer_cells(surrogate, [target], spec, x, y, batch_size)[0]


def sweep_epochs(available: Sequence[int], stride: int, include: Iterable[int] = ()) -> list[int]:
    if stride < 1:
        raise TransferError(f"stride must be >= 1, got {stride}")
    avail = sorted(available)
    if not avail:
        raise TransferError("surrogate store is empty")
    chosen = set(range(avail[0], avail[-1] + 1, stride)) & set(avail)
    chosen |= set(e for e in include if e in avail)
    return sorted(chosen)


def epoch_sweep(surrogate_store, surrogate_arch: str, stride: int, targets: Sequence[ModelRef],
                attacks: Sequence[AttackSpec], x: np.ndarray, y: np.ndarray,
                include: Iterable[int] = (), jobs: int = 1, batch_size: int = 500) -> TransferMatrix:
    """Cells for surrogate epochs ``1, 1 + stride, ...`` (plus ``include``) x targets x attacks.

    ``surrogate_store`` is a training ``CheckpointStore``; work items run on a
    thread pool of ``jobs`` workers and the result is sorted by coordinate, so
    serial and parallel sweeps agree.
    """
    epochs = sweep_epochs(surrogate_store.epochs, stride, include)
    clean_cache: dict = {}
    for t in targets:
        _check_shapes(t, x, "target")
        clean_cache[(t.arch, t.epoch)] = evaluate_accuracy(t.model, x, y, batch_size)

    def work(item):
        epoch, spec = item
        ref = ModelRef.from_checkpoint(surrogate_arch, surrogate_store.load(epoch))
        try:
            return transfer_cells(ref, targets, spec, x, y, batch_size, clean_cache)
        except Exception as exc:
            raise TransferError(f"sweep cell (surrogate {surrogate_arch}@{epoch}, attack {spec.label}) "
                                f"failed: {exc}") from exc

    items = [(e, s) for e in epochs for s in attacks]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    return TransferMatrix([c for cells in results for c in cells])


def best_surrogate_epoch(matrix: TransferMatrix, attack: str | None = None) -> int:
    """Surrogate epoch with the lowest mean post-attack accuracy across targets.

    Pass ``attack`` to rank a single attack, or leave it None to pool all.
    Ties resolve to the earlier epoch.
    """
    means = matrix.mean_by_epoch(attack)
    if not means:
        raise TransferError("best_surrogate_epoch: empty matrix")
    best_epoch, best = None, None
    for epoch, value in means.items():
        if best is None or value < best:
            best_epoch, best = epoch, value
    return best_epoch
