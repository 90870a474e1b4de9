import numpy as np
import pytest

from ut_transfer.attacks import AttackSpec
from ut_transfer.models import predict_logits
from ut_transfer.training import CheckpointStore, EpochRecord
from ut_transfer.transfer import (ModelRef, TransferCell, TransferError, TransferMatrix, best_surrogate_epoch,
                                  epoch_sweep, evaluate_accuracy, sweep_epochs, transfer_cell, transfer_cells)
from conftest import tiny


def data(n=12, seed=0, shape=(1, 8, 8)):
    rng = np.random.default_rng(seed)
    return rng.random((n,) + shape).astype(np.float32), rng.integers(0, 3, n)


def cell(epoch, acc, target="t", attack="ifgsm", surrogate="s"):
    return TransferCell(surrogate, epoch, target, 1, attack, 0.05, 10, 90.0, acc)


def test_evaluate_accuracy_examples():
    m = tiny("mlp", seed=1)
    x, _ = data()
    pred = predict_logits(m, x).argmax(axis=1)
    assert evaluate_accuracy(m, x, pred) == 100.0
    assert evaluate_accuracy(m, x, (pred + 1) % 3) == 0.0
    y = pred.copy()[:10]
    y[:3] = (y[:3] + 1) % 3
    assert evaluate_accuracy(m, x[:10], y) == 70.0
    with pytest.raises(TransferError):
        evaluate_accuracy(m, x[:0], y[:0])


def test_cell_invariants():
    with pytest.raises(TransferError):
        TransferCell("s", 1, "t", 1, "fgsm", 0.05, 0, 50.0, 50.0)
    with pytest.raises(TransferError):
        TransferCell("s", 1, "t", 1, "fgsm", 0.05, 5, 101.0, 50.0)


def test_white_box_cell_never_helps():
    for seed in range(5):
        m = tiny("smallcnn", seed=seed)
        x, y = data(n=20, seed=seed)
        ref = ModelRef("m", 1, m)
        c = transfer_cell(ref, ref, AttackSpec("ifgsm", iterations=5), x, y)
        assert c.post_attack_acc <= c.clean_acc


def test_zero_epsilon_and_clean_independence():
    s, t = ModelRef("s", 1, tiny("mlp", seed=1)), ModelRef("t", 1, tiny("smallcnn", seed=2))
    x, y = data()
    cells = [transfer_cell(s, t, AttackSpec(k, epsilon=e, iterations=3), x, y)
             for k in ("fgsm", "ifgsm", "mifgsm") for e in (0.0, 0.1)]
    assert len({c.clean_acc for c in cells}) == 1
    assert all(c.post_attack_acc == c.clean_acc for c in cells if c.epsilon == 0)


def test_shape_mismatch_is_an_error():
    s = ModelRef("s", 1, tiny("mlp"))
    t = ModelRef("t", 1, tiny("mlp", shape=(1, 4, 4)))
    x, y = data()
    with pytest.raises(TransferError, match="expects inputs"):
        transfer_cell(s, t, AttackSpec("fgsm"), x, y)
    with pytest.raises(TransferError, match="empty"):
        transfer_cells(s, [s], AttackSpec("fgsm"), x[:0], y[:0])


def test_matrix_rejects_duplicates_and_round_trips():
    with pytest.raises(TransferError):
        TransferMatrix([cell(1, 10.0), cell(1, 20.0)])
    m = TransferMatrix([cell(3, 12.5), cell(1, 1 / 3), cell(1, 40.0, target="u")])
    back = TransferMatrix.from_csv(m.to_csv())
    assert back == m
    assert back.surrogate_epochs == [1, 3]
    with pytest.raises(TransferError):
        TransferMatrix.from_csv("a,b\n1,2\n")


def test_best_surrogate_epoch_examples():
    assert best_surrogate_epoch(TransferMatrix([cell(7, 50.0)])) == 7
    m = TransferMatrix([cell(1, 30.0), cell(3, 10.0), cell(5, 20.0)])
    assert best_surrogate_epoch(m) == 3
    assert best_surrogate_epoch(TransferMatrix([cell(2, 5.0), cell(4, 5.0)])) == 2
    pooled = TransferMatrix([cell(1, 10.0), cell(3, 12.0), cell(1, 40.0, attack="fgsm"), cell(3, 20.0, attack="fgsm")])
    assert best_surrogate_epoch(pooled, "ifgsm") == 1
    assert best_surrogate_epoch(pooled) == 3
    with pytest.raises(TransferError):
        best_surrogate_epoch(TransferMatrix([]))


def test_sweep_epochs_counting():
    assert sweep_epochs(range(1, 41), 40) == [1]
    assert len(sweep_epochs(range(1, 41), 2)) == 20
    assert sweep_epochs(range(1, 11), 3, include=[10, 99]) == [1, 4, 7, 10]
    with pytest.raises(TransferError):
        sweep_epochs(range(1, 5), 0)


@pytest.fixture
def store(tmp_path):
    st = CheckpointStore(tmp_path / "s")
    for epoch in range(1, 7):
        st.append(tiny("smallcnn", seed=epoch), EpochRecord(epoch, 1.0, 1.0 / epoch, 0.5, 0.1))
    return st


def test_epoch_sweep_cells_and_parallel_agreement(store):
    targets = [ModelRef("a", 1, tiny("mlp", seed=7)), ModelRef("b", 2, tiny("smallcnn", seed=8))]
    x, y = data(n=16)
    attacks = [AttackSpec("ifgsm", iterations=3)]
    serial = epoch_sweep(store, "s", 2, targets, attacks, x, y)
    assert len(serial) == 3 * 2
    assert serial.surrogate_epochs == [1, 3, 5]
    parallel = epoch_sweep(store, "s", 2, targets, attacks, x, y, jobs=4)
    assert serial.to_csv() == parallel.to_csv()
    one = epoch_sweep(store, "s", 6, targets[:1], attacks, x, y)
    assert one.surrogate_epochs == [1]


def test_epoch_sweep_tags_errors(tmp_path):
    x, y = data()
    st = CheckpointStore(tmp_path / "bad")
    for epoch in range(1, 4):
        shape = (1, 4, 4) if epoch == 3 else (1, 8, 8)
        st.append(tiny("mlp", shape=shape, seed=epoch), EpochRecord(epoch, 1.0, 1.0, 0.5, 0.1))
    with pytest.raises(TransferError, match=r"target a@1 expects inputs"):
        epoch_sweep(st, "s", 2, [ModelRef("a", 1, tiny("mlp", shape=(1, 4, 4)))], [AttackSpec("fgsm")], x, y)
    with pytest.raises(TransferError, match=r"surrogate s@3, attack fgsm"):
        epoch_sweep(st, "s", 2, [ModelRef("a", 1, tiny("mlp"))], [AttackSpec("fgsm")], x, y)
