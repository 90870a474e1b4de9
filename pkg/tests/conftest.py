import os
from pathlib import Path

import numpy as np
import pytest

from ut_transfer import tensor as T
from ut_transfer.models import ArchitectureDescriptor, build_model

MNIST_DIR = Path(os.environ.get("UT_TRANSFER_MNIST", "/root/data/mnist"))


def mnist_available() -> bool:
    try:
        from ut_transfer.datasets import find_mnist_dir
        find_mnist_dir(MNIST_DIR)
        return True
    except Exception:
        return False


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def tiny(family="smallcnn", shape=(1, 8, 8), classes=3, seed=0, widths=None, **kw):
    widths = widths or {"mlp": (6,), "smallcnn": (2, 3, 4), "mini_resnet": (2, 3, 4), "mini_vgg": (2, 3)}[family]
    d = ArchitectureDescriptor(family, shape, classes, widths, hidden=kw.pop("hidden", 5),
                               input_mean=kw.pop("mean", (0.4,) * shape[0]), input_std=kw.pop("std", (0.3,) * shape[0]))
    return build_model(d, seed, **kw)


# Acceptance criteria register one line each here; the lines are printed in the terminal summary.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
