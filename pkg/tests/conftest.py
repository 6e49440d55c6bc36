import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"


def image_source():
    """IDX pair for the image experiments.

    Set GTN_FASHION_MNIST_DIR to a directory holding the Fashion-MNIST
    training files to use them; otherwise the bundled 5000-image MNIST
    subset is used.
    """
    root = os.environ.get("GTN_FASHION_MNIST_DIR")
    if root:
        root = Path(root)
        for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
            if not any((root / (stem + ext)).exists() for ext in ("", ".gz")):
                raise FileNotFoundError(f"{stem} not found in {root}")

        def pick(stem):
            p = root / stem
            return p if p.exists() else root / (stem + ".gz")

        return "fashion-mnist", pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte")
    return "mnist5k", MNIST_IMAGES, MNIST_LABELS


@pytest.fixture(scope="session")
def mnist():
    from gtnscale.data import load_idx

    return load_idx(MNIST_IMAGES, MNIST_LABELS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
