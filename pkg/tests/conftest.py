import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wctdefense import data, model as M  # noqa: E402

MNIST_ROOT = Path(os.environ.get("WCTDEFENSE_MNIST", "/root/data/mnist"))
ACCEPTANCE_LINES: list = []  # filled by test_acceptance, echoed in the summary


def small_config(seed=0, input_shape=(1, 8, 8)):
    """Three-tap CNN small enough for finite-difference checks."""
    L = M.LayerSpec
    layers = (L("conv", 3), L("relu"), L("maxpool2", tap_id=1),
              L("conv", 4), L("relu", tap_id=2), L("maxpool2", tap_id=3),
              L("flatten"), L("linear", 6), L("relu"), L("linear", 10))
    return M.ModelConfig(layers=layers, input_shape=input_shape, n_classes=10, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_root():
    if not (MNIST_ROOT / "train-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST IDX files not found under {MNIST_ROOT}")
    return MNIST_ROOT


@pytest.fixture(scope="session")
def mnist_small(mnist_root):
    """First 2,000 training and 300 test images."""
    train = data.load_split(mnist_root, "train").head(2000)
    test = data.load_split(mnist_root, "test").head(300)
    return train, test


@pytest.fixture(scope="session")
def tiny_model(mnist_small):
    """VGG-mini trained for one epoch on 2,000 images (fast, roughly 90% accurate)."""
    train, _ = mnist_small
    return M.train(M.vgg_mini(0), train.images, train.labels, M.TrainConfig(epochs=1))


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory, mnist_small):
    """An IDX data directory with 600 training and 80 test images."""
    train, test = mnist_small
    root = tmp_path_factory.mktemp("mini-mnist")
    for split, ds in (("train", train.head(600)), ("test", test.head(80))):
        img, lab = data.SPLITS[split]
        data.write_idx(root / img, root / lab, ds.images, ds.labels)
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
