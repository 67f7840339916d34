"""Shared fixtures.

The accuracy-trend tests need a handwritten-digit image set at the 6,000
train / 1,000 test desk scale. This environment has no network access to
fetch MNIST, so the fixture renders a stand-in from the bundled 8x8
handwritten digits (scikit-learn): each 28x28 sample is a seeded random
affine distortion (zoom, rotation, shift) of a real digit plus pixel noise.
Train and test draw from disjoint base-image pools. The files are written in
IDX format and consumed through the simulator's normal dataset interface.
"""

import numpy as np
import pytest
from scipy import ndimage
from sklearn.datasets import load_digits

from blockfed.data import write_idx_images, write_idx_labels

DIGITS_SEED = 20240101
N_TRAIN = 6000
N_TEST = 1000


def render_digit_images(n_train, n_test, seed):
    rng = np.random.default_rng(seed)
    base = load_digits()
    images = base.images / 16.0
    labels = base.target
    order = rng.permutation(len(images))
    split = int(len(images) * 0.8)
    pools = {"train": order[:split], "test": order[split:]}

    def draw(pool, n):
        picks = rng.choice(pools[pool], size=n)
        out = np.empty((n, 28, 28))
        for i, idx in enumerate(picks):
            img = ndimage.zoom(images[idx], 28 / 8, order=1)
            img = ndimage.rotate(img, rng.uniform(-14, 14), reshape=False, order=1)
            img = ndimage.shift(img, rng.uniform(-2.5, 2.5, size=2), order=1)
            img = img + rng.normal(0, 0.08, size=img.shape)
            out[i] = np.clip(img, 0.0, 1.0)
        return (out * 255).astype(np.uint8), labels[picks].astype(np.uint8)

    train = draw("train", n_train)
    test = draw("test", n_test)
    return train, test


@pytest.fixture(scope="session")
def digits_idx_dir(tmp_path_factory):
    """IDX files of the rendered-digit dataset, built once per session."""
    out = tmp_path_factory.mktemp("digits")
    (train_x, train_y), (test_x, test_y) = render_digit_images(N_TRAIN, N_TEST, DIGITS_SEED)
    write_idx_images(str(out / "train-images.idx"), train_x)
    write_idx_labels(str(out / "train-labels.idx"), train_y)
    write_idx_images(str(out / "test-images.idx"), test_x)
    write_idx_labels(str(out / "test-labels.idx"), test_y)
    return out


def idx_data_section(digits_dir):
    return {
        "data_source": "idx",
        "train_images": str(digits_dir / "train-images.idx"),
        "train_labels": str(digits_dir / "train-labels.idx"),
        "test_images": str(digits_dir / "test-images.idx"),
        "test_labels": str(digits_dir / "test-labels.idx"),
    }
