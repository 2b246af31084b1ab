"""Shared fixtures: datasets and trained models at the standard desk scale.

Seeds are pinned so every threshold asserted in the suite is a regression
check against a reproducible artifact.
"""

import numpy as np
import pytest

from geocp.data import generate_glyphs
from geocp.groups import C4, C8
from geocp.models import TrainConfig, train_canonicalizer, train_classifier

SIDE = 32
CLASSES = 4


@pytest.fixture(scope="session")
def train_dataset():
    return generate_glyphs(seed=101, n=2000, num_classes=CLASSES, side=SIDE)


@pytest.fixture(scope="session")
def canon_dataset():
    return generate_glyphs(seed=102, n=1000, num_classes=CLASSES, side=SIDE).with_split(
        "canon-train"
    )


@pytest.fixture(scope="session")
def held_dataset():
    return generate_glyphs(seed=103, n=1000, num_classes=CLASSES, side=SIDE).with_split(
        "test"
    )


@pytest.fixture(scope="session")
def classifier(train_dataset):
    cfg = TrainConfig(epochs=30, batch_size=32, learning_rate=0.1, seed=11)
    return train_classifier(train_dataset, cfg, arch="mlp-1hidden", hidden=64)


@pytest.fixture(scope="session")
def cn4(canon_dataset):
    cfg = TrainConfig(epochs=15, batch_size=32, learning_rate=0.2, seed=12)
    return train_canonicalizer(canon_dataset, C4, cfg, hidden=32)


@pytest.fixture(scope="session")
def cn8(canon_dataset):
    cfg = TrainConfig(epochs=25, batch_size=32, learning_rate=0.2, seed=12)
    return train_canonicalizer(canon_dataset, C8, cfg, hidden=32)


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)
