"""Shared fixtures: a tiny dataset and a quickly trained model for unit
tests.  The acceptance suite trains the full configuration itself."""

import numpy as np
import pytest

from tdadv import nn
from tdadv.data import Dataset, SyntheticSpec, gen_synthetic


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return gen_synthetic(SyntheticSpec(samples_per_class=40, seed=11))


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset) -> nn.Model:
    """Small but usable classifier for functional tests."""
    model = nn.build_model(nn.ModelConfig(num_classes=10, widths=(8, 16, 32), seed=5))
    cfg = nn.TrainConfig(epochs=14, batch_size=16, learning_rate=0.1, seed=5)
    return nn.train(model, tiny_dataset.train, cfg)


@pytest.fixture(scope="session")
def correct_test_images(tiny_dataset, tiny_model):
    return [im for im in tiny_dataset.test if nn.predict(tiny_model, im.image) == im.label]
