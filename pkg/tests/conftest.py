import numpy as np
import pytest
import torch

from uekit.datasets import make_disjoint_prior_split, make_glyphs

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_glyphs():
    """4 classes, 8 train / 4 test per class, 16x16."""
    return make_glyphs(class_count=4, train_per_class=8, test_per_class=4,
                       image_size=(16, 16), seed=11)


@pytest.fixture(scope="session")
def tiny_split(tiny_glyphs):
    return make_disjoint_prior_split(tiny_glyphs, 2, 2, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
