"""Shared fixtures: tiny models on 16×16 images so the default suite stays fast.

Desk-scale runs are marked ``slow`` and only run with ``pytest --runslow``.
"""
import numpy as np
import pytest

from advmark.attack import AttackModels
from advmark.codec import init_codec, with_identity_encoder
from advmark.dataset import toy_images
from advmark.embedder import init_embedder

TINY_SIZE = 16
TINY_BITS = 4


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run the desk-scale training and campaign tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run, use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def codec():
    codec = init_codec(message_bits=TINY_BITS, width=4, blocks=1, strength=0.05, seed=0)
    codec.params.trained = True
    return codec


@pytest.fixture
def identity_codec(codec):
    return with_identity_encoder(codec)


@pytest.fixture
def embedder():
    embedder = init_embedder(
        embedding_dim=8, widths=(4, 4), image_size=TINY_SIZE, seed=0
    )
    embedder.params.trained = True
    return embedder


@pytest.fixture
def models(codec, embedder):
    return AttackModels(codec, embedder)


@pytest.fixture
def images():
    # Consecutive images come in same-identity pairs
    return toy_images(6, seed=0, size=TINY_SIZE)


@pytest.fixture
def pair(images):
    return images[0], images[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
