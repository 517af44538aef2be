import numpy as np
import pytest

from advmark import ops
from advmark.config import EmbedderConfig, MatcherConfig
from advmark.dataset import evaluation_pairs, generate_toy_dataset
from advmark.embedder import (
    embed_face,
    is_match,
    match,
    matching_accuracy,
    pair_similarities,
    similarity,
    train_embedder,
)
from advmark.errors import DomainError, ShapeError
from advmark.tensor import grad_check

from tests.conftest import TINY_SIZE


def tiny_config(**overrides) -> EmbedderConfig:
    values = dict(
        embedding_dim=8,
        widths=(4, 4),
        image_size=TINY_SIZE,
        epochs=1,
        batch=3,
        lr=0.01,
        seed=0,
    )
    values.update(overrides)
    return EmbedderConfig(**values)


def test_embedding_length(embedder, images):
    assert embed_face(images[0], embedder).shape == (embedder.embedding_dim,)


def test_embedding_is_deterministic(embedder, images):
    first = embed_face(images[0], embedder).data
    assert np.array_equal(first, embed_face(images[0], embedder).data)


def test_embedding_needs_configured_size(embedder, rng):
    with pytest.raises(ShapeError):
        embed_face(rng.uniform(size=(TINY_SIZE + 2, TINY_SIZE, 3)), embedder)


def test_similarity_gradient(embedder):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        point = {"image": rng.uniform(0.2, 0.8, size=(TINY_SIZE, TINY_SIZE, 3))}
        z_r = rng.normal(size=embedder.embedding_dim)

        def build(t):
            return ops.cosine_similarity(embed_face(t["image"], embedder), z_r)

        error = grad_check(build, point, max_coords=8, seed=seed)
        assert error is not None and error < 1e-4, f"seed {seed}"


def test_similarity(rng):
    z = rng.normal(size=16)
    assert similarity(z, z) == pytest.approx(1.0)
    assert similarity(z, 5.0 * z) == pytest.approx(similarity(z, z))
    assert similarity(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0


def test_similarity_of_degenerate_embedding():
    with pytest.raises(DomainError):
        similarity(np.zeros(4), np.ones(4))


@pytest.mark.parametrize("score, expected", [(0.31, 1), (0.3, 1), (0.29, 0)])
def test_is_match(score, expected):
    assert is_match(score, 0.3) == expected


def test_match_uses_matcher_threshold():
    a, b = np.array([1.0, 0.0]), np.array([1.0, 1.0])
    # cos = 0.7071
    assert match(a, b) == 1
    assert match(a, b, MatcherConfig(tau=0.8)) == 0


@pytest.mark.parametrize("tau", [-1.0, 1.0, 1.5])
def test_matcher_threshold_domain(tau):
    with pytest.raises(DomainError):
        MatcherConfig(tau=tau)


class TestTraining:
    @pytest.fixture
    def dataset(self):
        return generate_toy_dataset(3, 2, seed=0, size=TINY_SIZE)

    def test_training_is_deterministic(self, dataset):
        first, history = train_embedder(dataset, tiny_config())
        second, _ = train_embedder(dataset, tiny_config())
        assert first.params.equals(second.params)
        assert len(history) == 1
        assert 0.0 <= history[0]["train_accuracy"] <= 1.0

    def test_classification_head_is_dropped(self, dataset):
        embedder, _ = train_embedder(dataset, tiny_config())
        assert embedder.trained
        assert embedder.num_identities == 3
        assert all(not name.startswith("head") for name in embedder.params)

    def test_needs_two_identities(self, dataset):
        with pytest.raises(DomainError):
            train_embedder(dataset.subset(dataset.indices_of(0)), tiny_config())

    def test_image_size_must_match(self, dataset):
        with pytest.raises(ShapeError):
            train_embedder(dataset, tiny_config(image_size=32))


def test_pair_similarities(embedder):
    pairs = evaluation_pairs(3, seed=0, first_sample=4, size=TINY_SIZE)
    genuine, impostor = pair_similarities(pairs, embedder)
    assert genuine.shape == impostor.shape == (3,)
    assert np.all(np.abs(genuine) <= 1.0 + 1e-12)
    assert 0.0 <= matching_accuracy(pairs, embedder, MatcherConfig()) <= 1.0


@pytest.mark.slow
def test_desk_scale_separation_and_baseline():
    dataset = generate_toy_dataset(100, 4, seed=0)
    embedder, _ = train_embedder(dataset, EmbedderConfig())
    pairs = evaluation_pairs(100, seed=0, first_sample=4)
    genuine, impostor = pair_similarities(pairs, embedder)
    assert genuine.mean() > impostor.mean()
    assert matching_accuracy(pairs, embedder, MatcherConfig(tau=0.3)) >= 0.80
