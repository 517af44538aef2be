import os

import numpy as np
import pytest

from advmark.dataset import (
    evaluation_pairs,
    generate_toy_dataset,
    identity_pairs,
    load_image_folder,
    pixel_correlation,
    split_folder_dataset,
    toy_images,
    toy_sample,
    write_image_folder,
)
from advmark.errors import CommandError, DomainError


def test_toy_dataset_contract():
    dataset = generate_toy_dataset(100, 2, seed=0)
    assert dataset.images.shape == (200, 112, 112, 3)
    assert len(dataset.labels) == 200
    assert dataset.num_identities == 100
    assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
    assert np.bincount(dataset.labels).tolist() == [2] * 100


def test_toy_dataset_is_deterministic():
    first = generate_toy_dataset(5, 2, seed=3, size=32)
    second = generate_toy_dataset(5, 2, seed=3, size=32)
    assert first.images.tobytes() == second.images.tobytes()
    assert not np.array_equal(first.images, generate_toy_dataset(5, 2, seed=4, size=32).images)


def test_pixel_correlation():
    image = toy_sample(0, 0, 0, 16)
    assert pixel_correlation(image, image) == pytest.approx(1.0)
    assert pixel_correlation(image, 1.0 - image) == pytest.approx(-1.0)
    assert pixel_correlation(image, np.full_like(image, 0.5)) == 0.0


@pytest.mark.parametrize("identities, per_identity", [(1, 2), (3, 1)])
def test_invalid_counts(identities, per_identity):
    with pytest.raises(DomainError):
        generate_toy_dataset(identities, per_identity, seed=0)


def test_first_sample_offsets_the_draws():
    held_out = generate_toy_dataset(2, 2, seed=0, size=16, first_sample=4)
    assert held_out.sample_index.tolist() == [4, 5, 4, 5]
    assert np.array_equal(held_out.images[1], toy_sample(0, 0, 5, 16))


def test_evaluation_pairs_are_held_out():
    pairs = evaluation_pairs(3, seed=0, first_sample=4, size=16)
    assert len(pairs) == 3
    probe, reference = pairs[2]
    assert np.array_equal(probe, toy_sample(0, 2, 4, 16))
    assert np.array_equal(reference, toy_sample(0, 2, 5, 16))


def test_identity_pairs():
    dataset = generate_toy_dataset(3, 3, seed=0, size=16)
    pairs = identity_pairs(dataset)
    assert len(pairs) == 3
    assert np.array_equal(pairs[1][0], dataset.images[3])


def test_toy_images_count():
    assert toy_images(5, seed=0, size=16).shape == (5, 16, 16, 3)


class TestImageFolder:
    def test_written_folder_loads_back(self, tmp_path):
        dataset = generate_toy_dataset(2, 3, seed=0, size=16)
        written = write_image_folder(dataset, str(tmp_path))
        assert len(written) == 6
        assert os.path.isfile(tmp_path / "id0001" / "0002.png")

        loaded = load_image_folder(str(tmp_path), size=16)
        assert loaded.names == dataset.names
        assert loaded.labels.tolist() == dataset.labels.tolist()
        # 8-bit quantization
        assert np.abs(loaded.images - dataset.images).max() <= 0.5 / 255 + 1e-12

    def test_split_holds_out_last_two(self, tmp_path):
        write_image_folder(generate_toy_dataset(2, 3, seed=0, size=16), str(tmp_path))
        loaded = load_image_folder(str(tmp_path), size=16)
        train, pairs = split_folder_dataset(loaded)
        assert len(pairs) == 2
        assert len(train) == 2
        assert np.array_equal(pairs[0][1], loaded.images[2])

    def test_images_are_resized(self, tmp_path):
        write_image_folder(generate_toy_dataset(2, 2, seed=0, size=32), str(tmp_path))
        assert load_image_folder(str(tmp_path), size=16).images.shape == (4, 16, 16, 3)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CommandError):
            load_image_folder(str(tmp_path / "absent"))

    def test_empty_directory(self, tmp_path):
        (tmp_path / "someone").mkdir()
        with pytest.raises(CommandError):
            load_image_folder(str(tmp_path))
