"""Face-like identity datasets: a seeded procedural generator and an image-folder loader.

Each toy identity is a deterministic function of (seed, identity): a few
Gabor-like sinusoid patches and ellipse masks with identity-specific
frequency, orientation and colour. Samples of an identity differ by a small
translation, a brightness jitter and Gaussian pixel noise.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from advmark.errors import CommandError, DomainError
from advmark.functions import load_png, save_png

logger = logging.getLogger(__name__)

# Geometry below is expressed at this size and scaled for others
REFERENCE_SIZE = 112

MAX_SHIFT = 4
BRIGHTNESS_JITTER = 0.10
NOISE_SIGMA = 0.02

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class IdentityDataset(object):
    """Images with integer identity labels

    Attributes:
        images: N×H×W×3 array with values in [0, 1].
        labels: N identity labels in [0, num_identities).
        names: Identity names, indexed by label.
        sample_index: Per-image sample number within its identity.
    """

    images: np.ndarray
    labels: np.ndarray
    names: List[str]
    sample_index: np.ndarray
    seed: Optional[int] = None
    source: str = "toy"
    files: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int]]:
        for image, label in zip(self.images, self.labels):
            yield image, int(label)

    @property
    def num_identities(self) -> int:
        return len(self.names)

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, indices) -> "IdentityDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return IdentityDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            names=self.names,
            sample_index=self.sample_index[indices],
            seed=self.seed,
            source=self.source,
            files=[self.files[i] for i in indices] if self.files else [],
        )


def _identity_recipe(seed: int, identity: int) -> dict:
    rng = np.random.default_rng([seed, identity])
    patches = []
    for _ in range(3):
        patches.append(
            {
                "freq": rng.uniform(0.03, 0.12),
                "theta": rng.uniform(0.0, np.pi),
                "phase": rng.uniform(0.0, 2.0 * np.pi),
                "sigma": rng.uniform(18.0, 40.0),
                "cx": rng.uniform(-14.0, 14.0),
                "cy": rng.uniform(-14.0, 14.0),
                "color": rng.uniform(-0.25, 0.25, size=3),
            }
        )
    ellipses = []
    for _ in range(2):
        ellipses.append(
            {
                "cx": rng.uniform(-18.0, 18.0),
                "cy": rng.uniform(-18.0, 18.0),
                "ax": rng.uniform(12.0, 40.0),
                "ay": rng.uniform(12.0, 40.0),
                "angle": rng.uniform(0.0, np.pi),
                "color": rng.uniform(-0.2, 0.2, size=3),
            }
        )
    return {
        "base": rng.uniform(0.3, 0.6, size=3),
        "patches": patches,
        "ellipses": ellipses,
    }


def _render(recipe: dict, size: int, shift_x: float, shift_y: float) -> np.ndarray:
    scale = size / REFERENCE_SIZE
    coords = (np.arange(size) - (size - 1) / 2.0) / scale
    y, x = np.meshgrid(coords - shift_y / scale, coords - shift_x / scale, indexing="ij")

    image = np.empty((size, size, 3))
    image[:] = recipe["base"]
    for patch in recipe["patches"]:
        dx, dy = x - patch["cx"], y - patch["cy"]
        envelope = np.exp(-(dx * dx + dy * dy) / (2.0 * patch["sigma"] ** 2))
        along = dx * np.cos(patch["theta"]) + dy * np.sin(patch["theta"])
        wave = np.cos(2.0 * np.pi * patch["freq"] * along + patch["phase"])
        image += (envelope * wave)[:, :, None] * patch["color"]
    for ellipse in recipe["ellipses"]:
        dx, dy = x - ellipse["cx"], y - ellipse["cy"]
        c, s = np.cos(ellipse["angle"]), np.sin(ellipse["angle"])
        u, v = dx * c + dy * s, -dx * s + dy * c
        inside = (u / ellipse["ax"]) ** 2 + (v / ellipse["ay"]) ** 2 <= 1.0
        image += inside[:, :, None] * ellipse["color"]
    return image


def toy_sample(
    seed: int, identity: int, sample: int, size: int = REFERENCE_SIZE
) -> np.ndarray:
    """Render one sample of one toy identity"""
    recipe = _identity_recipe(seed, identity)
    rng = np.random.default_rng([seed, identity, sample, 1])
    shift_x, shift_y = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
    brightness = rng.uniform(1.0 - BRIGHTNESS_JITTER, 1.0 + BRIGHTNESS_JITTER)
    image = _render(recipe, size, float(shift_x), float(shift_y)) * brightness
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_toy_dataset(
    num_identities: int,
    per_identity: int,
    seed: int,
    size: int = REFERENCE_SIZE,
    first_sample: int = 0,
) -> IdentityDataset:
    """Generate `per_identity` samples for each of `num_identities` identities

    Args:
        num_identities: Number of identities (>= 2).
        per_identity: Samples per identity (>= 2).
        seed: Dataset seed. Identity appearance depends only on (seed, identity).
        size: Side length of the square images.
        first_sample: Index of the first sample drawn per identity, so that
            held-out samples can be generated without overlapping training ones.

    Raises:
        DomainError: On invalid counts.
    """
    if num_identities < 2:
        raise DomainError(f"num_identities must be >= 2, got {num_identities}")
    if per_identity < 2:
        raise DomainError(f"per_identity must be >= 2, got {per_identity}")
    if size < 8:
        raise DomainError(f"image size must be >= 8, got {size}")

    images = np.empty((num_identities * per_identity, size, size, 3))
    labels = np.empty(num_identities * per_identity, dtype=np.int64)
    samples = np.empty(num_identities * per_identity, dtype=np.int64)
    i = 0
    for identity in range(num_identities):
        for k in range(per_identity):
            sample = first_sample + k
            images[i] = toy_sample(seed, identity, sample, size)
            labels[i] = identity
            samples[i] = sample
            i += 1

    logger.debug(
        "Generated %d toy images (%d identities, seed %d)", len(labels), num_identities, seed
    )
    return IdentityDataset(
        images=images,
        labels=labels,
        names=[f"id{identity:04d}" for identity in range(num_identities)],
        sample_index=samples,
        seed=seed,
    )


def toy_images(
    count: int, seed: int, size: int = REFERENCE_SIZE, first_sample: int = 0
) -> np.ndarray:
    """`count` unlabeled toy images, two samples per identity"""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    identities = max(2, (count + 1) // 2)
    dataset = generate_toy_dataset(identities, 2, seed, size, first_sample=first_sample)
    return dataset.images[:count]


def identity_pairs(dataset: IdentityDataset) -> List[Tuple[np.ndarray, np.ndarray]]:
    """One (probe, reference) pair per identity: its first two samples"""
    pairs = []
    for label in range(dataset.num_identities):
        indices = dataset.indices_of(label)
        if len(indices) >= 2:
            pairs.append((dataset.images[indices[0]], dataset.images[indices[1]]))
    return pairs


def evaluation_pairs(
    num_identities: int, seed: int, first_sample: int, size: int = REFERENCE_SIZE
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Probe/reference pairs drawn from samples `first_sample` and `first_sample + 1`"""
    held_out = generate_toy_dataset(num_identities, 2, seed, size, first_sample=first_sample)
    return identity_pairs(held_out)


def split_folder_dataset(
    dataset: IdentityDataset,
) -> Tuple[IdentityDataset, List[Tuple[np.ndarray, np.ndarray]]]:
    """Hold out the last two images of every identity with at least three as a pair"""
    train_indices: List[int] = []
    pairs = []
    for label in range(dataset.num_identities):
        indices = list(dataset.indices_of(label))
        if len(indices) >= 3:
            pairs.append(
                (dataset.images[indices[-2]], dataset.images[indices[-1]])
            )
            indices = indices[:-2]
        train_indices.extend(indices)
    return dataset.subset(sorted(train_indices)), pairs


def write_image_folder(dataset: IdentityDataset, path: str) -> List[str]:
    """Write `<path>/<identity>/<sample>.png` files; returns the written paths"""
    written = []
    for image, label, sample in zip(dataset.images, dataset.labels, dataset.sample_index):
        directory = os.path.join(path, dataset.names[label])
        os.makedirs(directory, exist_ok=True)
        file_path = os.path.join(directory, f"{int(sample):04d}.png")
        save_png(file_path, image)
        written.append(file_path)
    logger.info("Wrote %d images to %s", len(written), path)
    return written


def load_image_folder(path: str, size: int = REFERENCE_SIZE) -> IdentityDataset:
    """Load a `<identity>/<name>.png` tree, resizing bilinearly to size×size

    Identities are sorted by directory name, images by file name.

    Raises:
        CommandError: If the directory is missing or holds no images.
    """
    if not os.path.isdir(path):
        raise CommandError(f"Dataset directory '{path}' does not exist")

    images, labels, samples, files, names = [], [], [], [], []
    for name in sorted(os.listdir(path)):
        directory = os.path.join(path, name)
        if not os.path.isdir(directory):
            continue
        entries = sorted(
            f for f in os.listdir(directory) if f.lower().endswith(IMAGE_SUFFIXES)
        )
        if not entries:
            logger.warning("Skipping identity '%s': no images", name)
            continue
        label = len(names)
        names.append(name)
        for k, entry in enumerate(entries):
            file_path = os.path.join(directory, entry)
            images.append(load_png(file_path, size=size))
            labels.append(label)
            samples.append(k)
            files.append(file_path)

    if not images:
        raise CommandError(f"No images found under '{path}'")

    logger.info("Loaded %d images of %d identities from %s", len(images), len(names), path)
    return IdentityDataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64),
        names=names,
        sample_index=np.array(samples, dtype=np.int64),
        source=path,
        files=files,
    )


def pixel_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two images' pixel values"""
    a = a.reshape(-1) - a.mean()
    b = b.reshape(-1) - b.mean()
    denominator = np.sqrt((a * a).sum() * (b * b).sum())
    if denominator == 0.0:
        return 0.0
    return float((a * b).sum() / denominator)
