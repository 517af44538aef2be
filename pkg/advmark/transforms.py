"""Post-watermarking image transformations and the bit-accuracy robustness sweep"""
import io
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from advmark.codec import (
    CodecParams,
    bit_accuracy,
    embed,
    extract,
    predicted_bits,
    random_message,
)
from advmark.errors import DomainError
from advmark.functions import check_image, from_uint8, to_uint8, write_csv

logger = logging.getLogger(__name__)

TRANSFORM_KINDS = ("identity", "crop", "resize", "brightness", "contrast", "jpeg")

ROBUSTNESS_HEADER = ("transform", "parameter", "mean_bit_accuracy", "n_images")


@dataclass(frozen=True)
class TransformSpec(object):
    """One transformation and its parameter

    crop/resize take a side ratio in (0, 1], brightness/contrast a factor > 0
    and jpeg a quality factor in [1, 100]. identity ignores its parameter.
    """

    kind: str
    parameter: float = 1.0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DomainError(
                f"Unknown transform '{self.kind}'. Use one of {', '.join(TRANSFORM_KINDS)}"
            )
        p = self.parameter
        if self.kind in ("crop", "resize") and not 0.0 < p <= 1.0:
            raise DomainError(f"{self.kind} ratio must lie in (0, 1], got {p}")
        if self.kind in ("brightness", "contrast") and not p > 0.0:
            raise DomainError(f"{self.kind} factor must be > 0, got {p}")
        if self.kind == "jpeg" and not (1 <= p <= 100 and float(p).is_integer()):
            raise DomainError(f"JPEG quality must be an integer in [1, 100], got {p}")

    @property
    def label(self) -> str:
        if self.kind == "jpeg":
            return f"jpeg(q={int(self.parameter)})"
        return f"{self.kind}({self.parameter:g})"


def _reduced_side(side: int, ratio: float) -> int:
    return max(1, int(np.floor(ratio * side)))


def _crop(image: np.ndarray, ratio: float) -> np.ndarray:
    height, width = image.shape[:2]
    new_h, new_w = _reduced_side(height, ratio), _reduced_side(width, ratio)
    top = (height - new_h) // 2
    left = (width - new_w) // 2
    return image[top : top + new_h, left : left + new_w].copy()


def _resize(image: np.ndarray, ratio: float) -> np.ndarray:
    height, width = image.shape[:2]
    new_h, new_w = _reduced_side(height, ratio), _reduced_side(width, ratio)
    if (new_h, new_w) == (height, width):
        return image.copy()
    # Resample each channel as a float image so no 8-bit quantization creeps in
    channels = [
        np.asarray(
            PILImage.fromarray(image[:, :, c].astype(np.float32)).resize(
                (new_w, new_h), resample=PILImage.BILINEAR
            ),
            dtype=np.float64,
        )
        for c in range(image.shape[2])
    ]
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def _jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    buffer = io.BytesIO()
    PILImage.fromarray(to_uint8(image)).save(
        buffer, format="JPEG", quality=int(quality), subsampling=0
    )
    buffer.seek(0)
    with PILImage.open(buffer) as decoded:
        return from_uint8(np.asarray(decoded.convert("RGB")))


def _contrast(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image.copy()
    mean = image.mean(axis=(0, 1), keepdims=True)
    stretched = np.clip(mean + factor * (image - mean), 0.0, 1.0)
    # Flat channels are fixed points
    flat = image.min(axis=(0, 1)) == image.max(axis=(0, 1))
    stretched[:, :, flat] = image[:, :, flat]
    return stretched


def apply_transform(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply one transformation to an H×W×3 image in [0, 1]

    crop and resize return the reduced-size image; every other kind keeps
    the shape.
    """
    check_image(image, "apply_transform")
    if spec.kind == "identity":
        return image.copy()
    if spec.kind == "crop":
        return _crop(image, spec.parameter)
    if spec.kind == "resize":
        return _resize(image, spec.parameter)
    if spec.kind == "brightness":
        return np.clip(spec.parameter * image, 0.0, 1.0)
    if spec.kind == "contrast":
        return _contrast(image, spec.parameter)
    return _jpeg(image, int(spec.parameter))


def grid_specs(grid: Sequence[Tuple[str, float]]) -> List[TransformSpec]:
    return [TransformSpec(kind, float(parameter)) for kind, parameter in grid]


@dataclass
class RobustnessCell(object):
    transform: str
    parameter: float
    mean_bit_accuracy: float
    n_images: int

    def row(self) -> Tuple[str, str, str, int]:
        return (
            self.transform,
            f"{self.parameter:g}",
            f"{self.mean_bit_accuracy:.6f}",
            self.n_images,
        )


def robustness_sweep(
    codec: CodecParams,
    images: Sequence[np.ndarray],
    grid: Sequence[TransformSpec],
    seed: int = 0,
) -> List[RobustnessCell]:
    """Mean bit accuracy after each transformation of watermarked images

    Each image gets one random message (drawn in image order from `seed`),
    shared by every cell, so cells differ only in the transformation.

    Raises:
        DomainError: If there are no images.
    """
    if len(images) == 0:
        raise DomainError("robustness_sweep: no images")

    rng = np.random.default_rng(seed)
    watermarked = []
    for image in images:
        message = random_message(codec.message_bits, rng)
        watermarked.append((embed(image, message, codec).data, message))

    cells = []
    for spec in grid:
        accuracies = [
            bit_accuracy(predicted_bits(extract(apply_transform(w, spec), codec)), message)
            for w, message in watermarked
        ]
        cell = RobustnessCell(
            spec.kind, spec.parameter, float(np.mean(accuracies)), len(images)
        )
        logger.info("Robustness %s: %.4f", spec.label, cell.mean_bit_accuracy)
        cells.append(cell)
    return cells


def write_robustness_csv(path: str, cells: Sequence[RobustnessCell]):
    write_csv(path, ROBUSTNESS_HEADER, (cell.row() for cell in cells))
