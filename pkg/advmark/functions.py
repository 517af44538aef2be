import csv
import hashlib
import json
import logging
import os
from typing import Any, Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from markdown import markdown
from PIL import Image as PILImage
from skimage.metrics import peak_signal_noise_ratio

from advmark.errors import CommandError, CommandSyntaxError, DomainError, ShapeError

logger = logging.getLogger(__name__)


def command_syntax(syntax: str):
    """Defines the syntax for a subcommand, and prints it if it is violated

    This function is intended to be used as a decorator, allowing
    subcommand-handler methods to define the syntax that the user is supposed to
    use for the command arguments.

    The command function, passed to `outer`, can signal that this syntax has been
    violated by raising a CommandSyntaxError exception. This will then catch that
    exception, print the correct syntax for that command and return exit code 2.

    Args:
        syntax: The syntax for the command that the user should follow
    """

    def outer(command_func: Callable):
        def inner(self, *args, **kwargs):
            try:
                # Attempt to execute the command function
                return command_func(self, *args, **kwargs)
            except CommandSyntaxError as e:
                # Grab the current command's name from the `self` object passed
                # to the command
                text = f"Invalid syntax. Please use `advmark {self.command} {syntax}`."
                if e.msg:
                    text += f"\n{e.msg}"
                self.print(text)
                return 2

        inner.__doc__ = command_func.__doc__
        inner.syntax = syntax
        return inner

    return outer


def check_image(image: np.ndarray, op: str, channels: Optional[int] = None):
    """Validate an H×W×C image with values in [0, 1]"""
    if image.ndim != 3 or (channels is not None and image.shape[2] != channels):
        raise ShapeError(op, image.shape, ("H", "W", channels or "C"))
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise DomainError(f"{op}: image values must lie in [0, 1]")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def save_png(path: str, image: np.ndarray):
    """Write an H×W×3 (or H×W) image in [0, 1] as an 8-bit PNG"""
    pixels = to_uint8(image)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    try:
        PILImage.fromarray(pixels).save(path, format="PNG")
    except OSError as e:
        raise CommandError(f"Unable to write image '{path}': {e}")


def load_png(path: str, size: Optional[int] = None) -> np.ndarray:
    """Read an image as H×W×3 floats in [0, 1], optionally resized bilinearly"""
    try:
        with PILImage.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), resample=PILImage.BILINEAR)
            return from_uint8(np.asarray(img))
    except OSError as e:
        raise CommandError(f"Unable to read image '{path}': {e}")


def psnr(reference: np.ndarray, distorted: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB (inf for identical images)"""
    if reference.shape != distorted.shape:
        raise ShapeError("psnr", reference.shape, distorted.shape)
    if np.array_equal(reference, distorted):
        return float("inf")
    return float(peak_signal_noise_ratio(reference, distorted, data_range=peak))


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise CommandError(f"Unable to write '{path}': {e}")


def write_json(path: str, payload: Dict[str, Any]):
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise CommandError(f"Unable to write '{path}': {e}")


def write_markdown(path: str, text: str, html: bool = True):
    """Write `text` to `path` and, if asked, an HTML rendering next to it"""
    try:
        with open(path, "w") as f:
            f.write(text)
        if html:
            html_path = os.path.splitext(path)[0] + ".html"
            with open(html_path, "w") as f:
                f.write(markdown(text, extensions=["tables"]))
    except OSError as e:
        raise CommandError(f"Unable to write '{path}': {e}")


def parse_bitstring(bits: str, length: Optional[int] = None) -> np.ndarray:
    """'0110...' to a float array of bits

    Raises:
        CommandError: If the string contains anything but 0/1, or has the wrong length.
    """
    bits = bits.strip()
    if not bits or any(c not in "01" for c in bits):
        raise CommandError(f"'{bits}' is not a string of 0s and 1s")
    if length is not None and len(bits) != length:
        raise CommandError(f"Message must have {length} bits, got {len(bits)}")
    return np.array([float(c) for c in bits])


def to_bitstring(bits: np.ndarray) -> str:
    return "".join("1" if b >= 0.5 else "0" for b in np.asarray(bits).reshape(-1))
