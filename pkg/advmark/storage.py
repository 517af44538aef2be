"""On-disk checkpoints.

A checkpoint is a directory holding ``manifest.json`` (format version, kind,
tensor names/shapes/files, dtype, hyperparameters and a config echo) and one
raw little-endian float64 file per tensor, named after the tensor.
"""
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import humanize
import numpy as np

from advmark.codec import CodecParams
from advmark.embedder import EmbedderParams
from advmark.errors import CheckpointError, CommandError
from advmark.functions import write_json
from advmark.nn import ModelParams

latest_format_version = 1

MANIFEST = "manifest.json"
DTYPE = "<f8"

logger = logging.getLogger(__name__)


class Checkpoint(object):
    def __init__(self, path: str):
        """A checkpoint directory

        Args:
            path: Directory the checkpoint is read from or written to
        """
        self.path = path

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.path, MANIFEST)

    def exists(self) -> bool:
        return os.path.isfile(self.manifest_path)

    def write(
        self,
        params: ModelParams,
        kind: str,
        hyperparameters: Optional[Dict[str, Any]] = None,
        config: Optional[Dict[str, Any]] = None,
        extra: Optional[Dict[str, Any]] = None,
    ):
        """Write every tensor of `params` and the manifest describing them

        Raises:
            CheckpointError: If the directory or a file cannot be written.
        """
        try:
            os.makedirs(self.path, exist_ok=True)
        except OSError as e:
            raise CheckpointError(f"Unable to create checkpoint directory '{self.path}': {e}")

        tensors = []
        total = 0
        for name, value in params.items():
            data = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
            self._write_bytes(name, data)
            total += len(data)
            tensors.append({"name": name, "shape": list(value.shape), "file": name})

        manifest = {
            "format_version": latest_format_version,
            "kind": kind,
            "dtype": DTYPE,
            "trained": params.trained,
            "tensors": tensors,
            "hyperparameters": hyperparameters or {},
            "config": config or {},
        }
        if extra:
            manifest.update(extra)
        try:
            write_json(self.manifest_path, manifest)
        except CommandError as e:
            raise CheckpointError(e.msg)

        logger.info(
            "Wrote %s checkpoint with %d tensors (%s) to %s",
            kind,
            len(tensors),
            humanize.naturalsize(total, binary=True),
            self.path,
        )

    def read_manifest(self) -> Dict[str, Any]:
        if not self.exists():
            raise CheckpointError(f"No checkpoint found at '{self.path}' (missing {MANIFEST})")
        try:
            with open(self.manifest_path) as f:
                manifest = json.load(f)
        except (OSError, ValueError) as e:
            raise CheckpointError(f"Unable to read '{self.manifest_path}': {e}")

        version = manifest.get("format_version")
        if not isinstance(version, int):
            raise CheckpointError(f"'{self.manifest_path}' has no format_version")
        if version > latest_format_version:
            raise CheckpointError(
                f"Checkpoint format version {version} is newer than the supported "
                f"version {latest_format_version}. Upgrade advmark to read it"
            )
        if manifest.get("dtype", DTYPE) != DTYPE:
            raise CheckpointError(f"Unsupported tensor dtype '{manifest.get('dtype')}'")
        return manifest

    def read(self, kind: Optional[str] = None) -> Tuple[ModelParams, Dict[str, Any]]:
        """Load all tensors listed in the manifest

        Args:
            kind: If given, the checkpoint must have been written with this kind.

        Raises:
            CheckpointError: On a missing/unreadable manifest, a kind or size
                mismatch, or an unsupported format version.
        """
        manifest = self.read_manifest()
        if kind is not None and manifest.get("kind") != kind:
            raise CheckpointError(
                f"'{self.path}' holds a {manifest.get('kind')} checkpoint, expected {kind}"
            )

        params = ModelParams(trained=bool(manifest.get("trained", False)))
        for entry in manifest.get("tensors", []):
            shape = tuple(entry["shape"])
            data = self._read_bytes(entry["file"])
            expected = int(np.prod(shape, dtype=np.int64)) * 8
            if len(data) != expected:
                raise CheckpointError(
                    f"Tensor '{entry['name']}' has {len(data)} bytes, expected {expected} "
                    f"for shape {shape}"
                )
            params[entry["name"]] = np.frombuffer(data, dtype=DTYPE).reshape(shape).copy()
        return params, manifest

    def _write_bytes(self, filename: str, data: bytes):
        path = os.path.join(self.path, filename)
        try:
            with open(path, "wb") as f:
                f.write(data)
        except OSError as e:
            raise CheckpointError(f"Unable to write tensor file '{path}': {e}")

    def _read_bytes(self, filename: str) -> bytes:
        path = os.path.join(self.path, filename)
        try:
            with open(path, "rb") as f:
                return f.read()
        except OSError as e:
            raise CheckpointError(f"Unable to read tensor file '{path}': {e}")


def save_codec(codec: CodecParams, path: str, config: Optional[Dict[str, Any]] = None):
    Checkpoint(path).write(
        codec.params,
        kind="codec",
        hyperparameters=codec.hyperparameters(),
        config=config,
        extra={"history": codec.history},
    )


def load_codec(path: str) -> CodecParams:
    params, manifest = Checkpoint(path).read(kind="codec")
    h = manifest.get("hyperparameters", {})
    try:
        return CodecParams(
            params=params,
            message_bits=int(h["message_bits"]),
            width=int(h["width"]),
            blocks=int(h["blocks"]),
            strength=float(h["strength"]),
            lam=float(h["lambda"]),
            channels=int(h.get("channels", 3)),
            history=manifest.get("history", []),
        )
    except KeyError as e:
        raise CheckpointError(f"Codec checkpoint '{path}' lacks hyperparameter {e}")


def save_embedder(
    embedder: EmbedderParams, path: str, config: Optional[Dict[str, Any]] = None
):
    Checkpoint(path).write(
        embedder.params,
        kind="embedder",
        hyperparameters=embedder.hyperparameters(),
        config=config,
        extra={"history": embedder.history},
    )


def load_embedder(path: str) -> EmbedderParams:
    params, manifest = Checkpoint(path).read(kind="embedder")
    h = manifest.get("hyperparameters", {})
    try:
        return EmbedderParams(
            params=params,
            embedding_dim=int(h["embedding_dim"]),
            widths=tuple(int(w) for w in h["widths"]),
            image_size=int(h["image_size"]),
            num_identities=int(h.get("num_identities", 0)),
            scale=float(h.get("scale", 16.0)),
            channels=int(h.get("channels", 3)),
            history=manifest.get("history", []),
        )
    except KeyError as e:
        raise CheckpointError(f"Embedder checkpoint '{path}' lacks hyperparameter {e}")


def save_tensor(array: np.ndarray, path: str):
    """Write one array as raw little-endian float64 (no header)"""
    try:
        with open(path, "wb") as f:
            f.write(np.ascontiguousarray(array, dtype=DTYPE).tobytes())
    except OSError as e:
        raise CheckpointError(f"Unable to write tensor file '{path}': {e}")


def load_tensor(path: str, shape: Tuple[int, ...]) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Unable to read tensor file '{path}': {e}")
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(data) != expected:
        raise CheckpointError(f"'{path}' has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=DTYPE).reshape(shape).copy()
