"""Watermark encoder/decoder.

The encoder adds a bounded residual to the cover image,
``clamp(I + s * tanh(net(I, m)), 0, 1)``, where the message is broadcast to
L constant feature planes and concatenated with the image channels. The
decoder is a stack of conv blocks followed by global average pooling and a
linear layer to L logits, so it decodes images of any size >= 8×8.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import humanize
import numpy as np

from advmark import ops
from advmark.config import CodecConfig
from advmark.errors import DomainError, NonFiniteLossError, ShapeError
from advmark.functions import psnr
from advmark.nn import SGD, ModelParams, check_image_batch, conv_block, init_conv, init_linear
from advmark.tensor import Tape, Tensor, as_tensor

logger = logging.getLogger(__name__)

MIN_DECODE_SIDE = 8

MessageLike = Union[np.ndarray, Tensor]


@dataclass
class CodecParams(object):
    """Encoder and decoder weights plus the codec hyperparameters

    Tensors live in one `ModelParams` under the ``encoder.`` and ``decoder.``
    prefixes.
    """

    params: ModelParams
    message_bits: int
    width: int = 32
    blocks: int = 4
    strength: float = 0.02
    lam: float = 1.0
    channels: int = 3
    history: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.message_bits < 1:
            raise DomainError(f"message length must be >= 1, got {self.message_bits}")
        if self.strength <= 0:
            raise DomainError(f"residual strength must be > 0, got {self.strength}")
        if self.lam < 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")

    @property
    def trained(self) -> bool:
        return self.params.trained

    @property
    def decoder_params(self) -> ModelParams:
        return self.params.prefixed("decoder")

    @property
    def final_encoder_layer(self) -> str:
        return "encoder.out"

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "message_bits": self.message_bits,
            "width": self.width,
            "blocks": self.blocks,
            "strength": self.strength,
            "lambda": self.lam,
            "channels": self.channels,
        }

    def copy(self) -> "CodecParams":
        return CodecParams(
            params=self.params.copy(),
            message_bits=self.message_bits,
            width=self.width,
            blocks=self.blocks,
            strength=self.strength,
            lam=self.lam,
            channels=self.channels,
            history=list(self.history),
        )


def init_codec(
    message_bits: int = 48,
    width: int = 32,
    blocks: int = 4,
    strength: float = 0.02,
    lam: float = 1.0,
    seed: int = 0,
    channels: int = 3,
) -> CodecParams:
    """Randomly initialized codec, deterministic in `seed`"""
    if blocks < 1 or width < 1:
        raise DomainError(f"width and blocks must be >= 1, got {width}, {blocks}")

    rng = np.random.default_rng(seed)
    params = ModelParams()
    in_channels = channels + message_bits
    for b in range(blocks):
        init_conv(params, f"encoder.conv{b}", in_channels, width, rng)
        in_channels = width
    init_conv(params, "encoder.out", width, channels, rng, gain=0.5)

    in_channels = channels
    for b in range(blocks):
        init_conv(params, f"decoder.conv{b}", in_channels, width, rng)
        in_channels = width
    init_linear(params, "decoder.fc", width, message_bits, rng)

    return CodecParams(
        params=params,
        message_bits=message_bits,
        width=width,
        blocks=blocks,
        strength=strength,
        lam=lam,
        channels=channels,
    )


def codec_from_config(config: CodecConfig, channels: int = 3) -> CodecParams:
    return init_codec(
        message_bits=config.message_bits,
        width=config.width,
        blocks=config.blocks,
        strength=config.strength,
        lam=config.lam,
        seed=config.seed,
        channels=channels,
    )


def with_identity_encoder(codec: CodecParams) -> CodecParams:
    """A copy of `codec` whose final encoder conv is zero, making embed the identity"""
    identity = codec.copy()
    name = identity.final_encoder_layer
    identity.params[f"{name}.weight"] = np.zeros_like(identity.params[f"{name}.weight"])
    identity.params[f"{name}.bias"] = np.zeros_like(identity.params[f"{name}.bias"])
    return identity


# Messages


def check_message(bits: np.ndarray, length: int, relaxed: bool = False):
    """Validate a binary message, or a relaxed one with values in [0, 1]

    Raises:
        ShapeError: If the message does not have `length` entries.
        DomainError: If a value lies outside {0, 1} (or [0, 1] when relaxed).
    """
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.shape[0] != length:
        raise ShapeError("message", bits.shape, (length,))
    if relaxed:
        if not np.all(np.isfinite(bits)) or bits.min() < 0.0 or bits.max() > 1.0:
            raise DomainError("relaxed message values must lie in [0, 1]")
    elif not np.all((bits == 0.0) | (bits == 1.0)):
        raise DomainError("message bits must be exactly 0 or 1")


def random_message(length: int, seed: Union[int, np.random.Generator]) -> np.ndarray:
    """`length` i.i.d. fair bits as a float array

    `seed` may be an int or an existing generator whose stream is advanced.
    """
    if length < 1:
        raise DomainError(f"message length must be >= 1, got {length}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.integers(0, 2, size=length).astype(np.float64)


def predicted_bits(logits: MessageLike) -> np.ndarray:
    """Threshold decoder logits at sigmoid(logit) >= 0.5"""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (logits >= 0.0).astype(np.float64)


def bit_accuracy(predicted: np.ndarray, true: np.ndarray) -> float:
    """Fraction of positions at which two messages agree"""
    predicted = np.asarray(predicted).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if predicted.shape != true.shape:
        raise ShapeError("bit_accuracy", predicted.shape, true.shape)
    if predicted.size == 0:
        raise DomainError("bit_accuracy: empty messages")
    return float(np.count_nonzero(predicted == true)) / predicted.size


# Forward passes on N×C×H×W batches


def encode_batch(images: Tensor, messages: Tensor, codec: CodecParams, leaves) -> Tensor:
    """Watermark an N×C×H×W batch with an N×L batch of (relaxed) messages"""
    check_image_batch(images, codec.channels, "embed")
    n, _, height, width = images.shape
    if messages.shape != (n, codec.message_bits):
        raise ShapeError("embed", messages.shape, (n, codec.message_bits))

    planes = ops.mul(
        ops.reshape(messages, (n, codec.message_bits, 1, 1)),
        np.ones((1, 1, height, width)),
    )
    x = ops.concat([images, planes], axis=1)
    for b in range(codec.blocks):
        x = conv_block(x, leaves, f"encoder.conv{b}")
    residual = ops.conv2d(
        x, leaves["encoder.out.weight"], leaves["encoder.out.bias"], padding=1
    )
    watermarked = ops.add(images, ops.scalar_mul(ops.tanh(residual), codec.strength))
    return ops.clamp(watermarked, 0.0, 1.0)


def decode_batch(images: Tensor, codec: CodecParams, leaves) -> Tensor:
    """N×L logits for an N×C×H×W batch"""
    check_image_batch(images, codec.channels, "extract")
    if images.shape[2] < MIN_DECODE_SIDE or images.shape[3] < MIN_DECODE_SIDE:
        raise ShapeError("extract", images.shape, (None, codec.channels, ">=8", ">=8"))
    x = images
    for b in range(codec.blocks):
        x = conv_block(x, leaves, f"decoder.conv{b}")
    pooled = ops.global_avg_pool(x)
    return ops.linear(pooled, leaves["decoder.fc.weight"], leaves["decoder.fc.bias"])


def _check_image_values(image: Tensor, op: str):
    data = image.data
    if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
        raise DomainError(f"{op}: image values must lie in [0, 1]")


def embed(image, message, codec: CodecParams) -> Tensor:
    """Watermark one H×W×C image with a binary or relaxed message

    Differentiable w.r.t. both `image` and `message` when they are tensors
    requiring gradients. The result is an H×W×C tensor.

    Raises:
        ShapeError: If the message does not have `codec.message_bits` entries.
        DomainError: If image or message values lie outside [0, 1].
    """
    image, message = as_tensor(image), as_tensor(message)
    if image.ndim != 3 or image.shape[2] != codec.channels:
        raise ShapeError("embed", image.shape, ("H", "W", codec.channels))
    _check_image_values(image, "embed")
    check_message(message.data, codec.message_bits, relaxed=True)

    leaves = codec.params.leaves()
    batch = ops.image_to_batch(image)
    messages = ops.reshape(message, (1, codec.message_bits))
    return ops.batch_to_image(encode_batch(batch, messages, codec, leaves))


def extract(image, codec: CodecParams) -> Tensor:
    """Decoder logits (length L) for one H×W×C image of any size >= 8×8

    Raises:
        ShapeError: If the image is smaller than 8×8 or has the wrong channel count.
        DomainError: If image values lie outside [0, 1].
    """
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[2] != codec.channels:
        raise ShapeError("extract", image.shape, ("H", "W", codec.channels))
    _check_image_values(image, "extract")

    logits = decode_batch(ops.image_to_batch(image), codec, codec.params.leaves())
    return ops.reshape(logits, (codec.message_bits,))


def codec_loss(
    images: Tensor, messages: np.ndarray, codec: CodecParams, leaves
) -> Tuple[Tensor, Tensor, Tensor]:
    """Reconstruction MSE + λ·bitwise BCE for one batch

    Returns:
        (total, reconstruction, decode) scalar tensors.
    """
    watermarked = encode_batch(images, Tensor(messages), codec, leaves)
    logits = decode_batch(watermarked, codec, leaves)
    reconstruction = ops.mse_loss(watermarked, images)
    decode = ops.bce_loss(logits, messages)
    total = ops.add(reconstruction, ops.scalar_mul(decode, codec.lam))
    return total, reconstruction, decode


def train_codec(
    images: np.ndarray,
    config: CodecConfig,
    codec: Optional[CodecParams] = None,
) -> Tuple[CodecParams, List[Dict[str, float]]]:
    """Train encoder and decoder on N×H×W×C images

    Every sample gets a fresh uniformly random message at every step.

    Args:
        images: Training images with values in [0, 1].
        config: Hyperparameters (epochs, batch, lr, seed, λ ...).
        codec: Parameters to start from. A fresh `init_codec` by default.

    Returns:
        The trained codec and a per-epoch log of mean losses.

    Raises:
        DomainError: If there are no training images.
        NonFiniteLossError: If the objective becomes NaN or infinite.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise DomainError("train_codec: dataset must be a nonempty N×H×W×C array")
    if codec is None:
        codec = codec_from_config(config, channels=images.shape[3])

    rng = np.random.default_rng(config.seed)
    optimizer = SGD(codec.params, lr=config.lr, momentum=0.9)
    batches = np.transpose(images, (0, 3, 1, 2))
    history: List[Dict[str, float]] = []
    trace: List[float] = []

    for epoch in range(1, config.epochs + 1):
        start = time.monotonic()
        order = rng.permutation(len(images))
        totals = {"loss": 0.0, "reconstruction": 0.0, "decode": 0.0}
        steps = 0
        for first in range(0, len(order), config.batch):
            indices = order[first : first + config.batch]
            messages = rng.integers(0, 2, size=(len(indices), codec.message_bits)).astype(
                np.float64
            )
            leaves = codec.params.leaves(requires_grad=True)
            with Tape() as tape:
                total, reconstruction, decode = codec_loss(
                    Tensor(batches[indices]), messages, codec, leaves
                )
            value = total.item()
            trace.append(value)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"Codec loss became non-finite at epoch {epoch}, step {steps + 1}",
                    trace=trace,
                )

            grads = tape.backward(total, wrt=leaves.values())
            optimizer.step({name: grads[leaf] for name, leaf in leaves.items()})

            totals["loss"] += value
            totals["reconstruction"] += reconstruction.item()
            totals["decode"] += decode.item()
            steps += 1
            logger.debug("codec epoch %d step %d: loss %.6f", epoch, steps, value)

        entry = {k: v / steps for k, v in totals.items()}
        entry["epoch"] = epoch
        history.append(entry)
        logger.info(
            "Codec epoch %d/%d: loss %.5f (mse %.2e, bce %.4f) in %s",
            epoch,
            config.epochs,
            entry["loss"],
            entry["reconstruction"],
            entry["decode"],
            humanize.naturaldelta(time.monotonic() - start),
        )

    if not codec.params.all_finite():
        raise NonFiniteLossError("Codec parameters became non-finite", trace=trace)

    codec.params.trained = True
    codec.history = history
    return codec, history


@dataclass
class CodecEvaluation(object):
    bit_accuracy: float
    psnr: float
    n_images: int

    def asdict(self) -> Dict[str, float]:
        return asdict(self)


def evaluate_codec(codec: CodecParams, images: np.ndarray, seed: int = 0) -> CodecEvaluation:
    """Mean bit accuracy and mean PSNR over images, each with a fresh random message"""
    if len(images) == 0:
        raise DomainError("evaluate_codec: no images")
    rng = np.random.default_rng(seed)
    accuracies, psnrs = [], []
    for image in images:
        message = random_message(codec.message_bits, rng)
        watermarked = embed(image, message, codec).data
        accuracies.append(bit_accuracy(predicted_bits(extract(watermarked, codec)), message))
        psnrs.append(psnr(image, watermarked))
    finite = [p for p in psnrs if np.isfinite(p)]
    return CodecEvaluation(
        bit_accuracy=float(np.mean(accuracies)),
        psnr=float(np.mean(finite)) if finite else float("inf"),
        n_images=len(images),
    )
