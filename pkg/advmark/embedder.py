"""Face-embedding network, cosine similarity and thresholded 1:1 matching"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import humanize
import numpy as np

from advmark import ops
from advmark.config import EmbedderConfig, MatcherConfig
from advmark.dataset import IdentityDataset
from advmark.errors import DomainError, NonFiniteLossError, ShapeError
from advmark.nn import SGD, ModelParams, check_image_batch, conv_block, init_conv, init_linear
from advmark.tensor import Tape, Tensor, as_tensor

logger = logging.getLogger(__name__)

MIN_EMBEDDING_DIM = 8


@dataclass
class EmbedderParams(object):
    """Weights of the embedding CNN

    The classification head used during training is not part of these
    parameters.
    """

    params: ModelParams
    embedding_dim: int = 64
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    image_size: int = 112
    num_identities: int = 0
    scale: float = 16.0
    channels: int = 3
    history: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.embedding_dim < MIN_EMBEDDING_DIM:
            raise DomainError(
                f"embedding_dim must be >= {MIN_EMBEDDING_DIM}, got {self.embedding_dim}"
            )

    @property
    def trained(self) -> bool:
        return self.params.trained

    def hyperparameters(self) -> Dict[str, object]:
        return {
            "embedding_dim": self.embedding_dim,
            "widths": list(self.widths),
            "image_size": self.image_size,
            "num_identities": self.num_identities,
            "scale": self.scale,
            "channels": self.channels,
        }


def init_embedder(
    embedding_dim: int = 64,
    widths=(16, 32, 64, 64),
    image_size: int = 112,
    seed: int = 0,
    channels: int = 3,
    scale: float = 16.0,
) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    in_channels = channels
    for b, width in enumerate(widths):
        init_conv(params, f"conv{b}", in_channels, width, rng)
        in_channels = width
    init_linear(params, "fc", in_channels, embedding_dim, rng)
    return EmbedderParams(
        params=params,
        embedding_dim=embedding_dim,
        widths=tuple(widths),
        image_size=image_size,
        scale=scale,
        channels=channels,
    )


def embed_batch(images: Tensor, embedder: EmbedderParams, leaves) -> Tensor:
    """N×D embeddings of an N×C×H×W batch"""
    check_image_batch(images, embedder.channels, "embed_face")
    x = images
    for b in range(len(embedder.widths)):
        x = conv_block(x, leaves, f"conv{b}", stride=2)
    return ops.linear(ops.global_avg_pool(x), leaves["fc.weight"], leaves["fc.bias"])


def embed_face(image, embedder: EmbedderParams) -> Tensor:
    """Embedding (length D) of one H×W×C image of the configured size

    Differentiable w.r.t. `image`.

    Raises:
        ShapeError: If the image is not image_size×image_size×C.
    """
    image = as_tensor(image)
    expected = (embedder.image_size, embedder.image_size, embedder.channels)
    if image.shape != expected:
        raise ShapeError("embed_face", image.shape, expected)
    batch = ops.image_to_batch(image)
    z = embed_batch(batch, embedder, embedder.params.leaves())
    return ops.reshape(z, (embedder.embedding_dim,))


def similarity(z_p, z_r) -> float:
    """Cosine similarity of two embeddings

    Raises:
        DomainError: If either embedding has zero norm.
    """
    return ops.cosine_similarity(z_p, z_r).item()


def is_match(score: float, tau: float) -> int:
    """1 iff score >= tau"""
    return 1 if score >= tau else 0


def match(z_p, z_r, config: Optional[MatcherConfig] = None) -> int:
    config = config or MatcherConfig()
    return is_match(similarity(z_p, z_r), config.tau)


def head_logits(z: Tensor, head_weight: Tensor, scale: float) -> Tensor:
    """Normalized-softmax logits: scale · cos(z_i, w_k)"""
    cosines = ops.matmul(
        ops.normalize(z, axis=1), ops.transpose(ops.normalize(head_weight, axis=1))
    )
    return ops.scalar_mul(cosines, scale)


def train_embedder(
    dataset: IdentityDataset,
    config: EmbedderConfig,
    embedder: Optional[EmbedderParams] = None,
) -> Tuple[EmbedderParams, List[Dict[str, float]]]:
    """Train the embedding CNN as an identity classifier

    A normalized-softmax head (cosine logits × scale, cross-entropy) is trained
    alongside the network and discarded at the end.

    Returns:
        The trained embedder and a per-epoch log of mean loss and accuracy.

    Raises:
        DomainError: If the dataset is empty or has fewer than two identities.
        NonFiniteLossError: If the loss becomes NaN or infinite.
    """
    if len(dataset) == 0 or len(np.unique(dataset.labels)) < 2:
        raise DomainError("train_embedder: need a nonempty dataset with >= 2 identities")
    if dataset.images.shape[1] != config.image_size:
        raise ShapeError(
            "train_embedder", dataset.images.shape[1:], (config.image_size, config.image_size)
        )

    if embedder is None:
        embedder = init_embedder(
            embedding_dim=config.embedding_dim,
            widths=config.widths,
            image_size=config.image_size,
            seed=config.seed,
            channels=dataset.images.shape[3],
            scale=config.scale,
        )
    embedder.num_identities = dataset.num_identities

    rng = np.random.default_rng(config.seed)
    params = embedder.params.copy()
    init_linear(
        params, "head", embedder.embedding_dim, dataset.num_identities, rng, bias=False
    )
    optimizer = SGD(params, lr=config.lr, momentum=0.9)

    batches = np.transpose(dataset.images, (0, 3, 1, 2))
    history: List[Dict[str, float]] = []
    trace: List[float] = []
    for epoch in range(1, config.epochs + 1):
        start = time.monotonic()
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        correct = 0
        steps = 0
        for first in range(0, len(order), config.batch):
            indices = order[first : first + config.batch]
            labels = dataset.labels[indices]
            leaves = params.leaves(requires_grad=True)
            with Tape() as tape:
                z = embed_batch(Tensor(batches[indices]), embedder, leaves)
                logits = head_logits(z, leaves["head.weight"], embedder.scale)
                loss = ops.cross_entropy(logits, labels)
            value = loss.item()
            trace.append(value)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"Embedder loss became non-finite at epoch {epoch}, step {steps + 1}",
                    trace=trace,
                )
            grads = tape.backward(loss, wrt=leaves.values())
            optimizer.step({name: grads[leaf] for name, leaf in leaves.items()})

            loss_sum += value
            correct += int(np.count_nonzero(logits.data.argmax(axis=1) == labels))
            steps += 1
            logger.debug("embedder epoch %d step %d: loss %.6f", epoch, steps, value)

        entry = {
            "epoch": epoch,
            "loss": loss_sum / steps,
            "train_accuracy": correct / len(dataset),
        }
        history.append(entry)
        logger.info(
            "Embedder epoch %d/%d: loss %.4f, train accuracy %.3f in %s",
            epoch,
            config.epochs,
            entry["loss"],
            entry["train_accuracy"],
            humanize.naturaldelta(time.monotonic() - start),
        )

    if not params.all_finite():
        raise NonFiniteLossError("Embedder parameters became non-finite", trace=trace)

    # Drop the classification head
    for name in list(embedder.params):
        embedder.params[name] = params[name]
    embedder.params.trained = True
    embedder.history = history
    return embedder, history


def pair_similarities(
    pairs, embedder: EmbedderParams
) -> Tuple[np.ndarray, np.ndarray]:
    """Genuine (probe_i, reference_i) and impostor (probe_i, reference_{i+1}) similarities"""
    probes = [embed_face(p, embedder).data for p, _ in pairs]
    references = [embed_face(r, embedder).data for _, r in pairs]
    genuine = np.array([similarity(p, r) for p, r in zip(probes, references)])
    impostor = np.array(
        [
            similarity(probes[i], references[(i + 1) % len(references)])
            for i in range(len(probes))
        ]
    )
    return genuine, impostor


def matching_accuracy(pairs, embedder: EmbedderParams, config: MatcherConfig) -> float:
    """Fraction of genuine pairs matched at threshold τ"""
    genuine, _ = pair_similarities(pairs, embedder)
    return float(np.mean([is_match(s, config.tau) for s in genuine]))
