"""Adversarial watermarking attack.

Searches for a bounded input perturbation δ and a watermark message m such
that the perturbed probe still matches its reference while the watermarked
perturbed probe does not, by minimizing

    -s(h(clamp(I_p + δ)), z_r) + s(h(embed(clamp(I_p + δ), m)), z_r)

with alternating projected gradient descent: sign steps on δ inside the ℓ∞
ball and the pixel box, raw gradient steps on a continuous relaxation of m
inside [0, 1]^L, and a final rounding of m to bits.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from advmark import ops
from advmark.codec import CodecParams, embed
from advmark.config import AttackConfig, MatcherConfig
from advmark.embedder import EmbedderParams, embed_face, is_match
from advmark.errors import ConstraintViolation, DomainError, NonFiniteLossError, ShapeError
from advmark.functions import parse_bitstring, to_bitstring
from advmark.tensor import Tape, Tensor, as_tensor

logger = logging.getLogger(__name__)

PAIR_SCHEMA = "advmark.pair/1"

MAX_ORACLE_BITS = 12


@dataclass
class AttackModels(object):
    """The trained codec and embedder an attack runs against"""

    codec: CodecParams
    embedder: EmbedderParams

    @property
    def trained(self) -> bool:
        return self.codec.trained and self.embedder.trained


def attack_loss(
    delta,
    relaxed_message,
    probe: np.ndarray,
    z_r,
    codec: CodecParams,
    embedder: EmbedderParams,
) -> Tensor:
    """-s(z_p', z_r) + s(z_w', z_r) for the perturbed probe and its watermarked version

    Differentiable w.r.t. `delta` and `relaxed_message`.
    """
    delta = as_tensor(delta)
    if delta.shape != probe.shape:
        raise ShapeError("attack_loss", delta.shape, probe.shape)
    perturbed = ops.clamp(ops.add(probe, delta), 0.0, 1.0)
    watermarked = embed(perturbed, relaxed_message, codec)
    s_pre = ops.cosine_similarity(embed_face(perturbed, embedder), z_r)
    s_post = ops.cosine_similarity(embed_face(watermarked, embedder), z_r)
    return ops.add(ops.scalar_mul(s_pre, -1.0), s_post)


def _loss_and_grad(
    delta: np.ndarray,
    relaxed_message: np.ndarray,
    probe: np.ndarray,
    z_r: np.ndarray,
    models: AttackModels,
    wrt: str,
) -> Tuple[float, np.ndarray]:
    delta_t = Tensor(delta, requires_grad=wrt == "delta", name="delta")
    message_t = Tensor(relaxed_message, requires_grad=wrt == "message", name="message")
    with Tape() as tape:
        loss = attack_loss(delta_t, message_t, probe, z_r, models.codec, models.embedder)
    target = delta_t if wrt == "delta" else message_t
    grad = tape.backward(loss, wrt=[target])[target]
    return loss.item(), grad


def _check_finite(value: float, where: str, trace: List[float]):
    if not np.isfinite(value):
        raise NonFiniteLossError(f"Attack objective became non-finite {where}", trace=trace)


def project_delta(delta: np.ndarray, probe: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto {‖δ‖∞ ≤ ε} ∩ {probe + δ ∈ [0, 1]}

    The result satisfies both constraints exactly in floating point.
    """
    if epsilon == 0:
        return np.zeros_like(probe)
    delta = np.clip(delta, -epsilon, epsilon)
    delta = np.clip(probe + delta, 0.0, 1.0) - probe
    # Rounding can leave probe + δ (or |δ|) one ulp outside; step toward zero
    while True:
        perturbed = probe + delta
        bad = (perturbed > 1.0) | (perturbed < 0.0) | (np.abs(delta) > epsilon)
        if not bad.any():
            return delta
        delta[bad] = np.nextafter(delta[bad], 0.0)


def check_delta(delta: np.ndarray, probe: np.ndarray, epsilon: float, where: str = ""):
    """Raises ConstraintViolation unless ‖δ‖∞ ≤ ε and probe + δ ∈ [0, 1]"""
    if np.abs(delta).max(initial=0.0) > epsilon:
        raise ConstraintViolation(
            f"‖δ‖∞ = {np.abs(delta).max():.6g} exceeds ε = {epsilon:.6g} "
            f"{where}".rstrip()
        )
    perturbed = probe + delta
    if perturbed.min() < 0.0 or perturbed.max() > 1.0:
        raise ConstraintViolation(f"probe + δ left [0, 1] {where}".rstrip())


def check_relaxed_message(message: np.ndarray, where: str = ""):
    if not np.all(np.isfinite(message)) or message.min() < 0.0 or message.max() > 1.0:
        raise ConstraintViolation(f"relaxed message left [0, 1]^L {where}".rstrip())


def check_binary_message(bits: np.ndarray, length: int, where: str = ""):
    """Raises ConstraintViolation unless `bits` is a length-`length` vector over {0, 1}"""
    bits = np.asarray(bits)
    if bits.shape != (length,) or not np.isin(bits, (0.0, 1.0)).all():
        raise ConstraintViolation(f"message is not in {{0, 1}}^{length} {where}".rstrip())


def pgd_delta_round(
    delta: np.ndarray,
    relaxed_message: np.ndarray,
    probe: np.ndarray,
    z_r: np.ndarray,
    models: AttackModels,
    config: AttackConfig,
    trace: Optional[List[float]] = None,
) -> np.ndarray:
    """T sign-gradient steps on δ with the message held fixed

    Each step is δ ← Π(δ − α·sign(∇_δ loss)) with α = ε/T, where Π projects
    onto the ℓ∞ ball of radius ε and the pixel box.

    Raises:
        DomainError: If ε < 0.
        NonFiniteLossError: If the objective becomes non-finite.
        ConstraintViolation: If an iterate leaves the feasible set (when
            `config.check_constraints` is set).
    """
    if config.epsilon < 0:
        raise DomainError(f"epsilon must be >= 0, got {config.epsilon}")
    if trace is None:
        trace = []
    if config.epsilon == 0:
        return np.zeros_like(probe)

    delta = delta.copy()
    for step in range(config.steps):
        value, grad = _loss_and_grad(delta, relaxed_message, probe, z_r, models, "delta")
        trace.append(value)
        _check_finite(value, f"at δ step {step + 1}", trace)
        delta = project_delta(delta - config.alpha * np.sign(grad), probe, config.epsilon)
        if config.check_constraints:
            check_delta(delta, probe, config.epsilon, f"after δ step {step + 1}")
        logger.debug("δ step %d: loss %.6f", step + 1, value)
    return delta


def message_round(
    relaxed_message: np.ndarray,
    delta: np.ndarray,
    probe: np.ndarray,
    z_r: np.ndarray,
    models: AttackModels,
    config: AttackConfig,
    trace: Optional[List[float]] = None,
) -> np.ndarray:
    """T projected gradient steps on the relaxed message with δ held fixed

    Each step is m ← clip(m − β·∇_m loss, 0, 1) with β = 1/T.
    """
    if trace is None:
        trace = []
    message = relaxed_message.copy()
    for step in range(config.steps):
        value, grad = _loss_and_grad(delta, message, probe, z_r, models, "message")
        trace.append(value)
        _check_finite(value, f"at message step {step + 1}", trace)
        message = np.clip(message - config.beta * grad, 0.0, 1.0)
        if config.check_constraints:
            check_relaxed_message(message, f"after message step {step + 1}")
        logger.debug("message step %d: loss %.6f", step + 1, value)
    return message


def round_message(relaxed_message: np.ndarray) -> np.ndarray:
    """Round each entry to a bit; 0.5 rounds up"""
    return (np.asarray(relaxed_message) >= 0.5).astype(np.float64)


def initial_message(length: int, config: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if config.m_init == "half":
        return np.full(length, 0.5)
    return rng.uniform(0.0, 1.0, size=length)


def pair_rng(seed: int, pair_index: int) -> np.random.Generator:
    """The random stream of one pair, independent of execution order"""
    return np.random.default_rng(seed ^ pair_index)


def face_similarity(image, z_r, embedder: EmbedderParams) -> float:
    return ops.cosine_similarity(embed_face(image, embedder), z_r).item()


def message_objective(
    perturbed_probe: np.ndarray,
    message: np.ndarray,
    z_r,
    codec: CodecParams,
    embedder: EmbedderParams,
) -> float:
    """s(h(embed(perturbed_probe, m)), z_r), the message-dependent part of the attack loss"""
    return face_similarity(embed(perturbed_probe, message, codec).data, z_r, embedder)


@dataclass
class AttackResult(object):
    """Outcome of attacking one probe/reference pair"""

    pair_index: int
    epsilon: float
    delta: np.ndarray
    message: np.ndarray
    relaxed_message: np.ndarray
    s_pre_clean: float
    s_pre_adv: float
    s_post_adv: float
    s_watermark_only: float
    s_post_random: float
    match_pre: int
    match_post: int
    match_post_random: int
    tau: float
    loss_trace: List[float] = field(default_factory=list)
    round_losses: List[float] = field(default_factory=list)
    final_loss: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def delta_linf(self) -> float:
        return float(np.abs(self.delta).max(initial=0.0))

    def to_record(self) -> Dict[str, Any]:
        """JSON-serializable record (δ itself is stored separately)"""
        return {
            "schema": PAIR_SCHEMA,
            "pair_index": self.pair_index,
            "epsilon": self.epsilon,
            "epsilon_255": round(self.epsilon * 255.0, 6),
            "tau": self.tau,
            "message": to_bitstring(self.message),
            "s_pre_clean": self.s_pre_clean,
            "s_pre_adv": self.s_pre_adv,
            "s_post_adv": self.s_post_adv,
            "s_watermark_only": self.s_watermark_only,
            "s_post_random": self.s_post_random,
            "match_pre": self.match_pre,
            "match_post": self.match_post,
            "match_post_random": self.match_post_random,
            "delta_linf": self.delta_linf,
            "loss_trace": self.loss_trace,
            "round_losses": self.round_losses,
            "final_loss": self.final_loss,
            "config": self.config,
        }


@dataclass
class PairRecord(object):
    """An AttackResult as read back from the per-pair log (no δ or relaxed m)"""

    pair_index: int
    epsilon: float
    tau: float
    message: np.ndarray
    s_pre_clean: float
    s_pre_adv: float
    s_post_adv: float
    s_watermark_only: float
    s_post_random: float
    match_pre: int
    match_post: int
    match_post_random: int

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "PairRecord":
        if record.get("schema") != PAIR_SCHEMA:
            raise DomainError(
                f"Unsupported pair record schema '{record.get('schema')}', "
                f"expected {PAIR_SCHEMA}"
            )
        return cls(
            pair_index=int(record["pair_index"]),
            epsilon=float(record["epsilon"]),
            tau=float(record["tau"]),
            message=parse_bitstring(record["message"]),
            s_pre_clean=float(record["s_pre_clean"]),
            s_pre_adv=float(record["s_pre_adv"]),
            s_post_adv=float(record["s_post_adv"]),
            s_watermark_only=float(record["s_watermark_only"]),
            s_post_random=float(record["s_post_random"]),
            match_pre=int(record["match_pre"]),
            match_post=int(record["match_post"]),
            match_post_random=int(record["match_post_random"]),
        )

    @classmethod
    def from_result(cls, result: AttackResult) -> "PairRecord":
        return cls.from_record(result.to_record())


def adversarial_watermark_attack(
    probe: np.ndarray,
    reference: np.ndarray,
    codec: CodecParams,
    embedder: EmbedderParams,
    config: AttackConfig,
    matcher: Optional[MatcherConfig] = None,
    pair_index: int = 0,
) -> AttackResult:
    """Alternate δ and message rounds, then round the message to bits

    The pair's random stream (message initialization and the random-message
    baseline) is `default_rng(config.seed ^ pair_index)`.

    Raises:
        NonFiniteLossError: If the objective becomes non-finite; carries the trace.
        ConstraintViolation: If an iterate leaves its feasible set.
    """
    matcher = matcher or MatcherConfig()
    models = AttackModels(codec, embedder)
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != np.shape(reference):
        raise ShapeError("adversarial_watermark_attack", probe.shape, np.shape(reference))

    z_r = embed_face(reference, embedder).data
    rng = pair_rng(config.seed, pair_index)
    message = initial_message(codec.message_bits, config, rng)
    random_bits = rng.integers(0, 2, size=codec.message_bits).astype(np.float64)
    delta = np.zeros_like(probe)

    trace: List[float] = []
    round_losses = [attack_loss(delta, message, probe, z_r, codec, embedder).item()]
    _check_finite(round_losses[0], "at the starting point", round_losses)
    for k in range(config.rounds):
        delta = pgd_delta_round(delta, message, probe, z_r, models, config, trace)
        message = message_round(message, delta, probe, z_r, models, config, trace)
        if config.round_each_round:
            message = round_message(message)
        value = attack_loss(delta, message, probe, z_r, codec, embedder).item()
        _check_finite(value, f"after round {k + 1}", trace + [value])
        round_losses.append(value)
        logger.debug("pair %d round %d: loss %.6f", pair_index, k + 1, value)

    relaxed = message
    bits = round_message(relaxed)
    if config.check_constraints:
        check_delta(delta, probe, config.epsilon, "in the final perturbation")
        check_binary_message(bits, codec.message_bits, "after rounding")

    perturbed = np.clip(probe + delta, 0.0, 1.0)
    watermarked = embed(perturbed, bits, codec).data
    s_pre_clean = face_similarity(probe, z_r, embedder)
    s_pre_adv = face_similarity(perturbed, z_r, embedder)
    s_post_adv = face_similarity(watermarked, z_r, embedder)
    s_watermark_only = message_objective(probe, bits, z_r, codec, embedder)
    s_post_random = message_objective(probe, random_bits, z_r, codec, embedder)

    return AttackResult(
        pair_index=pair_index,
        epsilon=config.epsilon,
        delta=delta,
        message=bits,
        relaxed_message=relaxed,
        s_pre_clean=s_pre_clean,
        s_pre_adv=s_pre_adv,
        s_post_adv=s_post_adv,
        s_watermark_only=s_watermark_only,
        s_post_random=s_post_random,
        match_pre=is_match(s_pre_adv, matcher.tau),
        match_post=is_match(s_post_adv, matcher.tau),
        match_post_random=is_match(s_post_random, matcher.tau),
        tau=matcher.tau,
        loss_trace=trace,
        round_losses=round_losses,
        final_loss=s_post_adv - s_pre_adv,
        config=config.echo(),
    )


def brute_force_message_oracle(
    perturbed_probe: np.ndarray,
    z_r,
    codec: CodecParams,
    embedder: EmbedderParams,
    max_bits: int = MAX_ORACLE_BITS,
) -> Tuple[np.ndarray, float]:
    """Exhaustive minimizer of s(h(embed(perturbed_probe, m)), z_r) over all 2^L messages

    Messages are enumerated in lexicographic order (all zeros first) and the
    first minimizer wins ties.

    Raises:
        DomainError: If L exceeds `max_bits`.
    """
    length = codec.message_bits
    if length > max_bits:
        raise DomainError(
            f"Message length {length} is too large to enumerate (at most {max_bits} bits)"
        )
    best_message, best_objective = None, np.inf
    for bits in itertools.product((0.0, 1.0), repeat=length):
        message = np.array(bits)
        objective = message_objective(perturbed_probe, message, z_r, codec, embedder)
        if objective < best_objective:
            best_message, best_objective = message, objective
    return best_message, float(best_objective)
