import itertools

import numpy as np
import pytest

from advmark import attack as attack_module
from advmark.attack import (
    MAX_ORACLE_BITS,
    AttackModels,
    PairRecord,
    adversarial_watermark_attack,
    attack_loss,
    brute_force_message_oracle,
    check_delta,
    face_similarity,
    message_objective,
    message_round,
    pair_rng,
    pgd_delta_round,
    project_delta,
    round_message,
)
from advmark.codec import embed, init_codec, train_codec
from advmark.config import AttackConfig, CodecConfig, EmbedderConfig
from advmark.dataset import evaluation_pairs, generate_toy_dataset, toy_images
from advmark.embedder import embed_face, train_embedder
from advmark.errors import ConstraintViolation, DomainError, NonFiniteLossError
from advmark.tensor import grad_check

from tests.conftest import TINY_BITS, TINY_SIZE


def small_config(**overrides) -> AttackConfig:
    values = dict(epsilon=4.0 / 255.0, steps=3, rounds=2, seed=0)
    values.update(overrides)
    return AttackConfig(**values)


class TestConfig:
    def test_step_sizes(self):
        config = AttackConfig(epsilon=4.0 / 255.0, steps=10)
        assert config.alpha == pytest.approx(1.5686e-3, abs=1e-7)
        assert config.beta == 0.1

    @pytest.mark.parametrize(
        "values",
        [{"epsilon": -1e-3}, {"steps": 0}, {"rounds": 0}, {"m_init": "zeros"}],
    )
    def test_invalid_settings(self, values):
        with pytest.raises(DomainError):
            AttackConfig(**values)


class TestLoss:
    def test_identity_codec_cancels(self, identity_codec, embedder, pair, rng):
        probe, reference = pair
        z_r = embed_face(reference, embedder).data
        for _ in range(3):
            delta = rng.uniform(-0.02, 0.02, size=probe.shape)
            message = rng.uniform(size=TINY_BITS)
            loss = attack_loss(delta, message, probe, z_r, identity_codec, embedder)
            assert loss.item() == 0.0

    def test_zero_delta_unrolls(self, codec, embedder, pair):
        probe, reference = pair
        z_r = embed_face(reference, embedder).data
        message = np.array([1.0, 0.0, 1.0, 1.0])
        loss = attack_loss(np.zeros_like(probe), message, probe, z_r, codec, embedder)
        watermarked = embed(probe, message, codec).data
        expected = -face_similarity(probe, z_r, embedder) + face_similarity(
            watermarked, z_r, embedder
        )
        assert abs(loss.item() - expected) < 1e-12

    def test_gradient_matches_finite_differences(self, codec, embedder, pair, rng):
        probe, reference = pair
        z_r = embed_face(reference, embedder).data

        def build(t):
            return attack_loss(t["delta"], t["message"], probe, z_r, codec, embedder)

        point = {
            "delta": rng.uniform(-0.01, 0.01, size=probe.shape),
            "message": rng.uniform(0.2, 0.8, size=TINY_BITS),
        }
        error = grad_check(build, point, max_coords=12)
        assert error is not None and error < 1e-4


class TestProjection:
    def test_projection_is_feasible(self, rng):
        probe = rng.uniform(size=(8, 8, 3))
        probe[0, 0] = [0.0, 1.0, 1.0 - 1e-17]
        epsilon = 3.0 / 255.0
        delta = project_delta(rng.normal(scale=0.1, size=probe.shape), probe, epsilon)
        assert np.abs(delta).max() <= epsilon
        assert (probe + delta).min() >= 0.0 and (probe + delta).max() <= 1.0
        check_delta(delta, probe, epsilon)

    def test_zero_radius(self, rng):
        probe = rng.uniform(size=(4, 4, 3))
        assert not project_delta(rng.normal(size=probe.shape), probe, 0.0).any()

    def test_violations_are_reported(self):
        probe = np.full((2, 2, 3), 0.5)
        with pytest.raises(ConstraintViolation):
            check_delta(np.full(probe.shape, 0.1), probe, 0.05)
        with pytest.raises(ConstraintViolation):
            check_delta(np.full(probe.shape, 0.6), probe, 1.0)


class TestRounds:
    def test_zero_epsilon_keeps_delta_zero(self, models, pair):
        probe, reference = pair
        z_r = embed_face(reference, models.embedder).data
        delta = pgd_delta_round(
            np.zeros_like(probe),
            np.full(TINY_BITS, 0.5),
            probe,
            z_r,
            models,
            small_config(epsilon=0.0),
        )
        assert not delta.any()

    def test_sign_step(self, models, pair, monkeypatch):
        probe = np.full_like(pair[0], 0.5)
        monkeypatch.setattr(
            attack_module,
            "_loss_and_grad",
            lambda delta, *args, **kwargs: (0.0, np.ones_like(delta)),
        )
        config = small_config(steps=1)
        delta = pgd_delta_round(
            np.zeros_like(probe), np.zeros(TINY_BITS), probe, None, models, config
        )
        # The box projection may move δ by an ulp
        assert np.allclose(delta, -config.alpha, rtol=0.0, atol=1e-15)
        assert np.abs(delta).max() <= config.epsilon

    def test_message_unchanged_under_identity_codec(self, identity_codec, embedder, pair):
        probe, reference = pair
        models = AttackModels(identity_codec, embedder)
        z_r = embed_face(reference, embedder).data
        start = np.array([0.1, 0.5, 0.9, 0.3])
        out = message_round(start, np.zeros_like(probe), probe, z_r, models, small_config())
        assert np.array_equal(out, start)

    def test_message_stays_in_box(self, models, pair, rng):
        probe, reference = pair
        z_r = embed_face(reference, models.embedder).data
        trace = []
        out = message_round(
            rng.uniform(size=TINY_BITS),
            np.zeros_like(probe),
            probe,
            z_r,
            models,
            small_config(steps=5),
            trace,
        )
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert len(trace) == 5


@pytest.mark.parametrize(
    "relaxed, expected",
    [
        ([0.49, 0.51, 0.5], [0.0, 1.0, 1.0]),
        ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ([1.0, 0.0, 1.0], [1.0, 0.0, 1.0]),
    ],
)
def test_round_message(relaxed, expected):
    assert round_message(np.array(relaxed)).tolist() == expected


def test_pair_streams_do_not_depend_on_order():
    first = pair_rng(7, 3).uniform(size=4)
    pair_rng(7, 1).uniform(size=10)
    assert np.array_equal(first, pair_rng(7, 3).uniform(size=4))
    assert not np.array_equal(first, pair_rng(7, 4).uniform(size=4))


class TestAttack:
    def test_result_is_feasible(self, codec, embedder, pair):
        config = small_config()
        result = adversarial_watermark_attack(*pair, codec, embedder, config)
        assert result.delta_linf <= config.epsilon
        assert set(np.unique(result.message)) <= {0.0, 1.0}
        assert result.relaxed_message.min() >= 0.0 and result.relaxed_message.max() <= 1.0
        assert len(result.round_losses) == config.rounds + 1
        assert len(result.loss_trace) == 2 * config.steps * config.rounds
        assert result.final_loss == result.s_post_adv - result.s_pre_adv
        assert result.match_pre == int(result.s_pre_adv >= result.tau)
        assert result.match_post == int(result.s_post_adv >= result.tau)

    def test_zero_epsilon(self, codec, embedder, pair):
        config = small_config(epsilon=0.0)
        result = adversarial_watermark_attack(*pair, codec, embedder, config)
        assert not result.delta.any()
        assert result.s_pre_adv == result.s_pre_clean

    def test_identity_codec_leaves_similarity(self, identity_codec, embedder):
        pairs = evaluation_pairs(3, seed=0, first_sample=2, size=TINY_SIZE)
        for index, pair in enumerate(pairs):
            result = adversarial_watermark_attack(
                *pair, identity_codec, embedder, small_config(), pair_index=index
            )
            assert result.s_post_adv == result.s_pre_adv
            assert all(value == 0.0 for value in result.loss_trace)

    def test_deterministic(self, codec, embedder, pair):
        config = small_config()
        first = adversarial_watermark_attack(*pair, codec, embedder, config, pair_index=2)
        second = adversarial_watermark_attack(*pair, codec, embedder, config, pair_index=2)
        assert first.delta.tobytes() == second.delta.tobytes()
        assert first.to_record() == second.to_record()

    def test_final_message_is_checked(self, codec, embedder, pair, monkeypatch):
        monkeypatch.setattr(attack_module, "round_message", lambda m: np.full_like(m, 0.5))
        with pytest.raises(ConstraintViolation):
            adversarial_watermark_attack(*pair, codec, embedder, small_config())

    def test_round_each_round_variant(self, codec, embedder, pair):
        result = adversarial_watermark_attack(
            *pair, codec, embedder, small_config(round_each_round=True)
        )
        assert set(np.unique(result.relaxed_message)) <= {0.0, 1.0}

    def test_non_finite_objective(self, codec, embedder, pair):
        embedder.params["fc.weight"] = np.full_like(embedder.params["fc.weight"], np.nan)
        with pytest.raises(NonFiniteLossError) as excinfo:
            adversarial_watermark_attack(*pair, codec, embedder, small_config())
        assert excinfo.value.trace

    def test_record_round_trip(self, codec, embedder, pair):
        result = adversarial_watermark_attack(*pair, codec, embedder, small_config())
        record = PairRecord.from_result(result)
        assert record.s_post_adv == result.s_post_adv
        assert np.array_equal(record.message, result.message)

        bad = result.to_record()
        bad["schema"] = "advmark.pair/99"
        with pytest.raises(DomainError):
            PairRecord.from_record(bad)


class TestOracle:
    def test_single_bit(self, embedder, pair):
        codec = init_codec(message_bits=1, width=4, blocks=1, strength=0.05, seed=1)
        probe, reference = pair
        z_r = embed_face(reference, embedder).data
        message, objective = brute_force_message_oracle(probe, z_r, codec, embedder)
        candidates = [
            message_objective(probe, np.array([b]), z_r, codec, embedder) for b in (0.0, 1.0)
        ]
        assert objective == min(candidates)
        assert message.tolist() == [float(np.argmin(candidates))]

    def test_ties_keep_first_message(self, identity_codec, embedder, pair):
        probe, reference = pair
        z_r = embed_face(reference, embedder).data
        message, _ = brute_force_message_oracle(probe, z_r, identity_codec, embedder)
        assert message.tolist() == [0.0] * TINY_BITS

    def test_exhaustive_minimum(self, codec, embedder, pair):
        probe, reference = pair
        z_r = embed_face(reference, embedder).data
        _, objective = brute_force_message_oracle(probe, z_r, codec, embedder)
        for bits in itertools.product((0.0, 1.0), repeat=TINY_BITS):
            assert objective <= message_objective(probe, np.array(bits), z_r, codec, embedder)

    def test_refuses_long_messages(self, embedder, pair):
        codec = init_codec(message_bits=MAX_ORACLE_BITS + 1, width=2, blocks=1)
        with pytest.raises(DomainError):
            brute_force_message_oracle(pair[0], np.ones(8), codec, embedder)


@pytest.mark.slow
def test_desk_scale_oracle_equivalence():
    codec_config = CodecConfig(message_bits=4)
    codec, _ = train_codec(toy_images(codec_config.train_images, 0), codec_config)
    embedder, _ = train_embedder(generate_toy_dataset(100, 4, seed=0), EmbedderConfig())

    config = AttackConfig()
    close = 0
    pairs = evaluation_pairs(50, seed=0, first_sample=4)
    for index, (probe, reference) in enumerate(pairs):
        result = adversarial_watermark_attack(
            probe, reference, codec, embedder, config, pair_index=index
        )
        perturbed = np.clip(probe + result.delta, 0.0, 1.0)
        z_r = embed_face(reference, embedder).data
        _, best = brute_force_message_oracle(perturbed, z_r, codec, embedder)
        found = message_objective(perturbed, result.message, z_r, codec, embedder)
        assert found >= best
        close += found - best <= 0.05
    assert close >= 0.8 * len(pairs)


@pytest.fixture(scope="module")
def desk_models():
    codec_config = CodecConfig()
    codec, _ = train_codec(toy_images(codec_config.train_images, 0), codec_config)
    embedder, _ = train_embedder(generate_toy_dataset(100, 4, seed=0), EmbedderConfig())
    return AttackModels(codec, embedder)


@pytest.mark.slow
def test_desk_scale_first_round_lowers_loss(desk_models):
    config = AttackConfig(epsilon=4.0 / 255.0, rounds=1)
    pairs = evaluation_pairs(100, seed=0, first_sample=4)
    codec, embedder = desk_models.codec, desk_models.embedder
    lowered = 0
    for index, (probe, reference) in enumerate(pairs):
        result = adversarial_watermark_attack(
            probe, reference, codec, embedder, config, pair_index=index
        )
        lowered += result.round_losses[1] < result.round_losses[0]
    assert lowered >= 0.9 * len(pairs)


@pytest.mark.slow
def test_desk_scale_message_steps_do_not_raise_loss(desk_models):
    config = AttackConfig(epsilon=4.0 / 255.0, steps=10)
    pairs = evaluation_pairs(100, seed=0, first_sample=4)
    codec, embedder = desk_models.codec, desk_models.embedder
    held = 0
    for index, (probe, reference) in enumerate(pairs):
        rng = pair_rng(config.seed, index)
        z_r = embed_face(reference, embedder).data
        noise = rng.uniform(-config.epsilon, config.epsilon, size=probe.shape)
        delta = project_delta(noise, probe, config.epsilon)
        start = rng.uniform(size=codec.message_bits)
        before = attack_loss(delta, start, probe, z_r, codec, embedder).item()
        message = message_round(start, delta, probe, z_r, desk_models, config)
        after = attack_loss(delta, message, probe, z_r, codec, embedder).item()
        held += after <= before
    assert held >= 0.95 * len(pairs)
