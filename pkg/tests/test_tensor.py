import math
import threading

import numpy as np
import pytest

from advmark import ops
from advmark.codec import encode_batch, init_codec
from advmark.errors import DomainError, ShapeError
from advmark.tensor import Tape, Tensor, active_tape, grad_check


def gradient(build, value):
    x = Tensor(value, requires_grad=True)
    with Tape() as tape:
        loss = build(x)
    return tape.backward(loss, wrt=[x])[x]


# Forward values


def test_relu():
    assert ops.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]


def test_conv2d_with_scalar_kernel():
    image = np.ones((1, 1, 3, 3))
    kernel = np.full((1, 1, 1, 1), 2.0)
    out = ops.conv2d(image, kernel, stride=1, padding=0)
    assert out.shape == (1, 1, 3, 3)
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_stride_and_padding_shape():
    out = ops.conv2d(np.ones((2, 3, 16, 16)), np.ones((5, 3, 3, 3)), stride=2, padding=1)
    assert out.shape == (2, 5, 8, 8)


def test_mean():
    assert ops.mean([1.0, 2.0, 3.0, 6.0]).item() == 3.0


@pytest.mark.parametrize(
    "a, b, expected",
    [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 0], [-2, 0], -1.0)],
)
def test_cosine_similarity(a, b, expected):
    assert ops.cosine_similarity(np.array(a, float), np.array(b, float)).item() == expected


def test_cosine_similarity_is_scale_free(rng):
    a, b = rng.normal(size=8), rng.normal(size=8)
    base = ops.cosine_similarity(a, b).item()
    for alpha, beta in [(0.01, 7.0), (3.0, 3.0), (250.0, 0.5)]:
        scaled = ops.cosine_similarity(alpha * a, beta * b).item()
        assert abs(scaled - base) < 1e-12


def test_cosine_similarity_rejects_zero_norm():
    with pytest.raises(DomainError):
        ops.cosine_similarity(np.zeros(3), np.ones(3))


def test_cosine_similarity_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        ops.cosine_similarity(np.ones(3), np.ones(4))


@pytest.mark.parametrize(
    "x, y, expected",
    [([0.5, 0.25], [0.5, 0.25], 0.0), ([0, 0], [1, 1], 1.0), ([0, 2], [0, 0], 2.0)],
)
def test_mse_loss(x, y, expected):
    assert ops.mse_loss(np.array(x, float), np.array(y, float)).item() == expected


def test_bce_loss_values():
    assert ops.bce_loss([0.0], [1.0]).item() == pytest.approx(math.log(2.0))
    assert ops.bce_loss([20.0], [1.0]).item() < 1e-8
    assert ops.bce_loss([0.0, 0.0], [0.0, 1.0]).item() == pytest.approx(math.log(2.0))


def test_bce_loss_rejects_soft_targets():
    with pytest.raises(DomainError):
        ops.bce_loss([0.0], [0.5])


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as excinfo:
        ops.add(np.ones(2), np.ones(3))
    assert excinfo.value.msg == "add: incompatible shapes (2,) and (3,)"


def test_forward_op_registry():
    assert ops.forward_op("relu", [-1.0, 3.0]).data.tolist() == [0.0, 3.0]
    with pytest.raises(DomainError):
        ops.forward_op("softplus", [1.0])


def test_image_batch_layout_round_trip(rng):
    image = rng.uniform(size=(5, 7, 3))
    batch = ops.image_to_batch(image)
    assert batch.shape == (1, 3, 5, 7)
    assert np.array_equal(ops.batch_to_image(batch).data, image)


# Gradients


def test_mean_gradient():
    grad = gradient(ops.mean, np.array([1.0, 2.0, 3.0, 4.0]))
    assert grad.tolist() == [0.25] * 4


def test_mse_gradient():
    grad = gradient(lambda x: ops.mse_loss(x, np.zeros(1)), np.array([3.0]))
    assert grad.tolist() == [6.0]


def test_gradient_accumulates_over_reuse():
    grad = gradient(lambda x: ops.sum(ops.mul(x, x)), np.array([1.0, -2.0]))
    assert grad.tolist() == [2.0, -4.0]


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x)
    grads = tape.backward(loss, wrt=[x, y])
    assert grads[y].tolist() == [0.0]


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ops.relu(x)
    with pytest.raises(DomainError):
        tape.backward(out)


def test_tape_stack_is_restored():
    assert active_tape() is None
    with Tape() as outer:
        with Tape() as inner:
            assert active_tape() is inner
        assert active_tape() is outer
    assert active_tape() is None


def test_tapes_are_per_thread():
    results = {}

    def work(scale):
        x = Tensor(np.full(3, scale), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        results[scale] = tape.backward(loss, wrt=[x])[x]

    threads = [threading.Thread(target=work, args=(s,)) for s in (1.0, 2.0, 3.0)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for scale, grad in results.items():
        assert np.array_equal(grad, np.full(3, 2.0 * scale))


class TestGradCheck:
    """Analytic gradients against central finite differences"""

    def test_dense_composite(self, rng):
        def build(t):
            h = ops.tanh(ops.linear(t["x"], t["w"], t["b"]))
            return ops.add(
                ops.mean(ops.mul(h, ops.sigmoid(h))),
                ops.sum(ops.exp(ops.scalar_mul(t["b"], 0.5))),
            )

        point = {
            "x": rng.normal(size=(4, 5)),
            "w": rng.normal(size=(3, 5)),
            "b": rng.normal(size=3),
        }
        error = grad_check(build, point)
        assert error is not None and error < 1e-4

    def test_conv_relu_pool(self, rng):
        def build(t):
            y = ops.relu(ops.conv2d(t["x"], t["w"], t["b"], stride=2, padding=1))
            return ops.mean(ops.global_avg_pool(y))

        point = {
            "x": rng.normal(size=(2, 3, 6, 6)),
            "w": rng.normal(size=(4, 3, 3, 3)),
            "b": rng.normal(size=4),
        }
        error = grad_check(build, point, max_coords=20)
        assert error is not None and error < 1e-4

    def test_layout_and_elementwise_ops(self, rng):
        def build(t):
            joined = ops.concat([t["a"], t["b"]], axis=1)
            z = ops.transpose(ops.reshape(joined, (3, 4)))
            shifted = ops.add(ops.clamp(z, -0.9, 0.9), 1.0)
            ratio = ops.div(ops.log(shifted), ops.add(ops.exp(z), 1.0))
            return ops.sum(ops.sub(ratio, ops.matmul(z, t["c"])))

        point = {
            "a": rng.uniform(-0.5, 0.5, size=(2, 3)),
            "b": rng.uniform(-0.5, 0.5, size=(2, 3)),
            "c": rng.normal(size=(3, 1)),
        }
        error = grad_check(build, point)
        assert error is not None and error < 1e-4

    def test_losses(self, rng):
        labels = np.array([0, 2, 1])
        targets = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        direction = rng.normal(size=(3, 3))

        def build(t):
            z = t["z"]
            return ops.add(
                ops.add(ops.cross_entropy(z, labels), ops.bce_loss(z, targets)),
                ops.sum(ops.mul(ops.normalize(z, axis=1), direction)),
            )

        error = grad_check(build, {"z": rng.normal(size=(3, 3))})
        assert error is not None and error < 1e-4

    def test_cosine_similarity(self, rng):
        def build(t):
            return ops.cosine_similarity(t["a"], t["b"])

        error = grad_check(build, {"a": rng.normal(size=8), "b": rng.normal(size=8)})
        assert error is not None and error < 1e-4

    def test_encoder_reconstruction(self, rng):
        codec = init_codec(message_bits=2, width=3, blocks=1, strength=0.05, seed=2)
        message = Tensor(np.array([[1.0, 0.0]]))

        def build(t):
            images = ops.image_to_batch(t["image"])
            watermarked = encode_batch(images, message, codec, t)
            return ops.mse_loss(watermarked, images)

        point = dict(codec.params.items())
        point["image"] = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        error = grad_check(build, point, max_coords=6)
        assert error is not None and error < 1e-4

    def test_relu_kink_is_skipped(self):
        def build(t):
            return ops.sum(ops.relu(t["x"]))

        assert grad_check(build, {"x": np.zeros(3)}) is None

    def test_non_scalar_builder(self):
        with pytest.raises(DomainError):
            grad_check(lambda t: ops.relu(t["x"]), {"x": np.ones(2)})


def normal(*shape):
    return lambda rng: rng.normal(size=shape)


def positive(*shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


BINARY_TARGETS = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 0.0])

# op name -> (op applied to the named leaves, sampler per leaf)
OP_CASES = {
    "conv2d": (
        lambda t: ops.conv2d(t["x"], t["w"], t["b"], stride=2, padding=1),
        {"x": normal(1, 2, 5, 5), "w": normal(3, 2, 3, 3), "b": normal(3)},
    ),
    "linear": (
        lambda t: ops.linear(t["x"], t["w"], t["b"]),
        {"x": normal(2, 4), "w": normal(3, 4), "b": normal(3)},
    ),
    "matmul": (lambda t: ops.matmul(t["a"], t["b"]), {"a": normal(2, 3), "b": normal(3, 4)}),
    "relu": (lambda t: ops.relu(t["x"]), {"x": normal(6)}),
    "sigmoid": (lambda t: ops.sigmoid(t["x"]), {"x": normal(6)}),
    "tanh": (lambda t: ops.tanh(t["x"]), {"x": normal(6)}),
    "exp": (lambda t: ops.exp(t["x"]), {"x": normal(6)}),
    "log": (lambda t: ops.log(t["x"]), {"x": positive(6)}),
    "add": (lambda t: ops.add(t["a"], t["b"]), {"a": normal(2, 3), "b": normal(3)}),
    "sub": (lambda t: ops.sub(t["a"], t["b"]), {"a": normal(2, 3), "b": normal(3)}),
    "mul": (lambda t: ops.mul(t["a"], t["b"]), {"a": normal(2, 3), "b": normal(3)}),
    "div": (lambda t: ops.div(t["a"], t["b"]), {"a": normal(2, 3), "b": positive(3)}),
    "scalar_mul": (lambda t: ops.scalar_mul(t["x"], -1.7), {"x": normal(6)}),
    "clamp": (lambda t: ops.clamp(t["x"], -0.5, 0.5), {"x": normal(6)}),
    "concat": (
        lambda t: ops.concat([t["a"], t["b"]], axis=1),
        {"a": normal(2, 2), "b": normal(2, 3)},
    ),
    "mean": (lambda t: ops.mean(t["x"], axis=0), {"x": normal(3, 4)}),
    "sum": (lambda t: ops.sum(t["x"], axis=1), {"x": normal(3, 4)}),
    "global_avg_pool": (lambda t: ops.global_avg_pool(t["x"]), {"x": normal(2, 3, 4, 4)}),
    "l2_norm": (lambda t: ops.l2_norm(t["x"], axis=1), {"x": normal(3, 4)}),
    "reshape": (lambda t: ops.reshape(t["x"], (4, 3)), {"x": normal(3, 4)}),
    "transpose": (lambda t: ops.transpose(t["x"]), {"x": normal(3, 4)}),
    "normalize": (lambda t: ops.normalize(t["x"], axis=1), {"x": normal(3, 4)}),
    "cosine_similarity": (
        lambda t: ops.cosine_similarity(t["a"], t["b"]),
        {"a": normal(8), "b": normal(8)},
    ),
    "mse_loss": (lambda t: ops.mse_loss(t["x"], t["y"]), {"x": normal(6), "y": normal(6)}),
    "bce_loss": (lambda t: ops.bce_loss(t["x"], BINARY_TARGETS), {"x": normal(6)}),
    "cross_entropy": (lambda t: ops.cross_entropy(t["x"], [0, 2, 1]), {"x": normal(3, 3)}),
}


def test_every_registered_op_has_a_gradient_case():
    assert set(ops.OPS) <= set(OP_CASES)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_at_seeded_points(name):
    apply_op, samplers = OP_CASES[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        point = {leaf: sample(rng) for leaf, sample in samplers.items()}
        direction = rng.normal(size=apply_op(point).shape)

        def build(t):
            return ops.sum(ops.mul(apply_op(t), direction))

        error = grad_check(build, point)
        assert error is not None and error < 1e-4, f"{name} at seed {seed}"
