from __future__ import annotations

import math

import numpy as np
import pytest

from robust_bci.errors import DimensionError, TapeUsageError, ValidationError
from robust_bci.numerics import ops
from robust_bci.numerics.tensor import GradTape, Tensor, current_tape, grad

TARGETS = np.array([0, 2, 1])
RUNNING = (np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.5, 2.0]))

# name -> (primitive over Tensors, input shapes)
PRIMITIVES = {
    "matmul": (ops.matmul, [(3, 4), (4, 2)]),
    "add_broadcast": (ops.add, [(3, 4), (4,)]),
    "multiply": (ops.multiply, [(3, 4), (3, 4)]),
    "sum": (ops.sum, [(3, 4)]),
    "reshape": (lambda x: ops.reshape(x, (4, 3)), [(2, 6)]),
    "affine": (ops.affine, [(3, 5), (2, 5), (2,)]),
    "conv1d_odd": (ops.conv1d, [(2, 3, 10), (2, 3)]),
    "conv1d_even": (ops.conv1d, [(2, 3, 10), (2, 4)]),
    "depthwise_conv1d": (ops.depthwise_conv1d, [(2, 3, 9), (3, 4)]),
    "spatial_filter": (ops.spatial_filter, [(2, 2, 3, 6), (2, 2, 3)]),
    "pointwise": (ops.pointwise, [(2, 3, 5), (4, 3)]),
    "batch_norm_batch": (lambda x, g, b: ops.batch_norm(x, g, b).output, [(4, 3, 5), (3,), (3,)]),
    "batch_norm_running": (lambda x, g, b: ops.batch_norm(x, g, b, running=RUNNING).output, [(4, 3, 5), (3,), (3,)]),
    "elu": (ops.elu, [(3, 4)]),
    "relu": (ops.relu, [(3, 4)]),
    "avg_pool": (lambda x: ops.avg_pool(x, 4), [(2, 3, 8)]),
    "dropout": (lambda x: ops.dropout(x, 0.3, np.random.default_rng(7)), [(3, 4)]),
    "softmax": (ops.softmax, [(3, 4)]),
    "softmax_cross_entropy": (lambda z: ops.softmax_cross_entropy(z, TARGETS), [(3, 4)]),
    "mean_of": (lambda a, b: ops.mean_of([a, b]), [(2, 3), (2, 3)]),
    "nll_from_probs": (lambda z: ops.nll_from_probs(ops.softmax(z), TARGETS), [(3, 4)]),
}


def _inputs(shapes, seed):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(shape) for shape in shapes]


def _tape_gradients(op, arrays, probe, dtype):
    tensors = [Tensor(a, dtype=dtype) for a in arrays]
    tape = GradTape()
    with tape:
        loss = ops.sum(ops.multiply(op(*tensors), Tensor(probe, dtype=np.float64)))
    return [g.data for g in tape.gradient(loss, tensors)]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name, seed, finite_difference, relative_error):
    op, shapes = PRIMITIVES[name]
    arrays = _inputs(shapes, seed)
    probe = np.random.default_rng(1000 + seed).standard_normal(op(*[Tensor(a, dtype=np.float64) for a in arrays]).shape)

    exact = _tape_gradients(op, arrays, probe, np.float64)
    single = _tape_gradients(op, arrays, probe, np.float32)
    for i in range(len(arrays)):
        def loss(v, i=i):
            args = [Tensor(v if j == i else arrays[j], dtype=np.float64) for j in range(len(arrays))]
            return float(np.sum(op(*args).data * probe))

        numeric = finite_difference(loss, arrays[i])
        assert relative_error(exact[i], numeric) < 1e-5
        assert relative_error(single[i], numeric) < 1e-3


def test_two_layer_network_gradient(finite_difference, relative_error):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 3))
    params = [rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal((1, 4))]  # 20 parameters
    zero_bias = Tensor(np.zeros(1), dtype=np.float64)

    def net(w1, b1, w2):
        hidden = ops.elu(ops.affine(Tensor(x, dtype=np.float64), w1, b1))
        out = ops.affine(hidden, w2, zero_bias)
        return ops.sum(ops.multiply(out, out))

    tensors = [Tensor(p, dtype=np.float64) for p in params]
    tape = GradTape()
    with tape:
        loss = net(*tensors)
    analytic = tape.gradient(loss, tensors)

    for i, p in enumerate(params):
        def f(v, i=i):
            args = [Tensor(v if j == i else params[j], dtype=np.float64) for j in range(3)]
            return net(*args).item()

        assert relative_error(analytic[i].data, finite_difference(f, p)) < 1e-5


def test_matmul_examples():
    m = np.arange(9, dtype=np.float32).reshape(3, 3)
    assert np.array_equal(ops.matmul(np.eye(3, dtype=np.float32), m).data, m)
    assert ops.matmul(np.array([[2.0]]), np.array([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 3)).astype(np.float32)
    b = rng.standard_normal((3, 5)).astype(np.float32)
    expected = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                expected[i, j] += float(a[i, k]) * float(b[k, j])
    np.testing.assert_allclose(ops.matmul(a, b).data, expected, atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_grad_of_sum_is_all_ones():
    x = Tensor(np.arange(5.0))
    tape = GradTape()
    with tape:
        loss = ops.sum(x)
    assert tape.gradient(loss, [x])[0].data.tolist() == [1.0] * 5


def test_grad_of_squared_norm():
    x = Tensor([1.0, 2.0])
    tape = GradTape()
    with tape:
        loss = ops.sum(ops.multiply(x, x))
    assert grad(tape, loss, [x])[x].data.tolist() == [2.0, 4.0]


def test_unused_tensor_on_tape_gets_zero_gradient():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    tape = GradTape()
    with tape:
        loss = ops.sum(a)
        ops.sum(b)
    assert tape.gradient(loss, [b])[0].data.tolist() == [0.0, 0.0]


def test_tape_records_in_forward_order():
    x = Tensor([[1.0, -1.0]])
    tape = GradTape()
    with tape:
        ops.sum(ops.relu(ops.matmul(x, np.eye(2, dtype=np.float32))))
    assert [r.op for r in tape.records] == ["matmul", "relu", "sum"]


def test_gradient_of_tensor_not_on_tape():
    x, stranger = Tensor([1.0]), Tensor([2.0])
    tape = GradTape()
    with tape:
        loss = ops.sum(x)
    with pytest.raises(TapeUsageError):
        tape.gradient(loss, [stranger])


def test_tape_is_single_use():
    x = Tensor([1.0, 2.0])
    tape = GradTape()
    with tape:
        loss = ops.sum(x)
    tape.gradient(loss, [x])
    with pytest.raises(TapeUsageError):
        tape.gradient(loss, [x])
    with pytest.raises(TapeUsageError):
        with tape:
            pass


def test_non_scalar_loss_is_rejected():
    x = Tensor([1.0, 2.0])
    tape = GradTape()
    with tape:
        y = ops.multiply(x, x)
    with pytest.raises(TapeUsageError):
        tape.gradient(y, [x])


def test_tape_is_only_active_inside_context():
    tape = GradTape()
    assert current_tape() is None
    with tape:
        assert current_tape() is tape
    assert current_tape() is None


def test_tensor_validation():
    with pytest.raises(ValidationError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValidationError):
        Tensor([1, 2], dtype=np.int32)
    t = Tensor([[1.0, 2.0]])
    assert t.shape == (1, 2) and t.dtype == np.float32
    assert not t.data.flags.writeable
    copy = t.numpy()
    copy[0, 0] = 5.0
    assert t.data[0, 0] == 1.0


def test_avg_pool_requires_divisible_length():
    with pytest.raises(DimensionError):
        ops.avg_pool(np.ones((1, 1, 10), dtype=np.float32), 4)


def test_dropout_rate_bounds():
    x = Tensor(np.ones((2, 3)))
    assert ops.dropout(x, 0.0, np.random.default_rng(0)) is x
    with pytest.raises(ValidationError):
        ops.dropout(x, 1.0, np.random.default_rng(0))


def test_uniform_logits_cross_entropy_is_log_k():
    loss = ops.softmax_cross_entropy(np.zeros((3, 4), dtype=np.float32), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_rejects_out_of_range_targets():
    with pytest.raises(ValidationError):
        ops.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_nll_from_probs_floors_zero_probability():
    loss = ops.nll_from_probs(np.array([[1.0, 0.0]]), np.array([1]))
    assert loss.item() == pytest.approx(-math.log(ops.PROB_FLOOR), rel=1e-6)


def test_mean_of_needs_inputs():
    with pytest.raises(ValidationError):
        ops.mean_of([])
    with pytest.raises(DimensionError):
        ops.mean_of([np.ones(2), np.ones(3)])
