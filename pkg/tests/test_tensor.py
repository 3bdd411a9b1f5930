import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bcastnet.tensor import (
    GradientError,
    NondeterministicError,
    ShapeError,
    Tensor,
    backward,
    concat_channels,
    current_tape,
    elementwise,
    grad_check,
    matmul,
    no_grad,
    precision,
    reset_tape,
    split_channels,
)

UNARY = ["neg", "exp", "tanh", "sigmoid", "square"]
BINARY = ["add", "sub", "mul", "div", "maximum"]

floats = st.floats(-3, 3, allow_nan=False, width=64)


def test_add_and_identity():
    assert Tensor([1, 2]).__add__(Tensor([3, 4])).data.tolist() == [4, 6]
    x = Tensor([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(elementwise("mul", x, Tensor(np.ones((2, 2)))).data, x.data)


def test_broadcast_add():
    out = Tensor([[1], [2]]) + Tensor([10, 20])
    assert out.data.tolist() == [[11, 21], [12, 22]]


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


def test_matmul_examples():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_ones_times_bt(f64, rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    backward(matmul(a, b).sum())
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_backward_examples():
    w = Tensor([3.0, -1.0, 0.5], requires_grad=True)
    backward(w.sum())
    assert w.grad.tolist() == [1, 1, 1]
    reset_tape()
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward((w * w).sum())
    assert w.grad.tolist() == [2, 4]


def test_backward_errors():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradientError, match="scalar"):
        backward(w * 2)
    reset_tape()
    with pytest.raises(GradientError, match="detached"):
        backward(Tensor([1.0, 2.0]).sum())
    reset_tape()
    loss = (w * w).sum()
    backward(loss)
    with pytest.raises(GradientError, match="already"):
        backward(loss)


def test_tape_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x.exp() * x).sum()
    nodes = current_tape().nodes
    seen = {id(x)}
    for node in nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.out))
    assert nodes[-1].out is y


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        (x * 2).sum()
    assert len(current_tape()) == 0


@pytest.mark.parametrize("op", UNARY + ["log", "sqrt", "relu"])
def test_unary_grad_check(op, f64, rng):
    data = rng.uniform(0.5, 2.0, size=(3, 4)) if op in ("log", "sqrt") else rng.normal(size=(3, 4))
    if op == "relu":
        data = np.where(np.abs(data) < 0.05, 0.3, data)
    x = Tensor(data, requires_grad=True)
    assert grad_check(lambda t: (elementwise(op, t) * Tensor(data + 1.0)).sum(), [x]) < 1e-6


@pytest.mark.parametrize("op", BINARY)
def test_binary_grad_check_with_broadcast(op, f64, rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 1.5, size=(1, 4)), requires_grad=True)
    if op == "maximum":
        b = Tensor(a.data[:1] + 0.3, requires_grad=True)
    assert grad_check(lambda x, y: elementwise(op, x, y).square().sum(), [a, b]) < 1e-6


@pytest.mark.parametrize("fn", [
    lambda t: t.sum(axis=1).square().sum(),
    lambda t: t.mean(axis=0, keepdims=True).square().sum(),
    lambda t: t.reshape(4, 3).square().sum(),
    lambda t: (t.transpose(1, 0) @ t).sum(),
    lambda t: t[1:, ::2].square().sum(),
])
def test_structural_grad_check(fn, f64, rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert grad_check(fn, [x]) < 1e-6


def test_grad_check_oracle_definitions(f64, rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    assert grad_check(lambda t: (t * t).sum(), [x]) < 1e-6
    assert grad_check(lambda t: (t * 0.0).sum() + 3.0, [x]) == 0.0


def test_grad_check_detects_nondeterminism(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    calls = iter(range(10**6))
    with pytest.raises(NondeterministicError):
        grad_check(lambda t: (t * float(next(calls))).sum(), [x])


def test_concat_examples():
    parts = [Tensor(np.zeros((1, 32, 2, 2))), Tensor(np.zeros((1, 128, 2, 2)))]
    assert concat_channels(parts).shape[1] == 160
    parts = [Tensor(np.zeros((1, 32, 2, 2)))] + [Tensor(np.zeros((1, 128, 2, 2)))] * 4
    assert concat_channels(parts).shape[1] == 544
    one = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    assert np.array_equal(concat_channels([one]).data, one.data)
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 3, 2)))])


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31))
def test_concat_split_round_trip_bit_exact(sizes, seed):
    r = np.random.default_rng(seed)
    parts = [Tensor(r.normal(size=(2, c, 3, 2)).astype(np.float32)) for c in sizes]
    back = split_channels(concat_channels(parts), sizes)
    for a, b in zip(parts, back):
        assert a.data.tobytes() == b.data.tobytes()


def test_concat_backward_splits_gradient(f64, rng):
    a = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
    weights = Tensor(rng.normal(size=(1, 5, 2, 2)))
    backward((concat_channels([a, b]) * weights).sum())
    assert np.array_equal(a.grad, weights.data[:, :2])
    assert np.array_equal(b.grad, weights.data[:, 2:])


@given(hnp.arrays(np.float64, (3, 4), elements=floats), hnp.arrays(np.float64, (1, 4), elements=floats))
def test_broadcast_leaves_operand_unchanged(a, row):
    x = Tensor(a, dtype=np.float64)
    before = x.data.copy()
    Tensor(row, dtype=np.float64) * x + Tensor(row, dtype=np.float64)
    assert np.array_equal(x.data, before)
    # masking the broadcast operand with the identity element returns the other exactly
    assert np.array_equal((x + Tensor(np.zeros_like(row), dtype=np.float64)).data, a)
    assert np.array_equal((x * Tensor(np.ones_like(row), dtype=np.float64)).data, a)
    # each broadcast row sees the same row operand
    out = (x + Tensor(row, dtype=np.float64)).data
    assert np.array_equal(out, a + np.repeat(row, 3, axis=0))


@given(st.integers(0, 2**31))
def test_same_graph_same_seed_is_bit_identical(seed):
    def run():
        r = np.random.default_rng(seed)
        w = Tensor(r.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(r.normal(size=(2, 4)))
        loss = (x @ w).tanh().square().sum()
        reset_tape()
        loss = (x @ w).tanh().square().sum()
        backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()
    assert run() == run()


def test_precision_switch():
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


@given(hnp.arrays(np.float64, (2, 3), elements=floats))
def test_grad_shape_matches_data(a):
    reset_tape()
    with precision("float64"):
        x = Tensor(a, requires_grad=True)
        backward((x.sigmoid() * x).sum())
    assert x.grad.shape == x.data.shape
    assert x.data.size == int(np.prod(x.shape))


def test_grad_check_extended_reference_restores_inputs(f64):
    x = Tensor(np.array([0.3, -1.2, 2.0]))
    err = grad_check(lambda t: (t * t * t).sum(), [x], reference_dtype=np.longdouble)
    assert err < 1e-9
    assert x.data.dtype == np.float64
    assert np.array_equal(x.data, [0.3, -1.2, 2.0])
