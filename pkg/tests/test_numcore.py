import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import weighted_sum
from dualsep import numcore as nc
from dualsep.numcore import NumericalError, Rng, ShapeError, Tensor, apply, grad_check


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_relu_definition():
    assert apply("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_reverse_time_flips_frames_only():
    x = Tensor([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    assert nc.reverse_time(x).data.tolist() == [[3.0, 30.0], [2.0, 20.0], [1.0, 10.0]]


def test_matmul_against_triple_loop(gen):
    a, b = gen.standard_normal((2, 3)), gen.standard_normal((3, 2))
    np.testing.assert_allclose(apply("matmul", Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_output_is_an_error():
    with pytest.raises(NumericalError):
        nc.log10(Tensor([0.0]))
    with pytest.raises(NumericalError):
        nc.div(Tensor([1.0]), Tensor([0.0]))


def test_unknown_op():
    with pytest.raises(ValueError):
        apply("conv", Tensor([1.0]))


def test_backward_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nc.sum_(x).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nc.sum_(nc.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = nc.sum_(nc.mul(x, x))
    y.backward()
    y.backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        nc.mul(x, x).backward()


def test_shared_input_gradient_sums_over_uses():
    x = Tensor([3.0], requires_grad=True)
    nc.sum_(nc.add(nc.mul(x, x), nc.scale(x, 5.0))).backward()
    assert x.grad.tolist() == [11.0]


def test_float32_stays_float32():
    x = Tensor(np.ones(3, np.float32))
    assert nc.add(nc.mul(x, 2.0), 1e-8).dtype == np.float32


# every op against central differences ------------------------------------

UNARY = {
    "sigmoid": nc.sigmoid,
    "tanh": nc.tanh,
    "relu": nc.relu,
    "log10": lambda t: nc.log10(nc.add(nc.mul(t, t), 1.0)),
    "sqrt": lambda t: nc.sqrt(nc.add(nc.mul(t, t), 0.5)),
    "mean": lambda t: nc.mean(t, axis=0, keepdims=True),
    "variance": lambda t: nc.variance(t, axis=(0, 1)),
    "sum": lambda t: nc.sum_(t, axis=1),
    "scale": lambda t: nc.scale(t, -2.5),
    "cumsum": lambda t: nc.cumsum(t, axis=0),
    "reverse_time": nc.reverse_time,
    "slice": lambda t: nc.slice_(t, (slice(1, 3), slice(None))),
    "reshape": lambda t: nc.reshape(t, (3, 4)),
    "transpose": lambda t: nc.transpose(t, (1, 0)),
    "pad": lambda t: nc.pad(t, [(1, 2), (0, 1)]),
    "frame": lambda t: nc.frame(nc.reshape(t, (12,)), 4, 2),
    "overlap_add": lambda t: nc.overlap_add(t, 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, gen):
    x = Tensor(gen.standard_normal((4, 3)) + (0.3 if name == "relu" else 0.0))
    if name == "relu":
        x.data[np.abs(x.data) < 0.05] = 0.5  # stay off the kink
    report = grad_check(lambda t: weighted_sum(UNARY[name](t)), x, 1e-5, 1e-4)
    assert report.passed, report


BINARY = {
    "add": nc.add,
    "sub": nc.sub,
    "mul": nc.mul,
    "div": lambda a, b: nc.div(a, nc.add(nc.mul(b, b), 1.0)),
    "matmul": lambda a, b: nc.matmul(a, nc.transpose(b, (1, 0))),
    "concat": lambda a, b: nc.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name, gen):
    a, b = Tensor(gen.standard_normal((4, 3))), Tensor(gen.standard_normal((4, 3)))
    report = grad_check(lambda ts: weighted_sum(BINARY[name](*ts)), [a, b], 1e-5, 1e-4)
    assert report.passed, report


def test_broadcast_gradient(gen):
    a, b = Tensor(gen.standard_normal((2, 4, 3))), Tensor(gen.standard_normal(3))
    assert grad_check(lambda ts: weighted_sum(nc.mul(*ts)), [a, b]).passed


def test_grad_check_sigmoid_example(rng):
    assert grad_check(lambda t: nc.sum_(nc.sigmoid(t)), Tensor(rng.normal(4)), 1e-5, 1e-4).passed


def test_grad_check_constant_function():
    report = grad_check(lambda t: nc.sum_(nc.scale(t, 0.0)), Tensor([1.0, 2.0]))
    assert report.passed and report.max_rel_err == 0.0


def test_grad_check_detects_nondeterminism():
    gen = np.random.default_rng(0)
    with pytest.raises(RuntimeError):
        grad_check(lambda t: nc.sum_(nc.mul(t, gen.standard_normal())), Tensor([1.0]))


def test_grad_check_needs_float64():
    with pytest.raises(TypeError):
        grad_check(lambda t: nc.sum_(t), Tensor(np.ones(2, np.float32)))


def test_grad_check_catches_injected_fault(rng):
    x = Tensor(rng.normal(4))
    with nc.inject_fault("sigmoid_backward"):
        assert not grad_check(lambda t: nc.sum_(nc.sigmoid(t)), x).passed
    assert grad_check(lambda t: nc.sum_(nc.sigmoid(t)), x).passed


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
def test_reverse_time_is_an_involution(x):
    assert np.array_equal(nc.reverse_time(nc.reverse_time(Tensor(x))).data, x)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)),
    st.data(),
)
def test_complementary_slices_concat_to_identity(x, data):
    cut = data.draw(st.integers(1, x.shape[0] - 1))
    t = Tensor(x)
    back = nc.concat([nc.slice_(t, slice(0, cut)), nc.slice_(t, slice(cut, None))], axis=0)
    assert np.array_equal(back.data, x)


def test_frame_and_overlap_add_are_adjoint(gen):
    x = gen.standard_normal(20)
    y = gen.standard_normal((9, 4))
    lhs = np.sum(nc.frame(Tensor(x), 4, 2).data * y)
    rhs = np.sum(x * nc.overlap_add(Tensor(y), 2).data)
    assert abs(lhs - rhs) < 1e-12


def test_seeded_rng_reproduces_draws():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal((3, 4)), b.normal((3, 4)))
    assert np.array_equal(a.uniform(-1, 1, 5), b.uniform(-1, 1, 5))
    assert not np.array_equal(Rng(7).normal(4), Rng(8).normal(4))
