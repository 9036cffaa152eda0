import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wctdefense import autodiff as ad
from wctdefense.errors import ContractError, DimensionError

from oracles import fd_grad, loop_conv, loop_maxpool, rel_err


def grad_of(fn, *arrays_, wrt=0):
    """Analytic gradient of scalar ``fn(*tensors)`` w.r.t. argument ``wrt``."""
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays_]
    with ad.Tape():
        out = fn(*ts)
    ad.backward(out)
    return ts[wrt].grad


def value_of(fn, *arrays_):
    return fn(*[ad.Tensor(a) for a in arrays_]).item()


def away_from_zero(rng, shape, margin=1e-3):
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


# --------------------------------------------------------------- forward values

def test_matmul_examples():
    out = ad.matmul(ad.Tensor([[1.0, 0], [0, 1]]), ad.Tensor([[3.0, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(ad.matmul(ad.Tensor([[1.0, 2]]), ad.Tensor([[3.0], [4]])).data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_conv_ones_times_two():
    out = ad.conv2d(ad.Tensor(np.ones((1, 3, 3))), ad.Tensor(np.full((1, 1, 1, 1), 2.0)), ad.Tensor([0.0]), 0)
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_impulse_response(rng):
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    k = rng.standard_normal((1, 1, 3, 3))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor([0.0]), 1).data
    # cross-correlation of an impulse is the kernel flipped about its center
    np.testing.assert_allclose(out[0, 1:4, 1:4], k[0, 0, ::-1, ::-1], atol=0)
    assert np.count_nonzero(out) <= 9


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 6, 5))
    k = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    for pad in (0, 1, 2):
        got = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), pad).data
        np.testing.assert_allclose(got, loop_conv(x, k, b, pad), atol=1e-12)


def test_conv_batched_equals_single(rng):
    x = rng.standard_normal((4, 2, 7, 7))
    k = ad.Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = ad.Tensor(rng.standard_normal(3))
    batch = ad.conv2d(ad.Tensor(x), k, b, 1).data
    for i in range(4):
        np.testing.assert_allclose(batch[i], ad.conv2d(ad.Tensor(x[i]), k, b, 1).data, atol=1e-12)


@pytest.mark.parametrize("bad", ["channels", "bias", "kernel"])
def test_conv_errors(bad):
    x = ad.Tensor(np.ones((2, 3, 3)))
    k = ad.Tensor(np.ones((1, 2, 3, 3)))
    b = ad.Tensor(np.ones(1))
    if bad == "channels":
        k = ad.Tensor(np.ones((1, 3, 3, 3)))
    elif bad == "bias":
        b = ad.Tensor(np.ones(2))
    else:
        k = ad.Tensor(np.ones((1, 2, 5, 5)))
    with pytest.raises(DimensionError):
        ad.conv2d(x, k, b, 0)


def test_relu_example():
    np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_xent_uniform_is_log10():
    assert ad.softmax_xent(ad.Tensor(np.zeros(10)), 7).item() == pytest.approx(math.log(10), abs=1e-12)


def test_xent_stable_for_huge_logits():
    z = np.array([1000.0, 0.0, -1000.0])
    assert ad.softmax_xent(ad.Tensor(z), 0).item() == pytest.approx(0.0, abs=1e-12)
    assert ad.softmax_xent(ad.Tensor(z), 1).item() == pytest.approx(1000.0, rel=1e-12)


@pytest.mark.parametrize("label", [10, 11, -1])
def test_xent_label_out_of_range(label):
    with pytest.raises(IndexError):
        ad.softmax_xent(ad.Tensor(np.zeros(10)), label)


def test_maxpool_matches_loop_oracle(rng):
    for shape in ((2, 4, 4), (1, 5, 7), (3, 1, 1)):
        x = rng.standard_normal(shape)
        np.testing.assert_array_equal(ad.maxpool2(ad.Tensor(x)).data, loop_maxpool(x))


def test_maxpool_tie_goes_to_first_row_major():
    x = ad.Tensor(np.ones((1, 2, 2)), requires_grad=True)
    with ad.Tape():
        out = ad.sum(ad.maxpool2(x))
    ad.backward(out)
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


def test_maxpool_tie_second_row():
    x = ad.Tensor(np.array([[[0.0, 1.0], [1.0, 0.5]]]), requires_grad=True)
    with ad.Tape():
        out = ad.sum(ad.maxpool2(x))
    ad.backward(out)
    np.testing.assert_array_equal(x.grad, [[[0, 1], [0, 0]]])


# ------------------------------------------------------------------- backward

def test_backward_sum_gives_ones(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(grad_of(ad.sum, x), np.ones((3, 4)))


def test_backward_dot_gives_2x(rng):
    x = rng.standard_normal(6)
    np.testing.assert_allclose(grad_of(lambda t: ad.dot(t, t), x), 2 * x, atol=1e-15)


def test_backward_needs_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.relu(x)
    with pytest.raises(ContractError):
        ad.backward(y)


def test_backward_needs_tape():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.sum(x))


def test_backward_accumulates(rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    for _ in range(2):
        with ad.Tape():
            out = ad.sum(x)
        ad.backward(out)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))
    x.zero_grad()
    assert x.grad is None


def test_off_path_leaves_get_no_grad(rng):
    a = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.Tape():
        used = ad.sum(a)
        ad.sum(b)
    ad.backward(used)
    assert b.grad is None


def test_gradient_additivity(rng):
    xa, xb = rng.standard_normal(5), rng.standard_normal(5)
    a, b = ad.Tensor(xa, requires_grad=True), ad.Tensor(xb, requires_grad=True)
    with ad.Tape():
        out = ad.add(ad.dot(a, a), ad.sum(ad.tanh(b)))
    ad.backward(out)
    np.testing.assert_allclose(a.grad, grad_of(lambda t: ad.dot(t, t), xa), atol=0)
    np.testing.assert_allclose(b.grad, grad_of(lambda t: ad.sum(ad.tanh(t)), xb), atol=0)


def test_tape_counts_and_inference_records_nothing(rng):
    x = ad.Tensor(rng.standard_normal(3))
    with ad.Tape() as tape:
        ad.relu(x)
    assert len(tape) == 0
    x.requires_grad = True
    with ad.Tape() as tape:
        ad.sum(ad.relu(x))
    assert len(tape) == 2


def test_reused_input_visits_each_op_once(rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    with ad.Tape():
        y = ad.relu(x)
        out = ad.sum(ad.mul(y, y))
    ad.backward(out)
    np.testing.assert_allclose(x.grad, 2 * np.maximum(x.data, 0), atol=1e-15)


def test_graph_has_no_reference_cycles(rng):
    import gc
    gc.collect()
    gc.disable()
    try:
        x = ad.Tensor(rng.standard_normal((1, 1, 6, 6)), requires_grad=True)
        with ad.Tape():
            h = ad.maxpool2(ad.relu(ad.conv2d(x, ad.Tensor(np.ones((2, 1, 3, 3))), ad.Tensor(np.zeros(2)), 1)))
            out = ad.softmax_xent(ad.reshape(h, (1, -1)), [0])
        ad.backward(out)
        del h, out
        # refcounting alone frees the graph, so the collector finds nothing
        assert gc.collect() == 0
    finally:
        gc.enable()


def test_forward_deterministic(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    k = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    runs = [ad.maxpool2(ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), 1)).data for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


# ------------------------------------------------------- finite-difference checks

def _check(fn, arrays_, tol=1e-4):
    for i, a in enumerate(arrays_):
        ana = grad_of(fn, *arrays_, wrt=i)

        def f(v, i=i):
            args = list(arrays_)
            args[i] = v
            return value_of(fn, *args)
        num = fd_grad(f, a)
        assert rel_err(ana, num) < tol, f"argument {i}"


def test_fd_matmul(rng):
    w = rng.standard_normal((4, 3))
    _check(lambda a, b: ad.sum(ad.mul(ad.matmul(a, b), ad.Tensor(w))),
           [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))])


def test_fd_conv(rng):
    w = rng.standard_normal((3, 5, 5))
    _check(lambda x, k, b: ad.sum(ad.mul(ad.conv2d(x, k, b, 1), ad.Tensor(w))),
           [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)])


def test_fd_conv_batched_no_padding(rng):
    w = rng.standard_normal((2, 3, 4, 3))
    _check(lambda x, k, b: ad.sum(ad.mul(ad.conv2d(x, k, b, 0), ad.Tensor(w))),
           [rng.standard_normal((2, 2, 5, 4)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(3)])


def test_fd_maxpool(rng):
    # distinct values keep every window away from a tie
    x = rng.permutation(16).reshape(1, 4, 4) / 16.0 + rng.uniform(0, 1e-3, (1, 4, 4))
    w = rng.standard_normal((1, 2, 2))
    _check(lambda t: ad.sum(ad.mul(ad.maxpool2(t), ad.Tensor(w))), [x])


def test_fd_maxpool_odd(rng):
    x = rng.permutation(15).reshape(1, 3, 5) / 15.0
    w = rng.standard_normal((1, 2, 3))
    _check(lambda t: ad.sum(ad.mul(ad.maxpool2(t), ad.Tensor(w))), [x])


def test_fd_relu(rng):
    w = rng.standard_normal(12)
    _check(lambda t: ad.sum(ad.mul(ad.relu(t), ad.Tensor(w))), [away_from_zero(rng, 12)])


@pytest.mark.parametrize("label", [0, 4, 9])
def test_fd_xent(rng, label):
    _check(lambda z: ad.softmax_xent(z, label), [rng.uniform(-1, 1, 10)])


def test_fd_xent_batch(rng):
    _check(lambda z: ad.softmax_xent(z, [1, 0, 3]), [rng.uniform(-1, 1, (3, 5))])


def test_fd_elementwise_and_broadcast(rng):
    _check(lambda a, b: ad.sum(ad.tanh(ad.sub(ad.mul(a, b), ad.add(a, b)))),
           [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4,))])


# ---------------------------------------------------------------- properties

finite = st.floats(-1, 1, allow_nan=False, allow_infinity=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_backward_formula(a, b):
    g = np.arange(6, dtype=float).reshape(3, 2)
    ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    with ad.Tape():
        out = ad.sum(ad.mul(ad.matmul(ta, tb), ad.Tensor(g)))
    ad.backward(out)
    np.testing.assert_allclose(ta.grad, g @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ g, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 6), elements=finite))
def test_maxpool_gradient_is_one_hot_per_window(x):
    t = ad.Tensor(x, requires_grad=True)
    with ad.Tape():
        out = ad.sum(ad.maxpool2(t))
    ad.backward(out)
    windows = t.grad.reshape(2, 2, 2, 3, 2).transpose(0, 1, 3, 2, 4).reshape(2, 2, 3, 4)
    np.testing.assert_array_equal(windows.sum(axis=-1), np.ones((2, 2, 3)))
    vals = x.reshape(2, 2, 2, 3, 2).transpose(0, 1, 3, 2, 4).reshape(2, 2, 3, 4)
    first = np.argmax(vals == vals.max(axis=-1, keepdims=True), axis=-1)
    np.testing.assert_array_equal(np.argmax(windows, axis=-1), first)
