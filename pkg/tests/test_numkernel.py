import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sivfn import numkernel as nk
from helpers import conv2d_loops, grad_check, rel_error, xcorr_loops

SETTINGS = settings(max_examples=25, deadline=None)


@st.composite
def conv_case(draw):
    n = draw(st.integers(1, 2))
    c = draw(st.integers(1, 3))
    o = draw(st.integers(1, 3))
    k = draw(st.integers(1, 4))
    s = draw(st.integers(1, 3))
    h = draw(st.integers(k, k + 6))
    w = draw(st.integers(k, k + 6))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o), s


@SETTINGS
@given(conv_case())
def test_conv2d_matches_loop_oracle(case):
    x, w, b, s = case
    with nk.precision(64):
        out = nk.conv2d(nk.Tensor(x), nk.Tensor(w), nk.Tensor(b), s).data
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, s), rtol=1e-12, atol=1e-12)


@SETTINGS
@given(conv_case())
def test_conv2d_gradient(case):
    x, w, b, s = case
    err = grad_check(lambda x, w, b: nk.sum_all(nk.mul(nk.conv2d(x, w, b, s), nk.conv2d(x, w, b, s))),
                     [x, w, b])
    assert err < 1e-6


def test_conv2d_known_value():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 2, 2))
    with nk.precision(64):
        out = nk.conv2d(nk.Tensor(x), nk.Tensor(w), stride=2).data
    np.testing.assert_array_equal(out[0, 0], [[10.0, 18.0], [42.0, 50.0]])


def test_conv2d_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 5, 5\).*\(3, 4, 3, 3\)"):
        nk.conv2d(nk.Tensor(np.zeros((1, 2, 5, 5))), nk.Tensor(np.zeros((3, 4, 3, 3))))


@SETTINGS
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(0, 4),
       st.integers(0, 2**31))
def test_xcorr_oracle_and_gradient(n, c, hz, extra, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, c, hz, hz))
    x = rng.normal(size=(n, c, hz + extra, hz + extra + 1))
    with nk.precision(64):
        out = nk.depthwise_xcorr(nk.Tensor(z), nk.Tensor(x)).data
    np.testing.assert_allclose(out, xcorr_loops(z, x), rtol=1e-12, atol=1e-12)
    weights = rng.normal(size=out.shape)
    err = grad_check(lambda z, x: nk.sum_all(nk.mul(nk.depthwise_xcorr(z, x), nk.Tensor(weights))),
                     [z, x])
    assert err < 1e-6


def test_xcorr_rejects_large_template():
    with pytest.raises(ValueError, match="larger than"):
        nk.depthwise_xcorr(nk.Tensor(np.zeros((1, 1, 5, 5))), nk.Tensor(np.zeros((1, 1, 4, 4))))


def test_linear_vector_and_batch():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    with nk.precision(64):
        out = nk.linear(nk.Tensor(x), nk.Tensor(w), nk.Tensor(b)).data
        vec = nk.linear(nk.Tensor(x[0]), nk.Tensor(w), nk.Tensor(b)).data
    np.testing.assert_allclose(out, x @ w.T + b)
    np.testing.assert_allclose(vec, w @ x[0] + b)
    with pytest.raises(ValueError, match="input length 5"):
        nk.linear(nk.Tensor(np.zeros(5)), nk.Tensor(w))


def test_maxpool_values_and_gradient_routing():
    x = np.array([[[[1.0, 5.0, 2.0], [3.0, 4.0, 0.0], [9.0, 9.0, 9.0]]]])
    with nk.precision(64):
        t = nk.Tensor(x, requires_grad=True)
        with nk.Tape() as tape:
            y = nk.maxpool2d(t, 2)
            loss = nk.sum_all(y)
        tape.backward(loss)
    assert y.data.shape == (1, 1, 1, 1) and y.data[0, 0, 0, 0] == 5.0
    expected = np.zeros_like(x)
    expected[0, 0, 0, 1] = 1.0
    np.testing.assert_array_equal(t.grad, expected)


@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_activation_values(kind):
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    with nk.precision(64):
        y = nk.activation(nk.Tensor(x), kind).data
    ref = np.maximum(x, 0) if kind == "relu" else 1 / (1 + np.exp(-x))
    np.testing.assert_allclose(y, ref, rtol=1e-15)


def test_sigmoid_is_stable_for_large_inputs():
    with nk.precision(64):
        y = nk.sigmoid(nk.Tensor(np.array([-1000.0, 1000.0]))).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


def test_gap_of_constant_is_exact():
    with nk.precision(64):
        g = nk.gap(nk.Tensor(np.full((2, 3, 5, 7), 0.1))).data
    assert (g == 0.1).all()


def test_broadcast_gradients_reduce_to_input_shape():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(1, 3, 1, 1))
    err = grad_check(lambda a, b: nk.sum_all(nk.mul(nk.add(a, b), a)), [a, b])
    assert err < 1e-7


def test_leaf_gradients_accumulate_across_backward_calls():
    with nk.precision(64):
        w = nk.Tensor(np.array([2.0]), requires_grad=True)
        for _ in range(2):
            with nk.Tape() as tape:
                loss = nk.sum_all(nk.mul(w, w))
            tape.backward(loss)
    assert w.grad[0] == 8.0


def test_backward_requires_scalar():
    with nk.Tape() as tape:
        y = nk.mul(nk.Tensor(np.ones(3), requires_grad=True), 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_no_grad_records_nothing():
    w = nk.Tensor(np.ones(3), requires_grad=True)
    with nk.Tape() as tape:
        with nk.no_grad():
            nk.mul(w, w)
    assert len(tape) == 0


def test_numeric_gradient_requires_float64():
    with pytest.raises(ValueError, match="64-bit"):
        nk.numeric_gradient(lambda t: nk.sum_all(t), nk.Tensor(np.ones(3), dtype=np.float32))


def test_precision_context_restores_dtype():
    before = nk.get_dtype()
    with nk.precision(64):
        assert nk.get_dtype() == np.float64
    assert nk.get_dtype() == before
    with pytest.raises(ValueError):
        nk.set_precision(16)


def test_paramstore_freeze_and_state():
    store = nk.ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.zeros(3))
    store.set_trainable("a", False)
    assert not store.is_trainable("a") and not store["a"].requires_grad
    state = {k: v.copy() for k, v in store.state().items()}
    store["b"].data += 1
    store.load_state(state)
    assert (store["b"].data == 0).all()
    assert store.num_values() == 5
    with pytest.raises(KeyError):
        store.add("a", np.ones(1))


def test_rel_error_helper():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error([1.0, 0.0], [1.0, 1e-9]) < 1e-8
