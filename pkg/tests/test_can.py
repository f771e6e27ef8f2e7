import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sivfn import numkernel as nk
from sivfn.can import CanBlock, can_forward, excite, gap, modulate
from helpers import grad_check


def zero_block(channels, reduction=4):
    store = nk.ParamStore()
    block = CanBlock(store, channels, reduction)
    for _, t in store.items():
        t.data[...] = 0.0
    return block


def test_zero_weights_scale_input_by_one_and_a_half():
    rng = np.random.default_rng(0)
    with nk.precision(64):
        block = zero_block(8)
        fr, ft = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
        z, h = can_forward(block, nk.Tensor(fr), nk.Tensor(ft))
    assert (h.data == 0.5).all()
    np.testing.assert_array_equal(z.data, 1.5 * np.concatenate([fr, ft], axis=1))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(1, 6), st.integers(1, 6))
def test_gap_of_constant_is_exact(c, h, w):
    with nk.precision(64):
        g = gap(nk.Tensor(np.full((1, 3, h, w), c))).data
    assert (g == c).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20))
def test_contribution_strictly_inside_unit_interval(seed, spread):
    rng = np.random.default_rng(seed)
    store = nk.ParamStore()
    block = CanBlock(store, 8, 4, seed=seed)
    g = nk.Tensor(rng.normal(scale=spread, size=(3, 8)))
    h = excite(block, g).data
    assert ((h > 0) & (h < 1)).all()


def test_visible_channels_come_first():
    with nk.precision(64):
        block = zero_block(4)
        z, _ = can_forward(block, nk.Tensor(np.ones((1, 2, 2, 2))),
                           nk.Tensor(np.full((1, 2, 2, 2), 2.0)))
    assert (z.data[0, :2] == 1.5).all() and (z.data[0, 2:] == 3.0).all()


def test_fixed_contribution_bypasses_excitation():
    rng = np.random.default_rng(1)
    block = CanBlock(nk.ParamStore(), 4, 2, seed=3)
    fr, ft = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
    z, h = can_forward(block, nk.Tensor(fr), nk.Tensor(ft), fixed_h=0.5)
    assert (h.data == 0.5).all()
    np.testing.assert_allclose(z.data, 1.5 * np.concatenate([fr, ft], axis=1).astype(z.data.dtype))


def test_can_gradient():
    rng = np.random.default_rng(2)
    with nk.precision(64):
        store = nk.ParamStore()
        block = CanBlock(store, 6, 2, seed=4)
        wts = rng.normal(size=(2, 6, 3, 3))

        def f(fr, ft, aw, bw):
            block.alpha_w, block.beta_w = aw, bw
            z, _ = can_forward(block, fr, ft)
            return nk.sum_all(nk.mul(z, nk.Tensor(wts)))

        err = grad_check(f, [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3)),
                             block.alpha_w.data.copy(), block.beta_w.data.copy()])
    assert err < 1e-6


def test_shape_errors():
    block = CanBlock(nk.ParamStore(), 4)
    with pytest.raises(ValueError, match="feature shapes disagree"):
        can_forward(block, nk.Tensor(np.zeros((1, 2, 3, 3))), nk.Tensor(np.zeros((1, 2, 4, 3))))
    with pytest.raises(ValueError, match="contribution length"):
        modulate(nk.Tensor(np.zeros((1, 4, 2, 2))), nk.Tensor(np.zeros((1, 3))))
    with pytest.raises(ValueError):
        CanBlock(nk.ParamStore(), 0)
