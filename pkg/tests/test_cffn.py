import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sivfn import numkernel as nk
from sivfn.cffn import (PRESETS, BackboneConfig, CffnBackbone, CouplingSpec, build_backbone,
                        copy_untied, coupling_counts)
from helpers import autodiff_grad


def small_config(rates, pool_after=(), channels=(4, 6), seed=0):
    return BackboneConfig(channels=channels, kernels=(3,) * len(channels),
                          strides=(1,) * len(channels), pool_after=pool_after,
                          coupling_rates=rates, seed=seed)


def test_coupling_counts_full_preset():
    counts = coupling_counts(PRESETS["full"], (0.0, 0.25, 0.5, 0.75))
    assert counts == [(0, 32), (16, 48), (64, 64), (192, 64)]


def test_coupling_counts_round_half_to_even():
    assert coupling_counts((2, 6, 10), (0.25, 0.25, 0.25)) == [(0, 2), (2, 4), (2, 8)]


@pytest.mark.parametrize("rates", [(-0.1,), (1.5,)])
def test_coupling_rate_out_of_range(rates):
    with pytest.raises(ValueError, match="coupling rate"):
        coupling_counts((8,), rates)


def test_reconciled_rates_reflect_rounding():
    spec = CouplingSpec((6,), (0.25,)).reconciled()
    assert spec.coupled == (2,) and spec.rates == (2 / 6,)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 12), st.floats(0, 1)), min_size=1, max_size=4))
def test_every_stream_sees_n_filters(layers):
    channels = tuple(n for n, _ in layers)
    rates = tuple(r for _, r in layers)
    cfg = BackboneConfig(channels=channels, kernels=(1,) * len(layers),
                         strides=(1,) * len(layers), pool_after=(), coupling_rates=rates)
    bb = build_backbone(cfg)
    for layer, n in zip(bb.layers, channels):
        for stream in ("rgb", "thermal"):
            w, b = layer.effective(stream)
            assert w.shape[0] == n and b.shape == (n,)


def test_tiny_preset_geometry_and_size():
    bb = build_backbone(BackboneConfig.preset("tiny"))
    assert bb.total_stride == 8
    assert bb.output_size(127) == 9 and bb.output_size(255) == 25
    assert bb.geometry()[0] == 8


def test_forward_pair_output_shapes():
    bb = build_backbone(BackboneConfig.preset("tiny"))
    rng = np.random.default_rng(0)
    fr, ft = bb.forward_pair(nk.Tensor(rng.random((2, 3, 63, 63))),
                             nk.Tensor(rng.random((2, 1, 63, 63))))
    assert fr.shape == ft.shape == (2, 64, bb.output_size(63), bb.output_size(63))


def test_forward_pair_rejects_bad_inputs():
    bb = build_backbone(small_config((0.5, 0.5)))
    with pytest.raises(ValueError, match="thermal input needs 1 channel"):
        bb.forward_pair(nk.Tensor(np.zeros((1, 3, 9, 9))), nk.Tensor(np.zeros((1, 3, 9, 9))))
    with pytest.raises(ValueError, match="disagree"):
        bb.forward_pair(nk.Tensor(np.zeros((1, 3, 9, 9))), nk.Tensor(np.zeros((1, 1, 8, 9))))


def test_config_length_mismatch():
    with pytest.raises(ValueError, match="disagree in length"):
        CffnBackbone(nk.ParamStore(), BackboneConfig(channels=(4, 4)))


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown backbone preset"):
        BackboneConfig.preset("huge")


def test_param_groups_partition_slots():
    bb = build_backbone(BackboneConfig.preset("tiny"))
    groups = bb.param_groups()
    names = [n for g in groups.values() for n in g]
    assert sorted(names) == sorted(bb.store.names())
    assert "cffn.thermal_adapter.w" in groups["thermal"]
    assert not any("conv1.shared" in n for n in names)  # rate 0 at layer 1


def test_copy_untied_gives_identical_features():
    rng = np.random.default_rng(3)
    with nk.precision(64):
        src = build_backbone(small_config((0.5, 0.5), seed=1))
        dst = build_backbone(small_config((0.0, 0.0), seed=9))
        copy_untied(src, dst)
        x, t = rng.random((1, 3, 9, 9)), rng.random((1, 1, 9, 9))
        a = src.forward_pair(nk.Tensor(x), nk.Tensor(t))
        b = dst.forward_pair(nk.Tensor(x), nk.Tensor(t))
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.data, v.data)


def test_shared_gradient_sums_streams():
    rng = np.random.default_rng(5)
    with nk.precision(64):
        bb = build_backbone(small_config((0.5, 0.5)))
        x, t = nk.Tensor(rng.random((1, 3, 9, 9))), nk.Tensor(rng.random((1, 3, 9, 9)))
        wr = nk.Tensor(rng.normal(size=(1, 6, 5, 5)))
        wt = nk.Tensor(rng.normal(size=(1, 6, 5, 5)))
        shared = bb.layers[0].banks["shared"][0]
        both = autodiff_grad(lambda s: nk.add(nk.sum_all(nk.mul(bb.forward_stream(x, "rgb"), wr)),
                                              nk.sum_all(nk.mul(bb.forward_stream(t, "thermal"), wt))),
                             shared)[0]
        only_r = autodiff_grad(lambda s: nk.sum_all(nk.mul(bb.forward_stream(x, "rgb"), wr)), shared)[0]
        only_t = autodiff_grad(lambda s: nk.sum_all(nk.mul(bb.forward_stream(t, "thermal"), wt)),
                               shared)[0]
    np.testing.assert_allclose(both, only_r + only_t, rtol=0, atol=1e-12)
