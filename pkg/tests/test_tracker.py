import numpy as np
import pytest

from sivfn import numkernel as nk
from sivfn.model import ModelConfig, SiamIVFN, ablate, luminance
from sivfn.synthdata import random_scene, render_sequence
from sivfn.tracker import (SiamTracker, TrackerConfig, context_side, cosine_window, crop_region,
                           read_results, track_sequence, write_contributions, write_results)

SMALL = TrackerConfig(template_size=63, search_size=127)


@pytest.fixture(scope="module")
def model():
    return SiamIVFN(ModelConfig())


@pytest.fixture(scope="module")
def sequence():
    return render_sequence(random_scene(5, 0, frames=6), "s0")


class GroundTruthGuard:
    """Sequence wrapper that only exposes the first-frame box."""

    def __init__(self, seq):
        self._seq = seq

    def __len__(self):
        return len(self._seq)

    def frame_pair(self, t):
        return self._seq.frame_pair(t)

    def init_box(self):
        return self._seq.gt_visible[0]

    def __getattr__(self, name):
        raise AssertionError(f"tracker touched {name}")


def test_context_side():
    assert context_side(10, 10, 0.5) == 20.0
    assert context_side(4, 16, 0.5) == pytest.approx(np.sqrt(14 * 26))


def test_identity_crop_is_pixel_exact():
    img = np.arange(2 * 20 * 20, dtype=np.float64).reshape(2, 20, 20)
    out, = crop_region((img,), (10.0, 10.0), 10, 10)
    np.testing.assert_array_equal(out, img[:, 5:15, 5:15])


def test_out_of_frame_uses_channel_mean():
    img = np.stack([np.full((8, 8), 0.25), np.full((8, 8), 0.75)])
    img[:, 0, 0] = 1.0
    out, = crop_region((img,), (-20.0, -20.0), 6, 6)
    np.testing.assert_allclose(out[:, 0, 0], img.mean(axis=(1, 2)))


def test_crop_rejects_nonpositive_side():
    with pytest.raises(ValueError):
        crop_region((np.zeros((1, 4, 4)),), (2, 2), 0, 4)


def test_cosine_window_shape():
    w = cosine_window(9)
    assert w.shape == (9, 9) and w.argmax() == 40 and np.allclose(w, w.T) and w.min() > 0


def test_tracking_is_deterministic_and_blind_to_later_gt(model, sequence):
    a = track_sequence(model, GroundTruthGuard(sequence), SMALL)
    b = track_sequence(model, sequence, SMALL)
    assert [r.box for r in a] == [r.box for r in b]
    assert len(a) == len(sequence)
    assert a[0].box == tuple(float(v) for v in sequence.gt_visible[0])
    for r in a:
        x, y, w, h = r.box
        assert x >= 0 and y >= 0 and x + w <= 160 + 1e-9 and y + h <= 128 + 1e-9


def test_min_score_keeps_previous_box(model, sequence):
    cfg = TrackerConfig(template_size=63, search_size=127, min_score=1.1)
    res = track_sequence(model, sequence, cfg)
    assert all(r.box == res[0].box for r in res)


def test_init_outside_frame_rejected(model, sequence):
    trk = SiamTracker(model, SMALL)
    with pytest.raises(ValueError, match="outside"):
        trk.init(sequence.frame_pair(0), (500, 500, 10, 10))
    with pytest.raises(RuntimeError):
        SiamTracker(model, SMALL).update(sequence.frame_pair(1))


def test_read_failure_names_frame(model, sequence):
    class Broken(GroundTruthGuard):
        def frame_pair(self, t):
            if t == 3:
                raise ValueError("bad bytes")
            return super().frame_pair(t)

    with pytest.raises(IOError, match="frame 3"):
        track_sequence(model, Broken(sequence), SMALL)


def test_contributions_and_results_files(tmp_path, model, sequence):
    contrib = []
    res = track_sequence(model, sequence, SMALL, contributions=contrib)
    assert len(contrib) == len(sequence) - 1 and contrib[0].shape == (128,)
    write_results(tmp_path / "r.csv", res)
    back = read_results(tmp_path / "r.csv")
    np.testing.assert_allclose(back, [r.box for r in res], atol=5e-4)
    write_contributions(tmp_path / "h.csv", contrib)
    first = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
    assert first[0] == "1" and len(first) == 129


def test_single_modality_inputs():
    rng = np.random.default_rng(0)
    rgb, th = rng.random((1, 3, 5, 5)), rng.random((1, 1, 5, 5))
    r, t = SiamIVFN.prepare_inputs(rgb, th, "rgb")
    assert r is rgb and np.allclose(t, luminance(rgb))
    r, t = SiamIVFN.prepare_inputs(rgb, th, "t")
    assert t is th and (r == th).all() and r.shape == rgb.shape
    with pytest.raises(ValueError, match="unknown mode"):
        SiamIVFN.prepare_inputs(rgb, th, "ir")


def test_no_cffn_variant_untied_and_equivalent(model):
    variant = ablate(model, "no-cffn")
    assert all(layer.coupled == 0 for layer in variant.backbone.layers)
    rng = np.random.default_rng(1)
    x, t = rng.random((1, 3, 63, 63), dtype=np.float32), rng.random((1, 1, 63, 63), dtype=np.float32)
    with nk.no_grad():
        a, _ = model.features(x, t)
        b, _ = variant.features(x, t)
    np.testing.assert_array_equal(a.data, b.data)


def test_no_can_variant_uses_constant_contribution(model):
    variant = ablate(model, "no-can")
    rng = np.random.default_rng(2)
    with nk.no_grad():
        _, h = variant.features(rng.random((1, 3, 63, 63)), rng.random((1, 1, 63, 63)))
    assert (h.data == 0.5).all()
    assert model.config.can_enabled
