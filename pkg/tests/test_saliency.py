import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medpatchnet import netpbm
from medpatchnet.backbone import Backbone, BackboneConfig
from medpatchnet.patches import PatchGridSpec, PatchLogitGrid, predict
from medpatchnet.saliency import (
    SaliencyMap,
    ShiftSpec,
    block_boundary_tv,
    gradcam,
    gradcam_from_activations,
    gradcam_inputs,
    load_map,
    most_salient_point,
    overlay_rgb,
    patch_saliency,
    render_overlay,
    save_map,
    shifted_saliency,
    threshold_to_mask,
)
from medpatchnet.tensor import Tensor

from conftest import numerical_grad


def model_for(side, classes=2, seed=0, channels=(4, 6)):
    return Backbone.build(BackboneConfig(num_classes=classes, input_side=side, stage_channels=channels), seed)


def per_pixel_shift_oracle(image, model, spec, offset, class_id, use_scaled):
    """Direct per-pixel evaluation: for every shift, which patch of the translated
    image does pixel (y, x) land in, and what did that patch score?"""
    S, p = spec.image_side, spec.patch_side
    shifts = [(dy, dx) for dy in range(0, p, offset) for dx in range(0, p, offset)]
    grids = []
    for dy, dx in shifts:
        moved = np.zeros((S, S))
        for y in range(S):
            for x in range(S):
                if y + dy < S and x + dx < S:
                    moved[y, x] = image[y + dy, x + dx]
        grids.append(predict(moved, model, spec))
    out = np.zeros((S, S))
    for y in range(S):
        for x in range(S):
            acc = 0.0
            for (dy, dx), g in zip(shifts, grids):
                if y - dy >= 0 and x - dx >= 0:
                    src = g.scaled_logits if use_scaled else g.logits
                    acc += src[(y - dy) // p, (x - dx) // p, class_id]
                else:
                    acc += 0.0
            out[y, x] = acc / len(shifts)
    return out


# ------------------------------------------------------------------ ShiftSpec
def test_shift_counts():
    assert ShiftSpec(64).num_shifts(64) == 1
    assert ShiftSpec(16).num_shifts(64) == 16
    assert ShiftSpec(1).num_shifts(64) == 64 * 64
    assert ShiftSpec(2).offsets(4) == [(0, 0), (0, 2), (2, 0), (2, 2)]
    for bad in (0, 3, 5):
        with pytest.raises(ValueError):
            ShiftSpec(bad).validate(4)


# ------------------------------------------------------------- patch_saliency
def test_patch_saliency_block_values(rng):
    z = rng.normal(size=(4, 4, 3))
    g = PatchLogitGrid.from_patch_logits(z)
    m = patch_saliency(g, 1, use_scaled=False, patch_side=4)
    assert m.values.shape == (16, 16)
    for r in range(4):
        for c in range(4):
            assert (m.values[r * 4 : (r + 1) * 4, c * 4 : (c + 1) * 4] == z[r, c, 1]).all()


def test_patch_saliency_zero_and_single():
    z = np.zeros((4, 4, 2))
    assert not patch_saliency(PatchLogitGrid.from_patch_logits(z), 0, False, 4).values.any()
    z[2, 3, 0] = 1.5
    v = patch_saliency(PatchLogitGrid.from_patch_logits(z), 0, False, 4).values
    assert (v != 0).sum() == 16
    assert (v[8:12, 12:16] == 1.5).all()


def test_scaled_equals_raw_times_probability(rng):
    g = PatchLogitGrid.from_patch_logits(rng.normal(size=(4, 4, 3)))
    for c in range(3):
        raw = patch_saliency(g, c, False, 4).values
        scaled = patch_saliency(g, c, True, 4).values
        np.testing.assert_allclose(scaled, raw * g.probabilities[c], rtol=0, atol=1e-15)


def test_patch_saliency_bad_class(rng):
    g = PatchLogitGrid.from_patch_logits(rng.normal(size=(2, 2, 2)))
    with pytest.raises(ValueError):
        patch_saliency(g, 2, False, 4)


# ----------------------------------------------------------- shifted_saliency
@pytest.mark.parametrize("offset", [1, 2, 4])
@pytest.mark.parametrize("use_scaled", [False, True])
def test_shifted_matches_per_pixel_oracle(rng, offset, use_scaled):
    spec = PatchGridSpec(16, 4)
    m = model_for(4)
    img = rng.random((16, 16))
    got = shifted_saliency(img, m, spec, ShiftSpec(offset), 1, use_scaled).values
    want = per_pixel_shift_oracle(img, m, spec, offset, 1, use_scaled)
    assert np.array_equal(got, want)


@pytest.mark.parametrize("use_scaled", [False, True])
def test_full_offset_equals_patch_saliency(rng, use_scaled):
    spec = PatchGridSpec(16, 4)
    m = model_for(4)
    img = rng.random((16, 16))
    a = shifted_saliency(img, m, spec, ShiftSpec(4), 0, use_scaled).values
    b = patch_saliency(predict(img, m, spec), 0, use_scaled, 4).values
    assert a.tobytes() == b.tobytes()


def test_shifted_rejects_bad_offset():
    with pytest.raises(ValueError):
        shifted_saliency(np.zeros((16, 16)), model_for(4), PatchGridSpec(16, 4), ShiftSpec(3), 0, False)


# -------------------------------------------------------------------- Grad-CAM
def test_gradcam_zero_gradient_gives_zero_map():
    acts = np.ones((3, 4, 4))
    assert not gradcam_from_activations(acts, np.zeros_like(acts), 16).any()


def test_gradcam_single_channel_proportional(rng):
    acts = np.zeros((3, 4, 4))
    acts[1] = rng.random((4, 4)) + 0.1
    grads = np.zeros_like(acts)
    grads[1] = 0.7
    cam = gradcam_from_activations(acts, grads, 4)
    expected = (acts[1] - acts[1].min()) / (acts[1].max() - acts[1].min())
    np.testing.assert_allclose(cam, expected, atol=1e-12)


def test_gradcam_channel_weights_match_finite_differences(rng):
    m = model_for(16, classes=2, channels=(3, 4))
    for name, p in m.params.items():
        if name.endswith("bias"):
            p.data[:] = rng.normal(scale=0.1, size=p.shape)
    img = rng.random((16, 16))
    acts, grads = gradcam_inputs(img, m, class_id=1)
    weights = grads.mean(axis=(1, 2))

    feats = acts.copy()
    fd = numerical_grad(lambda: m.head(Tensor(feats[None])).data[0, 1], feats)
    fd_weights = fd.mean(axis=(1, 2))
    np.testing.assert_allclose(weights, fd_weights, rtol=1e-4, atol=1e-10)


def test_gradcam_output_range(rng):
    m = model_for(16, classes=2)
    for seed in range(5):
        img = np.random.default_rng(seed).random((16, 16))
        v = gradcam(img, m, 0).values
        assert v.shape == (16, 16)
        assert v.min() >= 0
        assert v.max() == 0 or v.max() == pytest.approx(1.0)


def test_gradcam_requires_full_image_model():
    with pytest.raises(ValueError, match="full-image"):
        gradcam(np.zeros((16, 16)), model_for(4), 0)


# --------------------------------------------------------------- map utilities
def test_most_salient_point_cases():
    v = np.zeros((8, 8))
    v[3, 7] = 2.0
    assert most_salient_point(v) == (3, 7)
    assert most_salient_point(np.ones((5, 5))) == (0, 0)
    v = np.zeros((6, 6))
    v[2, 5] = v[4, 1] = 1.0
    assert most_salient_point(v) == (2, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_most_salient_point_monotone_invariance(seed):
    v = np.random.default_rng(seed).normal(size=(8, 8))
    for f in (np.exp, lambda a: 3 * a + 1, np.arctan):
        assert most_salient_point(f(v)) == most_salient_point(v)


def test_threshold_to_mask():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(8, 8))
    assert threshold_to_mask(v, 0.0).all()
    assert not threshold_to_mask(v, 1.0 + 1e-9).any()
    ramp = np.tile(np.arange(16.0)[:, None], (1, 16))
    mask = threshold_to_mask(ramp, 0.5)
    assert (mask[8:] == 1).all() and (mask[:8] == 0).all()


def test_block_boundary_tv():
    v = np.zeros((8, 8))
    v[:4, :4] = 1.0
    # jumps across x=4 on rows 0..3 and y=4 on cols 0..3
    assert block_boundary_tv(v, 4) == 8.0
    assert block_boundary_tv(np.ones((8, 8)), 4) == 0.0


# ---------------------------------------------------------------- rendering
def test_overlay_zero_map_is_grayscale(rng):
    img = rng.random((8, 8))
    rgb = overlay_rgb(img, np.zeros((8, 8)))
    for k in range(3):
        assert np.array_equal(rgb[..., k], img)


def test_overlay_blend_arithmetic():
    img = np.full((4, 4), 0.4)
    v = np.zeros((4, 4))
    v[:2, :2] = 2.0
    v[2:, 2:] = -2.0
    rgb = overlay_rgb(img, v)
    np.testing.assert_allclose(rgb[0, 0], [0.5 * 0.4 + 0.5, 0.5 * 0.4, 0.5 * 0.4])
    np.testing.assert_allclose(rgb[3, 3], [0.5 * 0.4, 0.5 * 0.4, 0.5 * 0.4 + 0.5])
    np.testing.assert_allclose(rgb[0, 3], [0.4, 0.4, 0.4])


def test_render_overlay_deterministic(tmp_path, rng):
    img = rng.random((8, 8))
    v = rng.normal(size=(8, 8))
    render_overlay(img, v, tmp_path / "a.ppm")
    render_overlay(img, SaliencyMap(v, 0, "raw_patch"), tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    back = netpbm.read_ppm(tmp_path / "a.ppm")
    np.testing.assert_allclose(back, overlay_rgb(img, v), atol=0.5 / 255 + 1e-12)


def test_render_overlay_zero_map_bytes(tmp_path, rng):
    img = rng.random((8, 8))
    render_overlay(img, np.zeros((8, 8)), tmp_path / "o.ppm")
    raw = netpbm.read_ppm(tmp_path / "o.ppm")
    q = np.rint(img * 255) / 255
    for k in range(3):
        np.testing.assert_allclose(raw[..., k], q, atol=1e-12)


def test_saliency_map_persistence(tmp_path, rng):
    v = rng.normal(size=(16, 16)) * 3
    save_map(SaliencyMap(v, 2, "scaled_patch"), tmp_path / "map.pgm")
    meta = json.loads((tmp_path / "map.json").read_text())
    assert meta["min"] == v.min() and meta["max"] == v.max()
    back = load_map(tmp_path / "map.pgm")
    assert back.class_id == 2 and back.kind == "scaled_patch"
    np.testing.assert_allclose(back.values, v, atol=(v.max() - v.min()) / 65535)
