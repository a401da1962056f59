import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gswxray.core import BoundingBox, Detection, GrayImage
from gswxray.nn import build_classifier, forward
from gswxray.viz import (
    BOX_COLOR,
    Heatmap,
    RgbImage,
    cam_for_image,
    cam_weights,
    class_activation_map,
    colormap,
    colormap_array,
    normalize_and_resize,
    render_cam,
    render_overlay,
    superimpose,
    tap_activations,
    text_mask,
)
from oracles import cam_loop


def gray(value=100, w=20, h=16):
    return GrayImage(np.full((h, w), value, dtype=np.uint8))


# ---------------------------------------------------------------- CAM


def test_cam_matches_double_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(6, 6, 4))
    w = rng.normal(size=4)
    assert np.max(np.abs(class_activation_map(a, w).values - cam_loop(a, w))) <= 1e-12


def test_cam_trivial_weights():
    a = np.random.default_rng(1).normal(size=(5, 3, 4))
    assert np.array_equal(class_activation_map(a, np.eye(4)[2]).values, a[:, :, 2])
    assert np.all(class_activation_map(a, np.zeros(4)).values == 0)
    with pytest.raises(ValueError):
        class_activation_map(a, np.zeros(3))
    with pytest.raises(ValueError):
        class_activation_map(a[:, :, 0], np.zeros(1))


@given(st.integers(0, 2**32 - 1))
def test_cam_is_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 5, 3))
    w1, w2 = rng.normal(size=3), rng.normal(size=3)
    lhs = class_activation_map(a, w1 + w2).values
    rhs = class_activation_map(a, w1).values + class_activation_map(a, w2).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@pytest.fixture(scope="module")
def net():
    return build_classifier((32, 32), seed=2)


@pytest.fixture(scope="module")
def image():
    return GrayImage(np.random.default_rng(3).integers(0, 256, (32, 32), dtype=np.uint8))


def test_cam_mean_reproduces_the_logit(net, image):
    """On the pre-pool tap the spatial mean of the CAM is the linear part of the class logit."""
    _, trace = forward(net, [image])
    hidden = trace.outputs["fc1"][0]
    active = hidden > 0
    w2 = net.layer("fc2").params["W"][:, 0]
    b1 = net.layer("fc1").params["b"]
    const = float(np.sum(w2[active] * b1[active]) + net.layer("fc2").params["b"][0])
    logit = float(trace.outputs["fc2"][0, 0])
    cam = cam_for_image(net, image, "GSW", "pre_pool").values
    assert cam.mean() + const == pytest.approx(logit, abs=1e-12)
    neg = cam_for_image(net, image, "Normal", "pre_pool").values
    assert np.allclose(neg, -cam, atol=0)


def test_taps_grid_relation(net, image):
    pre, _ = tap_activations(net, image, "pre_pool")
    post, _ = tap_activations(net, image, "post_pool")
    assert pre.shape[:2] == (8, 8)
    assert post.shape[:2] == (pre.shape[0] // 2, pre.shape[1] // 2)
    assert np.array_equal(post[0, 0], pre[:2, :2].max(axis=(0, 1)))
    with pytest.raises(ValueError):
        tap_activations(net, image, "fc1")


def test_cam_weights_softmax_head(image):
    net = build_classifier((32, 32), class_names=("a", "b", "c"), seed=1)
    _, trace = forward(net, [image])
    hidden = trace.outputs["fc1"][0]
    w = cam_weights(net, hidden, "c")
    act = hidden > 0
    assert np.allclose(w, net.layer("fc1").params["W"][:, act] @ net.layer("fc2").params["W"][act, 2])


def test_render_cam(net, image):
    heat, blended = render_cam(net, image)
    assert (heat.rows, heat.cols) == (32, 32) and heat.normalized
    assert (blended.width, blended.height) == (32, 32)
    again = render_cam(net, image)[1]
    assert blended == again


# ---------------------------------------------------------------- normalization / resize


def test_normalize_examples():
    h = normalize_and_resize(Heatmap(np.full((2, 3), 4.0)), (7, 5))
    assert h.values.shape == (5, 7) and np.all(h.values == 1.0)
    z = normalize_and_resize(Heatmap(np.zeros((3, 3))), (4, 4))
    assert np.all(z.values == 0)
    mid = normalize_and_resize(Heatmap(np.array([[0.0, 1.0], [1.0, 0.0]])), (3, 3))
    assert mid.values[1, 1] == pytest.approx(0.5, abs=1e-15)


def test_negative_evidence_clipped():
    h = normalize_and_resize(Heatmap(np.array([[-5.0, 2.0]])), (2, 1))
    assert h.values.tolist() == [[0.0, 1.0]]


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.integers(1, 40), st.integers(1, 40))
def test_normalize_scale_invariant_and_valid(seed, c, w, hgt):
    v = np.random.default_rng(seed).normal(size=(4, 5))
    a = normalize_and_resize(Heatmap(v), (w, hgt))
    b = normalize_and_resize(Heatmap(v * c), (w, hgt))
    assert np.allclose(a.values, b.values, rtol=0, atol=1e-12)
    assert a.values.min() >= 0 and a.values.max() in (0.0, 1.0)


def test_heatmap_validation():
    with pytest.raises(ValueError):
        Heatmap(np.array([[0.5, 0.2]]), normalized=True)
    with pytest.raises(ValueError):
        Heatmap(np.array([[1.5]]), normalized=True)
    with pytest.raises(ValueError):
        Heatmap(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Heatmap(np.zeros(3))
    assert Heatmap(np.array([[0.0, 2.0], [3.0, 1.0]])).argmax() == (1, 0)


# ---------------------------------------------------------------- colormap / blend


def test_colormap_examples():
    assert colormap(0.0) == (0, 0, 255)
    assert colormap(1.0) == (255, 0, 0)
    assert colormap(0.5) == (0, 255, 0)
    assert colormap(0.125) == (0, 128, 255)
    with pytest.raises(ValueError):
        colormap(1.01)
    with pytest.raises(ValueError):
        colormap(-0.1)


@given(st.floats(0, 1), st.floats(0, 1))
def test_colormap_lipschitz(v, w):
    a = np.array(colormap(v), dtype=int)
    b = np.array(colormap(w), dtype=int)
    assert np.all(np.abs(a - b) <= 4 * 255 * abs(v - w) + 1)


def test_superimpose_examples():
    base = gray(100, 3, 2)
    hot = Heatmap(np.ones((2, 3)), normalized=True)
    assert superimpose(base, hot, 0.4).pixels[0, 0].tolist() == [162, 60, 60]
    assert superimpose(base, hot, 0.0) == RgbImage.from_gray(base)
    ramp = normalize_and_resize(Heatmap(np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 1.0]])), (3, 2))
    assert np.array_equal(superimpose(base, ramp, 1.0).pixels, colormap_array(ramp.values))
    with pytest.raises(ValueError):
        superimpose(base, Heatmap(np.ones((3, 3)), normalized=True))
    with pytest.raises(ValueError):
        superimpose(base, Heatmap(np.ones((2, 3))))
    with pytest.raises(ValueError):
        superimpose(base, hot, 1.5)


@given(st.integers(0, 2**32 - 1))
def test_superimpose_alpha_zero_is_lossless(seed):
    rng = np.random.default_rng(seed)
    base = GrayImage(rng.integers(0, 256, (6, 7), dtype=np.uint8))
    h = normalize_and_resize(Heatmap(rng.normal(size=(3, 3))), (7, 6))
    out = superimpose(base, h, 0.0)
    assert np.array_equal(out.pixels, np.repeat(base.pixels[:, :, None], 3, axis=2))


# ---------------------------------------------------------------- overlay


def _expected_perimeter(w, h, x0, y0, x1, y1):
    m = np.zeros((h, w), dtype=bool)
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if min(x - x0, x1 - x, y - y0, y1 - y) < 2:
                m[y, x] = True
    return m


def test_overlay_without_detections_is_a_copy():
    img = GrayImage(np.random.default_rng(0).integers(0, 256, (30, 40), dtype=np.uint8))
    assert render_overlay(img, []) == RgbImage.from_gray(img)


def test_overlay_changes_only_the_perimeter():
    img = gray(100, 40, 30)
    d = Detection("x", "bullet", 0.9, BoundingBox(10, 12, 20, 25))
    plain = RgbImage.from_gray(img).pixels
    out = render_overlay(img, [d], label=False).pixels
    diff = np.any(out != plain, axis=2)
    assert np.array_equal(diff, _expected_perimeter(40, 30, 10, 12, 19, 24))
    assert out[12, 10].tolist() == list(BOX_COLOR)


def test_overlay_label_above_box_and_threshold():
    img = gray(100, 40, 40)
    d = Detection("x", "bullet", 0.87, BoundingBox(5, 15, 20, 30))
    out = render_overlay(img, [d]).pixels
    diff = np.any(out != RgbImage.from_gray(img).pixels, axis=2)
    extra = diff & ~_expected_perimeter(40, 40, 5, 15, 19, 29)
    ys, xs = np.nonzero(extra)
    assert ys.min() >= 15 - 8 and ys.max() < 15 and xs.min() >= 5
    glyphs = text_mask("0.87")
    assert extra[7:14, 5 : 5 + glyphs.shape[1]].tolist() == glyphs.tolist()
    low = Detection("x", "bullet", 0.3, BoundingBox(5, 15, 20, 30))
    assert render_overlay(img, [low], score_threshold=0.5) == RgbImage.from_gray(img)


def test_overlay_label_moves_below_when_box_touches_top():
    img = gray(100, 40, 40)
    d = Detection("x", "bullet", 0.5, BoundingBox(5, 0, 20, 10))
    out = render_overlay(img, [d]).pixels
    diff = np.any(out != RgbImage.from_gray(img).pixels, axis=2)
    extra = diff & ~_expected_perimeter(40, 40, 5, 0, 19, 9)
    assert np.nonzero(extra)[0].min() > 9


def test_overlay_is_deterministic():
    img = GrayImage(np.random.default_rng(4).integers(0, 256, (30, 40), dtype=np.uint8))
    dets = [Detection("x", "bullet", s, BoundingBox(3 + 9 * i, 10, 10 + 9 * i, 20)) for i, s in enumerate([0.6, 0.95, 0.7])]
    assert render_overlay(img, dets).pixels.tobytes() == render_overlay(img, list(reversed(dets))).pixels.tobytes()


def test_text_mask():
    assert text_mask("1.0").shape == (7, 17)
    with pytest.raises(ValueError):
        text_mask("a")
