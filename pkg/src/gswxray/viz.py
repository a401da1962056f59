"""Class activation maps, jet rendering, superimposition and detection overlays."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gswxray.core import Detection, GrayImage
from gswxray.nn.network import Network, forward
from gswxray.nn.layers import maxpool2x2

JET_ANCHORS = (
    (0.0, (0, 0, 255)),
    (0.25, (0, 255, 255)),
    (0.5, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.0, (255, 0, 0)),
)
BOX_COLOR = (0, 255, 0)
BOX_WIDTH = 2
TAPS = ("pre_pool", "post_pool")
CAM_LAYER = "relu3"


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] <= 0 or v.shape[1] <= 0:
            raise ValueError(f"heatmap must be a non-empty 2-D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("heatmap values must be finite")
        if self.normalized:
            if v.min() < 0 or v.max() > 1:
                raise ValueError("normalized heatmap values must lie in [0, 1]")
            if v.max() != 1.0 and np.any(v != 0):
                raise ValueError("normalized heatmap must peak at 1 or be all zero")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def argmax(self) -> tuple[int, int]:
        """``(row, col)`` of the first maximum in row-major order."""
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(r), int(c)


@dataclass(frozen=True, eq=False)
class RgbImage:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError("RGB image must be an (H, W, 3) uint8 array")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RgbImage) and np.array_equal(self.pixels, other.pixels)

    @classmethod
    def from_gray(cls, image: GrayImage) -> "RgbImage":
        return cls(np.repeat(image.pixels[:, :, None], 3, axis=2))


def class_activation_map(feature_maps: np.ndarray, class_weights: np.ndarray) -> Heatmap:
    """Weighted channel sum of ``(H, W, C)`` activations."""
    a = np.asarray(feature_maps, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"feature maps must be (H, W, C), got shape {a.shape}")
    if w.shape != (a.shape[2],):
        raise ValueError(f"{w.size} weights for {a.shape[2]} channels")
    return Heatmap(a @ w)


def _half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def bilinear_resize(values: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling with edge clamping."""
    src = np.asarray(values, dtype=np.float64)
    in_r, in_c = src.shape

    def axis(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(rows, in_r)
    c0, c1, fc = axis(cols, in_c)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize_and_resize(h: Heatmap, target: tuple[int, int]) -> Heatmap:
    """Clip negatives, scale to a peak of 1 and resample to ``target = (width, height)``."""
    width, height = target
    if width <= 0 or height <= 0:
        raise ValueError("target size must be positive")
    v = np.maximum(h.values, 0.0)
    peak = v.max()
    if peak > 0:
        v = v / peak
    out = np.clip(bilinear_resize(v, height, width), 0.0, 1.0)
    if out.max() > 0:
        # interpolation keeps the peak only where it lands on a sample; restore exact max == 1
        out = out / out.max()
    return Heatmap(out, normalized=True)


def colormap_array(values: np.ndarray) -> np.ndarray:
    """Jet colors for an array of values in [0, 1]; returns uint8 ``(..., 3)``."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(~np.isfinite(v)) or np.any((v < 0) | (v > 1)):
        raise ValueError("colormap input must lie in [0, 1]")
    xs = np.array([a for a, _ in JET_ANCHORS])
    cs = np.array([c for _, c in JET_ANCHORS], dtype=np.float64)
    out = np.stack([np.interp(v, xs, cs[:, k]) for k in range(3)], axis=-1)
    return _half_up(out).astype(np.uint8)


def colormap(value: float) -> tuple[int, int, int]:
    r, g, b = colormap_array(np.array(value)).tolist()
    return r, g, b


def superimpose(base: GrayImage, h: Heatmap, alpha: float = 0.4) -> RgbImage:
    """``round(alpha * jet(h) + (1 - alpha) * base)`` per channel."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if not h.normalized:
        raise ValueError("superimpose needs a normalized heatmap")
    if (h.rows, h.cols) != (base.height, base.width):
        raise ValueError(f"heatmap {h.cols}x{h.rows} does not match image {base.width}x{base.height}")
    color = colormap_array(h.values).astype(np.float64)
    gray = base.pixels.astype(np.float64)[:, :, None]
    out = _half_up(alpha * color + (1.0 - alpha) * gray)
    return RgbImage(np.clip(out, 0, 255).astype(np.uint8))


def cam_weights(net: Network, hidden: np.ndarray, class_name: str) -> np.ndarray:
    """Per-channel weights linking GAP features to one class score.

    The dense head is linear once the active hidden units are fixed, so the
    weights are ``W1[:, active] @ W2[active]``. A sigmoid head scores GSW by
    its logit and the other class by the negated logit.
    """
    w1 = net.layer("fc1").params["W"]
    w2 = net.layer("fc2").params["W"]
    active = hidden > 0
    eff = w1[:, active] @ w2[active, :]
    k = net.class_names.index(class_name)
    if net.head_kind == "sigmoid":
        return eff[:, 0] if k == 1 else -eff[:, 0]
    return eff[:, k]


def tap_activations(net: Network, image: GrayImage, tap: str = "pre_pool") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(activations (H, W, C), fc1 pre-activation)`` for one image."""
    if tap not in TAPS:
        raise ValueError(f"tap must be one of {TAPS}")
    _, trace = forward(net, [image])
    acts = trace.outputs[CAM_LAYER][0]
    if tap == "post_pool":
        acts = maxpool2x2(acts[None])[0][0]
    return acts, trace.outputs["fc1"][0]


def cam_for_image(net: Network, image: GrayImage, class_name: str = "GSW", tap: str = "pre_pool") -> Heatmap:
    acts, hidden = tap_activations(net, image, tap)
    return class_activation_map(acts, cam_weights(net, hidden, class_name))


def render_cam(net: Network, image: GrayImage, class_name="GSW", tap="pre_pool", alpha=0.4) -> tuple[Heatmap, RgbImage]:
    h = normalize_and_resize(cam_for_image(net, image, class_name, tap), (image.width, image.height))
    return h, superimpose(image, h, alpha)


_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
}
GLYPH_W, GLYPH_H = 5, 7


def text_mask(text: str) -> np.ndarray:
    """Boolean bitmap of ``text`` in the 5x7 font, one blank column between glyphs."""
    cols = []
    for i, ch in enumerate(text):
        if ch not in _GLYPHS:
            raise ValueError(f"no glyph for {ch!r}")
        g = np.array([[c == "1" for c in row] for row in _GLYPHS[ch]])
        if i:
            cols.append(np.zeros((GLYPH_H, 1), dtype=bool))
        cols.append(g)
    return np.hstack(cols) if cols else np.zeros((GLYPH_H, 0), dtype=bool)


def box_pixels(det: Detection, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds ``(x0, y0, x1, y1)`` covered by a box, clipped to the image."""
    b = det.box
    x0 = max(0, math.floor(b.xmin))
    y0 = max(0, math.floor(b.ymin))
    x1 = min(width - 1, math.ceil(b.xmax) - 1)
    y1 = min(height - 1, math.ceil(b.ymax) - 1)
    return x0, y0, max(x0, x1), max(y0, y1)


def perimeter_mask(bounds: tuple[int, int, int, int], width: int, height: int, thickness: int = BOX_WIDTH) -> np.ndarray:
    x0, y0, x1, y1 = bounds
    yy, xx = np.mgrid[0:height, 0:width]
    inside = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    edge = np.minimum.reduce([xx - x0, x1 - xx, yy - y0, y1 - yy]) < thickness
    return inside & edge


def render_overlay(
    image: GrayImage, detections: Sequence[Detection], score_threshold: float = 0.5, label: bool = True
) -> RgbImage:
    """Green 2-px boxes for detections at or above the threshold, score printed above each box."""
    out = np.repeat(image.pixels[:, :, None], 3, axis=2).copy()
    h, w = image.height, image.width
    kept = sorted((d for d in detections if d.score >= score_threshold), key=lambda d: (-d.score, d.box.as_tuple()))
    for d in kept:
        bounds = box_pixels(d, w, h)
        out[perimeter_mask(bounds, w, h)] = BOX_COLOR
        if not label:
            continue
        glyphs = text_mask(f"{d.score:.2f}")
        x0, y0, _, y1 = bounds
        ty = y0 - GLYPH_H - 1 if y0 - GLYPH_H - 1 >= 0 else y1 + 2
        for r, c in zip(*np.nonzero(glyphs)):
            py, px = ty + r, x0 + c
            if 0 <= py < h and 0 <= px < w:
                out[py, px] = BOX_COLOR
    return RgbImage(out)
