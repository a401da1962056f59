"""Replicated-radiograph synthesis: bullet sprites composited onto backgrounds.

Bullets are radiopaque, so compositing uses a max rule and never darkens a
pixel. Each image draws from its own RNG stream keyed on (seed, index), which
makes a dataset independent of generation order and thread count.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gswxray.core import SPLITS, AnnotatedImage, BoundingBox, DegenerateBoxError, GrayImage, LabeledObject, clip_box, iou

log = logging.getLogger(__name__)

DIFFICULT_CONTRAST = 0.3
MAX_OVERLAP_IOU = 0.2
MAX_PLACEMENT_ATTEMPTS = 1000
ORGANS = ("chest", "leg", "head", "abdomen")


class PlacementError(RuntimeError):
    pass


def _round_half_up(a):
    return np.floor(np.asarray(a, dtype=np.float64) + 0.5)


def image_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index, stream]))


@dataclass(frozen=True, eq=False)
class Sprite:
    intensity: np.ndarray  # (h, w) in [0, 255]
    mask: np.ndarray  # (h, w) coverage in [0, 1]

    def __post_init__(self) -> None:
        inten = np.asarray(self.intensity, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.float64)
        if inten.ndim != 2 or inten.shape != mask.shape:
            raise ValueError("intensity and mask must be matching 2-D arrays")
        if inten.min() < 0 or inten.max() > 255 or mask.min() < 0 or mask.max() > 1:
            raise ValueError("sprite values out of range")
        if not np.any(mask > 0):
            raise ValueError("sprite mask is empty")
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "mask", mask)

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]


def make_bullet_sprite(rng: np.random.Generator, length: int, caliber: int) -> Sprite:
    """A round-nosed slug, 4x supersampled for edge coverage, in one of four orientations."""
    ss = 4
    h, w = length * ss, caliber * ss
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = w / 2.0
    nose = r * rng.uniform(1.0, 1.8)
    cx = w / 2.0
    in_body = yy >= nose
    # elliptical nose cap
    in_nose = ((xx - cx) / r) ** 2 + ((yy - nose) / nose) ** 2 <= 1.0
    cover = (in_body | in_nose).astype(np.float64)
    mask = cover.reshape(length, ss, caliber, ss).mean(axis=(1, 3))
    shade = 255.0 - rng.uniform(0, 25) * np.abs(np.linspace(-1, 1, caliber))[None, :] ** 2
    intensity = np.broadcast_to(shade, mask.shape).copy()
    k = int(rng.integers(4))
    return Sprite(np.rot90(intensity, k).copy(), np.rot90(mask, k).copy())


def bullet_sprites(n: int, seed: int, length=(7, 12), caliber=(3, 6)) -> list[Sprite]:
    out = []
    for i in range(n):
        rng = image_rng(seed, i, stream=7)
        out.append(
            make_bullet_sprite(rng, int(rng.integers(length[0], length[1] + 1)), int(rng.integers(caliber[0], caliber[1] + 1)))
        )
    return out


def make_background(width: int, height: int, rng: np.random.Generator, organ: str = "chest") -> GrayImage:
    """Plausible soft-tissue/bone intensity field, roughly within [20, 100]."""
    yy, xx = np.mgrid[0:height, 0:width]
    u = (xx + 0.5) / width
    v = (yy + 0.5) / height
    base = 45 + 15 * v + rng.normal(0, 1.0)
    if organ == "chest":
        field_ = base.copy()
        for side in (-1, 1):
            cx = 0.5 + side * rng.uniform(0.2, 0.25)
            lung = ((u - cx) / rng.uniform(0.16, 0.2)) ** 2 + ((v - 0.48) / rng.uniform(0.32, 0.38)) ** 2 <= 1
            field_ = np.where(lung, field_ - 18, field_)
        spine = np.exp(-(((u - 0.5) / 0.05) ** 2))
        field_ += 35 * spine
        freq = rng.uniform(5.0, 7.0)
        ribs = np.clip(np.sin(2 * math.pi * (freq * v + 2.0 * (u - 0.5) ** 2) + rng.uniform(0, 6.3)), 0, None)
        field_ += 12 * ribs * (spine < 0.5)
    elif organ == "leg":
        field_ = base - 10
        tissue = np.abs(u - 0.5) < rng.uniform(0.25, 0.32)
        bone = np.abs(u - 0.5 - rng.uniform(-0.04, 0.04)) < rng.uniform(0.07, 0.1)
        field_ = field_ + 20 * tissue + 30 * bone
    elif organ == "head":
        rr = np.sqrt(((u - 0.5) / 0.42) ** 2 + ((v - 0.5) / 0.46) ** 2)
        field_ = base - 15 + 25 * (rr < 1) + 30 * ((rr > 0.88) & (rr < 1))
    elif organ == "abdomen":
        field_ = base + 8 * np.sin(2 * math.pi * rng.uniform(1, 3) * u) * np.cos(2 * math.pi * rng.uniform(1, 3) * v)
        field_ += 30 * np.exp(-(((u - 0.5) / 0.06) ** 2))
    else:
        raise ValueError(f"unknown organ {organ!r}; expected one of {ORGANS}")
    field_ = field_ + rng.normal(0, 2.0, size=field_.shape)
    return GrayImage(np.clip(_round_half_up(field_), 0, 255).astype(np.uint8))


def composite(
    background: GrayImage, sprite: Sprite, x: int, y: int, contrast: float, margin: int = 0
) -> tuple[GrayImage, BoundingBox]:
    """Max-composite ``sprite`` at top-left ``(x, y)``; returns the image and the sprite box."""
    if not 0.0 < contrast <= 1.0:
        raise ValueError(f"contrast {contrast} outside (0, 1]")
    x, y = int(x), int(y)
    if (
        x < margin
        or y < margin
        or x + sprite.width > background.width - margin
        or y + sprite.height > background.height - margin
    ):
        raise PlacementError(
            f"sprite {sprite.width}x{sprite.height} at ({x}, {y}) out of bounds for "
            f"{background.width}x{background.height} with margin {margin}"
        )
    out = np.array(background.pixels, dtype=np.float64)
    stamp = _round_half_up(contrast * sprite.intensity * sprite.mask)
    region = out[y : y + sprite.height, x : x + sprite.width]
    out[y : y + sprite.height, x : x + sprite.width] = np.maximum(region, stamp)
    return GrayImage(out.astype(np.uint8)), BoundingBox(x, y, x + sprite.width, y + sprite.height)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    target_size: tuple[int, int] | None = None  # (w, h); None keeps the source size
    rescale: float = 1.0
    shear_range: float = 0.0
    zoom_range: float = 0.0
    horizontal_flip: float = 0.0  # probability

    def __post_init__(self) -> None:
        if self.target_size is not None and min(self.target_size) <= 0:
            raise ValueError("target size must be positive")
        if not 0.0 <= self.zoom_range < 1.0:
            raise ValueError("zoom_range must be in [0, 1)")
        if not math.isfinite(self.shear_range):
            raise ValueError("shear_range must be finite")
        if not 0.0 <= self.horizontal_flip <= 1.0:
            raise ValueError("horizontal_flip is a probability")


def _translate(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _affine_pair(src_w, src_h, params: AugmentParams, zoom, shear, flip):
    """Forward (source -> target) matrix and its analytic inverse."""
    tw, th = params.target_size or (src_w, src_h)
    cx, cy = tw / 2.0, th / 2.0
    sx, sy = tw / src_w, th / src_h
    mats = [
        (np.diag([sx, sy, 1.0]), np.diag([1.0 / sx, 1.0 / sy, 1.0])),
        (
            _translate(cx, cy) @ np.diag([zoom, zoom, 1.0]) @ _translate(-cx, -cy),
            _translate(cx, cy) @ np.diag([1.0 / zoom, 1.0 / zoom, 1.0]) @ _translate(-cx, -cy),
        ),
        (
            _translate(cx, cy) @ np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ _translate(-cx, -cy),
            _translate(cx, cy) @ np.array([[1.0, -shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ _translate(-cx, -cy),
        ),
    ]
    if flip:
        f = np.array([[-1.0, 0.0, float(tw)], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        mats.append((f, f))
    fwd = np.eye(3)
    inv = np.eye(3)
    for m, mi in mats:
        if not np.array_equal(m, np.eye(3)):
            fwd = m @ fwd
            inv = inv @ mi
    return fwd, inv, (tw, th)


def _bilinear(src: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample at continuous pixel-index coordinates; zero outside the source extent."""
    h, w = src.shape
    inside = (px >= -0.5) & (px <= w - 0.5) & (py >= -0.5) & (py <= h - 0.5)
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    val = (
        src[y0, x0] * (1 - fx) * (1 - fy)
        + src[y0, x1] * fx * (1 - fy)
        + src[y1, x0] * (1 - fx) * fy
        + src[y1, x1] * fx * fy
    )
    return np.where(inside, val, 0.0)


def augment(image: GrayImage, boxes: Sequence[BoundingBox], params: AugmentParams, seed: int):
    """Apply one sampled affine transform to pixels and boxes.

    Returns ``(image, kept_boxes, dropped_indices)``; a box that degenerates
    after transform and clipping is dropped and its index reported.
    """
    rng = np.random.default_rng(seed)
    zoom = rng.uniform(1.0 - params.zoom_range, 1.0 + params.zoom_range)
    shear = rng.uniform(-params.shear_range, params.shear_range)
    flip = rng.random() < params.horizontal_flip
    if params.zoom_range == 0.0:
        zoom = 1.0
    if params.shear_range == 0.0:
        shear = 0.0

    fwd, inv, (tw, th) = _affine_pair(image.width, image.height, params, zoom, shear, flip)
    vv, uu = np.mgrid[0:th, 0:tw]
    tx = uu + 0.5
    ty = vv + 0.5
    sx = inv[0, 0] * tx + inv[0, 1] * ty + inv[0, 2]
    sy = inv[1, 0] * tx + inv[1, 1] * ty + inv[1, 2]
    vals = _bilinear(image.pixels.astype(np.float64), sx - 0.5, sy - 0.5) * params.rescale
    out = GrayImage(np.clip(_round_half_up(vals), 0, 255).astype(np.uint8))

    kept, dropped = [], []
    for i, b in enumerate(boxes):
        corners = np.array(
            [[b.xmin, b.ymin, 1.0], [b.xmax, b.ymin, 1.0], [b.xmin, b.ymax, 1.0], [b.xmax, b.ymax, 1.0]]
        )
        mapped = corners @ fwd.T
        try:
            hull = BoundingBox(mapped[:, 0].min(), mapped[:, 1].min(), mapped[:, 0].max(), mapped[:, 1].max())
            kept.append(clip_box(hull, tw, th))
        except DegenerateBoxError:
            dropped.append(i)
    if dropped:
        log.info("augment dropped %d degenerate boxes: %s", len(dropped), dropped)
    return out, kept, dropped


# --------------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 100
    bullets_per_image: tuple[int, int] = (1, 3)
    contrast: tuple[float, float] = (0.3, 1.0)
    placement_margin: int = 2
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 42
    normal_fraction: float = 0.0  # share of images left bullet-free ("Normal" class)
    class_name: str = "bullet"

    def __post_init__(self) -> None:
        lo, hi = self.bullets_per_image
        if lo > hi or lo < 0:
            raise ValueError("bullets_per_image must be a non-empty range of counts")
        clo, chi = self.contrast
        if not 0.0 < clo <= chi <= 1.0:
            raise ValueError("contrast must be a non-empty range within (0, 1]")
        if any(r < 0 for r in self.split_ratios) or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")
        if not 0.0 <= self.normal_fraction <= 1.0:
            raise ValueError("normal_fraction must be in [0, 1]")
        if self.n_images < 0:
            raise ValueError("n_images must be non-negative")


def split(ids: Sequence, ratios: Sequence[float], seed: int) -> tuple[list, list, list]:
    """Seeded shuffle, floor-allocated val/test sizes, remainder to train."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("need three ratios summing to 1")
    ids = list(ids)
    order = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x5917])).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def held_out_sprites(sprites: Sequence[Sprite]) -> tuple[list[Sprite], list[Sprite]]:
    """Partition sprites into (train/val pool, test pool); the last fifth is reserved for test."""
    sprites = list(sprites)
    if len(sprites) < 2:
        return sprites, sprites
    k = max(1, len(sprites) // 5)
    return sprites[:-k], sprites[-k:]


@dataclass(frozen=True)
class SyntheticImage:
    annotated: AnnotatedImage
    contrasts: tuple[float, ...]
    background_index: int


@dataclass
class Manifest:
    images: list[SyntheticImage] = field(default_factory=list)

    def split_images(self, name: str) -> list[AnnotatedImage]:
        return [s.annotated for s in self.images if s.annotated.split == name]

    def to_text(self) -> str:
        lines = []
        for s in self.images:
            a = s.annotated
            contrasts = ",".join(f"{c:.6f}" for c in s.contrasts) or "-"
            lines.append(f"{a.id} {a.split} {len(a.objects)} {contrasts}\n")
        return "".join(lines)


def _image_id(i: int) -> str:
    return f"img{i:05d}"


def synthesize_image(
    index: int,
    split_name: str,
    backgrounds: Sequence[GrayImage],
    sprites: Sequence[Sprite],
    config: SynthConfig,
) -> SyntheticImage:
    rng = image_rng(config.seed, index)
    bg_index = int(rng.integers(len(backgrounds)))
    background = backgrounds[bg_index]
    normal = rng.random() < config.normal_fraction
    lo, hi = config.bullets_per_image
    count = 0 if normal else int(rng.integers(lo, hi + 1))

    image = background
    placed: list[BoundingBox] = []
    objects: list[LabeledObject] = []
    contrasts: list[float] = []
    attempts = 0
    m = config.placement_margin
    while len(placed) < count:
        sprite = sprites[int(rng.integers(len(sprites)))]
        contrast = float(rng.uniform(*config.contrast))
        xmax = background.width - m - sprite.width
        ymax = background.height - m - sprite.height
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"could not place {count} bullets in {_image_id(index)} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        if xmax < m or ymax < m:
            continue
        x = int(rng.integers(m, xmax + 1))
        y = int(rng.integers(m, ymax + 1))
        box = BoundingBox(x, y, x + sprite.width, y + sprite.height)
        if any(iou(box, other) >= MAX_OVERLAP_IOU for other in placed):
            continue
        image, box = composite(image, sprite, x, y, contrast, m)
        footprint = (slice(y, y + sprite.height), slice(x, x + sprite.width))
        visible = bool(np.any(image.pixels[footprint] != background.pixels[footprint]))
        placed.append(box)
        contrasts.append(contrast)
        objects.append(LabeledObject(config.class_name, box, difficult=contrast < DIFFICULT_CONTRAST or not visible))
    image_id = _image_id(index)
    ann = AnnotatedImage(
        id=image_id,
        width=image.width,
        height=image.height,
        objects=tuple(objects),
        split=split_name,
        image=image,
        image_path=f"{split_name}/{image_id}.png",
    )
    return SyntheticImage(ann, tuple(contrasts), bg_index)


def default_backgrounds(n: int, width: int, height: int, seed: int, organs: Sequence[str] = ("chest",)) -> list[GrayImage]:
    return [make_background(width, height, image_rng(seed, i, stream=3), organs[i % len(organs)]) for i in range(n)]


def synthesize_dataset(
    backgrounds: Sequence[GrayImage],
    sprites: Sequence[Sprite],
    config: SynthConfig,
    out_dir: str | os.PathLike | None = None,
    threads: int = 1,
    test_backgrounds: Sequence[GrayImage] | None = None,
) -> Manifest:
    """Generate ``config.n_images`` annotated images and optionally write the dataset tree.

    Test images draw from a held-out sprite pool (and ``test_backgrounds``
    when given) so they are unseen during training.
    """
    if not backgrounds or not sprites:
        raise ValueError("need at least one background and one sprite")
    ids = list(range(config.n_images))
    train_ids, val_ids, test_ids = split(ids, config.split_ratios, config.seed)
    assignment = {i: "train" for i in train_ids}
    assignment.update({i: "val" for i in val_ids})
    assignment.update({i: "test" for i in test_ids})
    fit_pool, test_pool = held_out_sprites(sprites)

    def make(i: int) -> SyntheticImage:
        name = assignment[i]
        pool = test_pool if name == "test" else fit_pool
        bgs = test_backgrounds if (name == "test" and test_backgrounds) else backgrounds
        return synthesize_image(i, name, bgs, pool, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            images = list(ex.map(make, ids))
    else:
        images = [make(i) for i in ids]
    manifest = Manifest(images)
    if out_dir is not None:
        write_dataset(manifest, out_dir, threads=threads)
    return manifest


def write_dataset(manifest: Manifest, out_dir: str | os.PathLike, threads: int = 1) -> None:
    from gswxray.formats import save_image, to_csv, to_voc, write_examples, write_voc

    root = Path(out_dir)
    for name in SPLITS:
        (root / name).mkdir(parents=True, exist_ok=True)

    def write_one(s: SyntheticImage) -> None:
        a = s.annotated
        save_image(a.image, root / a.split / f"{a.id}.png")
        doc = to_voc(a, folder=a.split, filename=f"{a.id}.png", path=a.image_path)
        (root / a.split / f"{a.id}.xml").write_bytes(write_voc(doc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(write_one, manifest.images))
    else:
        for s in manifest.images:
            write_one(s)
    for name in SPLITS:
        anns = manifest.split_images(name)
        (root / name / "annotations.csv").write_bytes(to_csv(anns))
        (root / f"{name}.record").write_bytes(write_examples(anns))
    (root / "manifest.txt").write_text(manifest.to_text())


# --------------------------------------------------------------------------- pretext data


def blob_count_set(n: int, size: tuple[int, int], seed: int, max_blobs: int = 3):
    """Pretext images: 0..max_blobs bright elliptical blobs over radiograph-like backgrounds.

    Returns ``(uint8 images (n, h, w), blob counts)``.
    """
    w, h = size
    images, labels = [], []
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for i in range(n):
        rng = image_rng(seed, i, stream=11)
        organ = ORGANS[int(rng.integers(len(ORGANS)))]
        field_ = make_background(w, h, rng, organ).pixels.astype(np.float64)
        k = int(rng.integers(0, max_blobs + 1))
        for _ in range(k):
            cx, cy = rng.uniform(4, w - 4), rng.uniform(4, h - 4)
            sx, sy = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0)
            peak = rng.uniform(110, 255)
            blob = peak * np.exp(-(((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2) / 2)
            field_ = np.maximum(field_, blob)
        images.append(np.clip(_round_half_up(field_), 0, 255).astype(np.uint8))
        labels.append(k)
    return np.stack(images), np.asarray(labels, dtype=np.int64)
