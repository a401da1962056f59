"""SSD default boxes: generation, ground-truth matching, offset coding and NMS.

All anchor geometry is in normalized image coordinates ([0, 1] on both axes).
"""

from __future__ import annotations

import io
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gswxray.core import BoundingBox, Detection, clip_box, iou, iou_matrix

ASPECT_RATIOS = (1.0, 2.0, 3.0, 1.0 / 2.0, 1.0 / 3.0)
BOXES_PER_CELL = len(ASPECT_RATIOS) + 1
SSD300_GRIDS = (38, 19, 10, 5, 3, 1)
BACKGROUND = -1


@dataclass(frozen=True)
class FeatureMapSpec:
    grid: tuple[int, int]  # (rows, cols)
    scale: float
    next_scale: float

    def __post_init__(self) -> None:
        rows, cols = self.grid
        if rows <= 0 or cols <= 0:
            raise ValueError("grid dimensions must be positive")
        for s in (self.scale, self.next_scale):
            if not 0.0 < s <= 1.0:
                raise ValueError(f"scale {s} outside (0, 1]")


def default_box_dims(scale: float, aspect_ratio: float) -> tuple[float, float]:
    """``(w, h) = (scale * sqrt(ar), scale / sqrt(ar))``."""
    if scale <= 0 or aspect_ratio <= 0:
        raise ValueError("scale and aspect ratio must be positive")
    r = math.sqrt(aspect_ratio)
    return scale * r, scale / r


def extra_box_scale(scale_k: float, scale_k_plus_1: float) -> float:
    """Scale of the additional square box: geometric mean of this layer's and the next layer's scale."""
    if scale_k <= 0 or scale_k_plus_1 <= 0:
        raise ValueError("scales must be positive")
    return math.sqrt(scale_k * scale_k_plus_1)


def linear_scales(n_layers: int, s_min: float = 0.2, s_max: float = 0.9) -> list[float]:
    if n_layers <= 0:
        raise ValueError("need at least one layer")
    if n_layers == 1:
        return [s_min]
    return [s_min + (s_max - s_min) * k / (n_layers - 1) for k in range(n_layers)]


def feature_map_specs(grids: Sequence, scales: Sequence[float] | None = None, last_next: float = 1.0) -> list[FeatureMapSpec]:
    """Build specs for square (int) or ``(rows, cols)`` grids with the linear scale schedule by default."""
    grids = [(g, g) if isinstance(g, int) else tuple(g) for g in grids]
    scales = list(scales) if scales is not None else linear_scales(len(grids))
    if len(scales) != len(grids):
        raise ValueError("one scale per grid required")
    nexts = scales[1:] + [last_next]
    return [FeatureMapSpec(g, s, n) for g, s, n in zip(grids, scales, nexts)]


@dataclass(frozen=True, eq=False)
class AnchorSet:
    boxes: np.ndarray  # (N, 4) corner form, normalized
    layer: np.ndarray
    row: np.ndarray
    col: np.ndarray
    aspect_ratio: np.ndarray
    scale: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, i: int) -> BoundingBox:
        return BoundingBox(*self.boxes[i])

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("layer,row,col,ar,scale,xmin,ymin,xmax,ymax\n")
        for i in range(len(self)):
            b = [repr(float(v)) for v in self.boxes[i]]
            buf.write(
                f"{int(self.layer[i])},{int(self.row[i])},{int(self.col[i])},"
                f"{float(self.aspect_ratio[i])!r},{float(self.scale[i])!r},{','.join(b)}\n"
            )
        return buf.getvalue().encode("utf-8")


def generate_anchors(specs: Sequence[FeatureMapSpec]) -> AnchorSet:
    """Six boxes per cell: the five aspect ratios at the layer scale plus one
    square box at the extra scale. Boxes are left unclipped."""
    if not specs:
        raise ValueError("need at least one feature map")
    boxes, layer, rows_, cols_, ars, scales = [], [], [], [], [], []
    for k, spec in enumerate(specs):
        rows, cols = spec.grid
        shapes = [(ar, spec.scale, *default_box_dims(spec.scale, ar)) for ar in ASPECT_RATIOS]
        extra = extra_box_scale(spec.scale, spec.next_scale)
        shapes.append((1.0, extra, *default_box_dims(extra, 1.0)))
        for i in range(rows):
            cy = (i + 0.5) / rows
            for j in range(cols):
                cx = (j + 0.5) / cols
                for ar, s, w, h in shapes:
                    boxes.append((cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
                    layer.append(k)
                    rows_.append(i)
                    cols_.append(j)
                    ars.append(ar)
                    scales.append(s)
    return AnchorSet(
        boxes=np.array(boxes, dtype=np.float64),
        layer=np.array(layer),
        row=np.array(rows_),
        col=np.array(cols_),
        aspect_ratio=np.array(ars),
        scale=np.array(scales),
    )


def encode_box(gt: BoundingBox, anchor: BoundingBox) -> tuple[float, float, float, float]:
    """Center/size offsets of ``gt`` relative to ``anchor``."""
    gx, gy = gt.center
    ax, ay = anchor.center
    return (
        (gx - ax) / anchor.width,
        (gy - ay) / anchor.height,
        math.log(gt.width / anchor.width),
        math.log(gt.height / anchor.height),
    )


def decode_box(anchor: BoundingBox, offsets, clip: bool = True) -> BoundingBox:
    """Inverse of :func:`encode_box`; the result is clipped to the unit square."""
    tx, ty, tw, th = (float(v) for v in offsets)
    if not all(math.isfinite(v) for v in (tx, ty, tw, th)):
        raise ValueError("offsets must be finite")
    ax, ay = anchor.center
    cx = ax + tx * anchor.width
    cy = ay + ty * anchor.height
    w = anchor.width * math.exp(tw)
    h = anchor.height * math.exp(th)
    box = BoundingBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    return clip_box(box, 1.0, 1.0) if clip else box


@dataclass(frozen=True, eq=False)
class MatchResult:
    assignment: np.ndarray  # (N,) gt index or BACKGROUND
    offsets: np.ndarray  # (N, 4); zero rows for background
    ious: np.ndarray  # (N,) IoU with the assigned gt, 0 for background

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.assignment != BACKGROUND)


def match_anchors(
    anchors: AnchorSet, gts: Sequence[BoundingBox], threshold: float = 0.5, clip: bool = False
) -> MatchResult:
    """Assign ground truths to anchors.

    First every gt (in index order) claims its best-IoU anchor among those
    not yet claimed, ties to the lowest anchor index, so each gt gets at least
    one anchor. Then each remaining anchor goes to its highest-IoU gt (ties to
    the lowest gt index) if that IoU reaches ``threshold``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    n = len(anchors)
    assignment = np.full(n, BACKGROUND, dtype=np.int64)
    offsets = np.zeros((n, 4))
    ious = np.zeros(n)
    if not gts:
        return MatchResult(assignment, offsets, ious)
    abox = np.clip(anchors.boxes, 0.0, 1.0) if clip else anchors.boxes
    gt_arr = np.array([g.as_tuple() for g in gts], dtype=np.float64)
    overlap = iou_matrix(abox, gt_arr)  # (N, G)

    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gts)):
        col = np.where(claimed, -np.inf, overlap[:, g])
        a = int(np.argmax(col))
        if claimed[a]:
            break  # more gts than anchors
        claimed[a] = True
        assignment[a] = g
    best_gt = overlap.argmax(axis=1)
    best_iou = overlap[np.arange(n), best_gt]
    extra = (~claimed) & (best_iou >= threshold)
    assignment[extra] = best_gt[extra]

    for a in np.flatnonzero(assignment != BACKGROUND):
        g = assignment[a]
        anchor = BoundingBox(*abox[a])
        offsets[a] = encode_box(gts[g], anchor)
        ious[a] = overlap[a, g]
    return MatchResult(assignment, offsets, ious)


def _det_key(d: Detection):
    b = d.box
    return (-d.score, b.xmin, b.ymin, b.xmax, b.ymax, d.image_id, d.class_name)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5, score_threshold: float = 0.0) -> list[Detection]:
    """Greedy per-image, per-class suppression.

    Detections scoring below ``score_threshold`` are dropped; a survivor
    suppresses later boxes with IoU >= ``iou_threshold``. Equal scores are
    ordered by lower xmin, then lower ymin. Output is sorted by descending score.
    """
    if not (0.0 <= iou_threshold <= 1.0 and 0.0 <= score_threshold <= 1.0):
        raise ValueError("thresholds must be in [0, 1]")
    groups: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in dets:
        if d.score >= score_threshold:
            groups[(d.image_id, d.class_name)].append(d)
    kept: list[Detection] = []
    for key in sorted(groups):
        cands = sorted(groups[key], key=_det_key)
        survivors: list[Detection] = []
        for d in cands:
            if all(iou(d.box, s.box) < iou_threshold for s in survivors):
                survivors.append(d)
        kept.extend(survivors)
    return sorted(kept, key=_det_key)
