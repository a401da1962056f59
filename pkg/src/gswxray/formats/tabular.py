"""Flat CSV annotations: one row per labeled object."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from typing import Iterable

from gswxray.core import AnnotatedImage, BoundingBox, LabeledObject
from gswxray.formats.errors import FormatError

CSV_HEADER = ("filename", "width", "height", "class", "xmin", "ymin", "xmax", "ymax")


def format_number(v: float) -> str:
    """Shortest text that parses back to exactly ``v``; integral values print without a point."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_csv(images: Iterable[AnnotatedImage]) -> bytes:
    rows = []
    for ann in images:
        filename = _filename(ann)
        for obj in ann.objects:
            b = obj.box
            rows.append((filename, ann.width, ann.height, obj.class_name, b.xmin, b.ymin, b.xmax, b.ymax))
    rows.sort(key=lambda r: (r[0], r[4], r[5], r[6], r[7], r[3]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r[0], r[1], r[2], r[3], *(format_number(v) for v in r[4:])])
    return buf.getvalue().encode("utf-8")


def _filename(ann: AnnotatedImage) -> str:
    if ann.image_path:
        return ann.image_path.replace("\\", "/").rsplit("/", 1)[-1]
    return f"{ann.id}.png"


def from_csv(data: bytes | str, split: str = "train") -> list[AnnotatedImage]:
    """Parse CSV rows and group them into one AnnotatedImage per filename (first-seen order)."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty document, header required", "line 1") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise FormatError(f"unexpected header {header}", "line 1")
    groups: "OrderedDict[str, dict]" = OrderedDict()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise FormatError(f"expected {len(CSV_HEADER)} columns, got {len(row)}", f"line {lineno}")
        filename, width, height, cls = row[0], row[1], row[2], row[3]
        try:
            w, h = int(width), int(height)
            coords = [float(v) for v in row[4:]]
            box = BoundingBox(*coords)
        except ValueError as exc:
            raise FormatError(f"unparsable row: {exc}", f"line {lineno}") from None
        g = groups.setdefault(filename, {"width": w, "height": h, "objects": []})
        if (g["width"], g["height"]) != (w, h):
            raise FormatError(f"size of {filename} disagrees with earlier rows", f"line {lineno}")
        g["objects"].append(LabeledObject(cls, box))
    images = []
    for filename, g in groups.items():
        try:
            images.append(
                AnnotatedImage(
                    id=filename.rsplit(".", 1)[0],
                    width=g["width"],
                    height=g["height"],
                    objects=tuple(g["objects"]),
                    split=split,
                    image_path=filename,
                )
            )
        except ValueError as exc:
            raise FormatError(str(exc), filename) from None
    return images
