"""Line-delimited detections: ``image_id class score xmin ymin xmax ymax``."""

from __future__ import annotations

from typing import Iterable

from gswxray.core import BoundingBox, Detection
from gswxray.formats.errors import FormatError
from gswxray.formats.tabular import format_number


def write_detections(dets: Iterable[Detection]) -> bytes:
    lines = []
    for d in dets:
        if any(ch.isspace() for ch in d.image_id + d.class_name):
            raise FormatError(f"whitespace in identifier {d.image_id!r}/{d.class_name!r}")
        fields = [d.image_id, d.class_name, repr(float(d.score)), *(format_number(v) for v in d.box.as_tuple())]
        lines.append(" ".join(fields) + "\n")
    return "".join(lines).encode("utf-8")


def read_detections(data: bytes | str) -> list[Detection]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    dets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"expected 7 fields, got {len(parts)}", f"line {lineno}")
        try:
            score = float(parts[2])
            box = BoundingBox(*(float(v) for v in parts[3:]))
            dets.append(Detection(parts[0], parts[1], score, box))
        except ValueError as exc:
            raise FormatError(str(exc), f"line {lineno}") from None
    return dets
