"""Pascal VOC XML annotations, as written by LabelImg-style labeling tools."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from gswxray.core import AnnotatedImage, BoundingBox, LabeledObject
from gswxray.formats.errors import FormatError


@dataclass(frozen=True)
class VocObject:
    name: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    pose: str = "Unspecified"
    truncated: int = 0
    difficult: int = 0


@dataclass(frozen=True)
class VocDocument:
    filename: str
    width: int
    height: int
    depth: int = 1
    folder: str = ""
    path: str = ""
    objects: tuple[VocObject, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        validate(self)


def validate(doc: VocDocument) -> None:
    for name in ("width", "height", "depth"):
        if getattr(doc, name) <= 0:
            raise FormatError(f"must be positive, got {getattr(doc, name)}", f"size/{name}")
    for i, obj in enumerate(doc.objects):
        where = f"object[{i}]"
        if not obj.name:
            raise FormatError("empty class name", f"{where}/name")
        if not 0 <= obj.xmin < obj.xmax <= doc.width:
            bad = "xmin" if obj.xmin < 0 or obj.xmin >= obj.xmax else "xmax"
            raise FormatError(
                f"x range [{obj.xmin}, {obj.xmax}] outside image width {doc.width}", f"{where}/bndbox/{bad}"
            )
        if not 0 <= obj.ymin < obj.ymax <= doc.height:
            bad = "ymin" if obj.ymin < 0 or obj.ymin >= obj.ymax else "ymax"
            raise FormatError(
                f"y range [{obj.ymin}, {obj.ymax}] outside image height {doc.height}", f"{where}/bndbox/{bad}"
            )


def _text(parent: ET.Element, tag: str, where: str, default: str | None = None) -> str:
    node = parent.find(tag)
    if node is None or node.text is None:
        if default is not None:
            return default
        raise FormatError("missing required element", f"{where}/{tag}")
    return node.text.strip()


def _int(parent: ET.Element, tag: str, where: str, default: int | None = None) -> int:
    raw = _text(parent, tag, where, None if default is None else str(default))
    try:
        return int(raw)
    except ValueError:
        raise FormatError(f"expected an integer, got {raw!r}", f"{where}/{tag}") from None


def read_voc(data: bytes | str) -> VocDocument:
    """Parse a VOC annotation. Unknown elements are ignored."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise FormatError(f"malformed XML: {exc}") from None
    if root.tag != "annotation":
        raise FormatError(f"root element is <{root.tag}>", "annotation")
    size = root.find("size")
    if size is None:
        raise FormatError("missing required element", "annotation/size")
    objects = []
    for i, node in enumerate(root.findall("object")):
        where = f"object[{i}]"
        bnd = node.find("bndbox")
        if bnd is None:
            raise FormatError("missing required element", f"{where}/bndbox")
        objects.append(
            VocObject(
                name=_text(node, "name", where),
                pose=_text(node, "pose", where, "Unspecified"),
                truncated=_int(node, "truncated", where, 0),
                difficult=_int(node, "difficult", where, 0),
                xmin=_int(bnd, "xmin", f"{where}/bndbox"),
                ymin=_int(bnd, "ymin", f"{where}/bndbox"),
                xmax=_int(bnd, "xmax", f"{where}/bndbox"),
                ymax=_int(bnd, "ymax", f"{where}/bndbox"),
            )
        )
    return VocDocument(
        folder=_text(root, "folder", "annotation", ""),
        filename=_text(root, "filename", "annotation"),
        path=_text(root, "path", "annotation", ""),
        width=_int(size, "width", "annotation/size"),
        height=_int(size, "height", "annotation/size"),
        depth=_int(size, "depth", "annotation/size"),
        objects=tuple(objects),
    )


def write_voc(doc: VocDocument) -> bytes:
    validate(doc)
    root = ET.Element("annotation")

    def sub(parent, tag, value):
        el = ET.SubElement(parent, tag)
        el.text = str(value)
        return el

    sub(root, "folder", doc.folder)
    sub(root, "filename", doc.filename)
    sub(root, "path", doc.path)
    source = ET.SubElement(root, "source")
    sub(source, "database", "Unknown")
    size = ET.SubElement(root, "size")
    sub(size, "width", doc.width)
    sub(size, "height", doc.height)
    sub(size, "depth", doc.depth)
    sub(root, "segmented", 0)
    for obj in doc.objects:
        node = ET.SubElement(root, "object")
        sub(node, "name", obj.name)
        sub(node, "pose", obj.pose)
        sub(node, "truncated", obj.truncated)
        sub(node, "difficult", obj.difficult)
        bnd = ET.SubElement(node, "bndbox")
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            sub(bnd, tag, getattr(obj, tag))
    ET.indent(root, space="\t")
    return (ET.tostring(root, encoding="unicode") + "\n").encode("utf-8")


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def to_voc(ann: AnnotatedImage, folder: str = "", filename: str | None = None, path: str | None = None) -> VocDocument:
    """Convert in-memory annotations to a VOC document, rounding coordinates half-up."""
    filename = filename or f"{ann.id}.png"
    objects = []
    for obj in ann.objects:
        b = obj.box
        objects.append(
            VocObject(
                name=obj.class_name,
                xmin=_round_half_up(b.xmin),
                ymin=_round_half_up(b.ymin),
                xmax=_round_half_up(b.xmax),
                ymax=_round_half_up(b.ymax),
                difficult=int(obj.difficult),
            )
        )
    return VocDocument(
        folder=folder,
        filename=filename,
        path=path if path is not None else (ann.image_path or filename),
        width=ann.width,
        height=ann.height,
        depth=1,
        objects=tuple(objects),
    )


def from_voc(doc: VocDocument, split: str = "train", image_id: str | None = None) -> AnnotatedImage:
    if image_id is None:
        image_id = doc.filename.rsplit(".", 1)[0]
    objects = tuple(
        LabeledObject(o.name, BoundingBox(o.xmin, o.ymin, o.xmax, o.ymax), bool(o.difficult)) for o in doc.objects
    )
    return AnnotatedImage(
        id=image_id,
        width=doc.width,
        height=doc.height,
        objects=objects,
        split=split,
        image_path=doc.path or doc.filename,
    )
