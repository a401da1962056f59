"""Length-prefixed, CRC-guarded binary record container.

Each frame is::

    uint64 length            (little-endian)
    uint32 masked_crc32c(length bytes)
    byte   payload[length]
    uint32 masked_crc32c(payload)

This is the framing used by TFRecord files. Payloads here are compact JSON
documents describing one annotated example.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from gswxray.core import AnnotatedImage, BoundingBox, GrayImage, LabeledObject
from gswxray.formats.errors import CorruptRecordError, FormatError

MASK_DELTA = 0xA282EAD8
_CASTAGNOLI_REFLECTED = 0x82F63B78
HEADER_SIZE = 12
FOOTER_SIZE = 4


def _make_table() -> tuple[int, ...]:
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ _CASTAGNOLI_REFLECTED if c & 1 else c >> 1
        table.append(c)
    return tuple(table)


_TABLE = _make_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC-32C (Castagnoli) of ``data``; ``crc`` continues a previous value."""
    table = _TABLE
    crc ^= 0xFFFFFFFF
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def mask_crc(crc: int) -> int:
    return (((crc >> 15) | (crc << 17)) + MASK_DELTA) & 0xFFFFFFFF


def unmask_crc(masked: int) -> int:
    rot = (masked - MASK_DELTA) & 0xFFFFFFFF
    return ((rot >> 17) | (rot << 15)) & 0xFFFFFFFF


def masked_crc32c(data: bytes) -> int:
    return mask_crc(crc32c(data))


def encode_frame(payload: bytes) -> bytes:
    length = struct.pack("<Q", len(payload))
    return b"".join(
        (
            length,
            struct.pack("<I", masked_crc32c(length)),
            payload,
            struct.pack("<I", masked_crc32c(payload)),
        )
    )


def write_records(payloads: Iterable[bytes], stream: BinaryIO | None = None) -> bytes:
    """Frame every payload. Returns the bytes, also writing them to ``stream`` if given."""
    out = b"".join(encode_frame(bytes(p)) for p in payloads)
    if stream is not None:
        stream.write(out)
    return out


def iter_records(data: bytes) -> Iterator[bytes]:
    view = memoryview(data)
    pos = 0
    index = 0
    while pos < len(view):
        where = f"frame {index}"
        if len(view) - pos < HEADER_SIZE:
            raise CorruptRecordError("truncated frame header", where)
        length_bytes = bytes(view[pos : pos + 8])
        (length_crc,) = struct.unpack("<I", view[pos + 8 : pos + 12])
        if masked_crc32c(length_bytes) != length_crc:
            raise CorruptRecordError("length CRC mismatch", where)
        (length,) = struct.unpack("<Q", length_bytes)
        start = pos + HEADER_SIZE
        end = start + length
        if end + FOOTER_SIZE > len(view):
            raise CorruptRecordError("truncated frame payload", where)
        payload = bytes(view[start:end])
        (payload_crc,) = struct.unpack("<I", view[end : end + FOOTER_SIZE])
        if masked_crc32c(payload) != payload_crc:
            raise CorruptRecordError("payload CRC mismatch", where)
        yield payload
        pos = end + FOOTER_SIZE
        index += 1


def read_records(data: bytes | BinaryIO) -> list[bytes]:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        data = data.read()
    return list(iter_records(bytes(data)))


def example_to_payload(ann: AnnotatedImage, embed: bool = False) -> bytes:
    """Serialize one example; with ``embed`` the raw pixels travel base64-encoded."""
    doc = {
        "id": ann.id,
        "width": ann.width,
        "height": ann.height,
        "image_path": ann.image_path,
        "objects": [
            {
                "class": o.class_name,
                "xmin": o.box.xmin,
                "ymin": o.box.ymin,
                "xmax": o.box.xmax,
                "ymax": o.box.ymax,
                "difficult": o.difficult,
            }
            for o in ann.objects
        ],
    }
    if embed:
        if ann.image is None:
            raise FormatError("cannot embed pixels: image not loaded", ann.id)
        doc["pixels"] = base64.b64encode(ann.image.pixels.tobytes()).decode("ascii")
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def payload_to_example(payload: bytes, split: str = "train") -> AnnotatedImage:
    try:
        doc = json.loads(payload.decode("utf-8"))
        objects = tuple(
            LabeledObject(o["class"], BoundingBox(o["xmin"], o["ymin"], o["xmax"], o["ymax"]), bool(o.get("difficult", False)))
            for o in doc["objects"]
        )
        image = None
        if "pixels" in doc:
            raw = np.frombuffer(base64.b64decode(doc["pixels"]), dtype=np.uint8)
            image = GrayImage(raw.reshape(doc["height"], doc["width"]))
        return AnnotatedImage(
            id=doc["id"],
            width=doc["width"],
            height=doc["height"],
            objects=objects,
            split=split,
            image=image,
            image_path=doc.get("image_path"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad example payload: {exc}") from None


def write_examples(examples: Iterable[AnnotatedImage], embed: bool = False) -> bytes:
    return write_records(example_to_payload(e, embed) for e in examples)


def read_examples(data: bytes, split: str = "train") -> list[AnnotatedImage]:
    return [payload_to_example(p, split) for p in iter_records(data)]
