"""Readers and writers for every on-disk format the pipeline touches."""

from gswxray.formats.detections import read_detections, write_detections
from gswxray.formats.errors import CorruptRecordError, FormatError
from gswxray.formats.images import load_image, save_image, save_rgb
from gswxray.formats.records import (
    crc32c,
    mask_crc,
    masked_crc32c,
    read_examples,
    read_records,
    unmask_crc,
    write_examples,
    write_records,
)
from gswxray.formats.tabular import CSV_HEADER, from_csv, to_csv
from gswxray.formats.voc import VocDocument, VocObject, from_voc, read_voc, to_voc, write_voc
from gswxray.formats.weights import load_weights, network_from_weights, read_weights, save_weights

__all__ = [
    "CSV_HEADER",
    "CorruptRecordError",
    "FormatError",
    "VocDocument",
    "VocObject",
    "crc32c",
    "from_csv",
    "from_voc",
    "load_image",
    "load_weights",
    "mask_crc",
    "masked_crc32c",
    "network_from_weights",
    "read_detections",
    "read_examples",
    "read_records",
    "read_voc",
    "read_weights",
    "save_image",
    "save_rgb",
    "save_weights",
    "to_csv",
    "to_voc",
    "unmask_crc",
    "write_detections",
    "write_examples",
    "write_records",
    "write_voc",
]
