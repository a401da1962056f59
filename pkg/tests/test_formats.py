import io
import random
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from gswxray.core import AnnotatedImage, BoundingBox, Detection, GrayImage, LabeledObject
from gswxray.formats import (
    CSV_HEADER,
    CorruptRecordError,
    FormatError,
    VocDocument,
    VocObject,
    crc32c,
    from_csv,
    from_voc,
    load_image,
    load_weights,
    mask_crc,
    masked_crc32c,
    network_from_weights,
    read_detections,
    read_examples,
    read_records,
    read_voc,
    read_weights,
    save_image,
    save_weights,
    to_csv,
    to_voc,
    unmask_crc,
    write_detections,
    write_examples,
    write_records,
    write_voc,
)
from gswxray.nn import build_classifier
from corpus import annotated
from oracles import crc32c_bitwise, frame_reference, mask_reference

# ---------------------------------------------------------------- CRC and framing


def test_crc32c_check_value():
    assert crc32c(b"123456789") == 0xE3069283
    assert crc32c_bitwise(b"123456789") == 0xE3069283


@given(st.binary(max_size=300))
def test_crc32c_matches_bitwise_reference(data):
    assert crc32c(data) == crc32c_bitwise(data)


@given(st.binary(max_size=64), st.binary(max_size=64))
def test_crc32c_continues(a, b):
    assert crc32c(b, crc32c(a)) == crc32c(a + b)


@given(st.integers(0, 2**32 - 1))
def test_mask_matches_reference_and_inverts(c):
    assert mask_crc(c) == mask_reference(c)
    assert unmask_crc(mask_crc(c)) == c


@given(st.lists(st.binary(max_size=200), max_size=6))
def test_frames_match_reference_layout(payloads):
    data = write_records(payloads)
    assert data == b"".join(frame_reference(p) for p in payloads)
    assert len(data) == sum(16 + len(p) for p in payloads)
    assert read_records(data) == payloads


def test_empty_stream():
    assert write_records([]) == b""
    assert read_records(b"") == []


def test_write_records_to_stream():
    buf = io.BytesIO()
    out = write_records([b"ab"], buf)
    assert buf.getvalue() == out
    assert read_records(io.BytesIO(out)) == [b"ab"]


def test_known_frame_bytes():
    frame = write_records([b"hello"])
    assert frame[:8] == struct.pack("<Q", 5)
    assert struct.unpack("<I", frame[8:12])[0] == masked_crc32c(frame[:8])
    assert frame[12:17] == b"hello"
    assert struct.unpack("<I", frame[17:])[0] == mask_reference(crc32c_bitwise(b"hello"))


def test_tensorflow_writer_agrees(tmp_path):
    tf = pytest.importorskip("tensorflow")
    path = str(tmp_path / "x.record")
    with tf.io.TFRecordWriter(path) as w:
        for p in (b"a", b"", b"xyz" * 50):
            w.write(p)
    assert open(path, "rb").read() == write_records([b"a", b"", b"xyz" * 50])


def test_single_bit_flips_always_detected():
    data = write_examples(annotated(20))
    rnd = random.Random(1234)
    for _ in range(1000):
        pos = rnd.randrange(len(data) * 8)
        buf = bytearray(data)
        buf[pos // 8] ^= 1 << (pos % 8)
        with pytest.raises(CorruptRecordError):
            read_records(bytes(buf))


def test_truncation_detected_with_frame_index():
    data = write_records([b"one", b"two"])
    with pytest.raises(CorruptRecordError, match="frame 1"):
        read_records(data[:-1])
    with pytest.raises(CorruptRecordError, match="truncated"):
        read_records(data[:5])


def test_record_examples_round_trip():
    anns = annotated(100)
    data = write_examples(anns)
    back = read_examples(data)
    assert [(a.id, a.width, a.height, a.objects, a.image_path) for a in back] == [
        (a.id, a.width, a.height, a.objects, a.image_path) for a in anns
    ]
    assert write_examples(back) == data


def test_record_embedded_pixels():
    anns = annotated(10)
    back = read_examples(write_examples(anns, embed=True))
    assert all(a.image == b.image for a, b in zip(anns, back))


# ---------------------------------------------------------------- VOC


def test_voc_minimal_round_trip():
    doc = VocDocument("a.png", 64, 48, objects=[VocObject("bullet", 10, 20, 30, 40)])
    back = read_voc(write_voc(doc))
    assert back == doc
    assert write_voc(back) == write_voc(doc)


def test_voc_zero_objects():
    doc = read_voc(write_voc(VocDocument("n.png", 8, 8)))
    assert doc.objects == ()


def test_voc_bounds_error_names_element():
    xml = write_voc(VocDocument("a.png", 64, 48, objects=[VocObject("bullet", 10, 20, 30, 40)]))
    bad = xml.replace(b"<xmax>30</xmax>", b"<xmax>65</xmax>")
    with pytest.raises(FormatError, match="bndbox/xmax"):
        read_voc(bad)


def test_voc_missing_and_non_integer():
    xml = write_voc(VocDocument("a.png", 64, 48, objects=[VocObject("bullet", 10, 20, 30, 40)]))
    with pytest.raises(FormatError, match="bndbox/ymin"):
        read_voc(xml.replace(b"<ymin>20</ymin>", b""))
    with pytest.raises(FormatError, match="integer"):
        read_voc(xml.replace(b"<ymin>20</ymin>", b"<ymin>2.5</ymin>"))
    with pytest.raises(FormatError, match="size"):
        read_voc(b"<annotation><filename>a</filename></annotation>")
    with pytest.raises(FormatError, match="malformed"):
        read_voc(b"<annotation>")


def test_voc_ignores_unknown_elements():
    xml = write_voc(VocDocument("a.png", 64, 48, objects=[VocObject("bullet", 1, 2, 3, 4)]))
    extra = xml.replace(b"<segmented>", b"<owner><name>x</name></owner><segmented>")
    assert read_voc(extra) == read_voc(xml)
    assert b"owner" not in write_voc(read_voc(extra))


def test_voc_rounds_half_up():
    ann = AnnotatedImage("x", 20, 20, [LabeledObject("bullet", BoundingBox(1.5, 2.49, 3.5, 4.5))])
    o = to_voc(ann).objects[0]
    assert (o.xmin, o.ymin, o.xmax, o.ymax) == (2, 2, 4, 5)


def test_voc_corpus_round_trip():
    for a in annotated(100):
        back = from_voc(read_voc(write_voc(to_voc(a))), split=a.split)
        # generated boxes sit on the integer lattice, so the integer schema loses nothing
        assert back.objects == a.objects
        assert (back.id, back.width, back.height, back.image_path) == (a.id, a.width, a.height, a.image_path)


# ---------------------------------------------------------------- CSV


def test_csv_counting():
    objs = [LabeledObject("bullet", BoundingBox(1, 1, 4, 4)), LabeledObject("bullet", BoundingBox(5, 5, 9, 9))]
    text = to_csv([AnnotatedImage("a", 10, 10, objs)]).decode()
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1:] == ["a.png,10,10,bullet,1,1,4,4", "a.png,10,10,bullet,5,5,9,9"]
    assert to_csv([]).decode() == ",".join(CSV_HEADER) + "\n"
    assert to_csv([AnnotatedImage("n", 10, 10)]) == to_csv([])


def test_csv_row_order_is_stable():
    anns = annotated(40)
    assert to_csv(anns) == to_csv(list(reversed(anns)))
    rows = [r.split(",") for r in to_csv(anns).decode().splitlines()[1:]]
    keys = [(r[0], float(r[4]), float(r[5])) for r in rows]
    assert keys == sorted(keys)


def _multiset(anns):
    return Counter((a.id, a.width, a.height, o.class_name, o.box) for a in anns for o in a.objects)


def test_csv_corpus_round_trip():
    anns = annotated(100)
    back = from_csv(to_csv(anns))
    assert _multiset(back) == _multiset(anns)
    assert to_csv(back) == to_csv(anns)


def test_csv_errors_carry_line_number():
    head = ",".join(CSV_HEADER) + "\n"
    with pytest.raises(FormatError, match="line 2"):
        from_csv(head + "a.png,10,10,bullet,1,1,4\n")
    with pytest.raises(FormatError, match="line 3"):
        from_csv(head + "a.png,10,10,bullet,1,1,4,4\na.png,10,10,bullet,1,x,4,4\n")
    with pytest.raises(FormatError, match="line 1"):
        from_csv("file,w,h\n")


@given(st.floats(0, 1000, allow_nan=False, allow_infinity=False), st.floats(0.001, 50))
def test_csv_numbers_exact(x, w):
    ann = AnnotatedImage("a", 2000, 2000, [LabeledObject("b", BoundingBox(x, x, x + w, x + w))])
    assert from_csv(to_csv([ann]))[0].objects == ann.objects


# ---------------------------------------------------------------- images


def test_image_round_trip_small():
    img = GrayImage.from_list(2, 2, [0, 255, 128, 7])
    assert load_image(save_image(img)) == img


def test_random_images_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(100):
        img = GrayImage(rng.integers(0, 256, size=(64, 64), dtype=np.uint8))
        assert load_image(save_image(img)) == img


def test_image_rejects_color_and_16_bit(tmp_path):
    buf = io.BytesIO()
    Image.new("RGB", (3, 3)).save(buf, format="PNG")
    with pytest.raises(FormatError, match="unsupported: not grayscale"):
        load_image(buf.getvalue())
    buf = io.BytesIO()
    Image.fromarray(np.full((3, 3), 4000, dtype=np.uint16)).save(buf, format="PNG")
    with pytest.raises(FormatError, match="bit depth"):
        load_image(buf.getvalue())
    with pytest.raises(FormatError):
        load_image(b"not an image")


def test_save_image_to_path(tmp_path):
    img = GrayImage.from_list(3, 1, [1, 2, 3])
    save_image(img, tmp_path / "x.png")
    assert load_image(tmp_path / "x.png") == img


# ---------------------------------------------------------------- detections


def test_detections_round_trip():
    dets = [
        Detection("img1", "bullet", 0.9, BoundingBox(1, 2, 3, 4)),
        Detection("img2", "bullet", 1 / 3, BoundingBox(0.5, 0.25, 10.125, 7)),
    ]
    text = write_detections(dets)
    assert text.splitlines()[0] == b"img1 bullet 0.9 1 2 3 4"
    assert read_detections(text) == dets


def test_detections_errors():
    with pytest.raises(FormatError, match="line 2"):
        read_detections("# comment\na b 0.5 1 2 3\n")
    with pytest.raises(FormatError, match="line 1"):
        read_detections("a b 1.5 1 2 3 4\n")
    with pytest.raises(FormatError, match="line 1"):
        read_detections("a b 0.5 3 2 1 4\n")
    with pytest.raises(FormatError):
        write_detections([Detection("a b", "c", 0.5, BoundingBox(0, 0, 1, 1))])


# ---------------------------------------------------------------- weights


def _same_params(a, b):
    pa, pb = a.parameters(), b.parameters()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) and pa[k].dtype == pb[k].dtype for k in pa)


def test_weights_round_trip_bit_identical():
    net = build_classifier((16, 16), seed=3)
    data = save_weights(net)
    other = build_classifier((16, 16), seed=4)
    load_weights(other, data)
    assert _same_params(net, other)
    assert _same_params(net, network_from_weights(data))
    assert save_weights(network_from_weights(data)) == data


def test_weights_shape_mismatch_names_layer():
    net = build_classifier((16, 16), seed=3)
    other = build_classifier((16, 16), widths=(8, 16, 24), seed=3)
    with pytest.raises(FormatError, match="conv3"):
        load_weights(other, save_weights(net))


def test_weights_unknown_layer_and_non_finite():
    net = build_classifier((16, 16), seed=3)
    data = save_weights(net).replace(b'"name":"fc2","params"', b'"name":"fc9","params"')
    with pytest.raises(FormatError, match="unknown layer"):
        load_weights(net, data)
    arch, params = read_weights(save_weights(net))
    net.layer("fc2").params["b"] = np.array([np.nan])
    with pytest.raises(FormatError, match="non-finite"):
        save_weights(net)
    bad = save_weights(build_classifier((16, 16), seed=3)).replace(b'"b":{"shape":[1],"values":[0.0]}', b'"b":{"shape":[1],"values":[NaN]}')
    with pytest.raises(FormatError, match="non-finite"):
        read_weights(bad)


def test_partial_weights():
    net = build_classifier((16, 16), seed=3)
    data = save_weights(net, layers={"conv1", "conv2"})
    other = build_classifier((16, 16), seed=9)
    with pytest.raises(FormatError, match="lacks"):
        load_weights(other, data)
    load_weights(other, data, partial=True)
    assert np.array_equal(other.layer("conv1").params["W"], net.layer("conv1").params["W"])
    assert not np.array_equal(other.layer("conv3").params["W"], net.layer("conv3").params["W"])
