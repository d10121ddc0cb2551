import numpy as np
import pytest

from multidepth import formats
from multidepth.core import CameraIntrinsics, DepthMap, ImageTensor, Rng
from multidepth.formats import FormatError, MaskSet
from multidepth.geometry import PointCloud


# ---------------------------------------------------------------- PNG images

def test_png8_value_mapping(tmp_path):
    arr = np.zeros((2, 2, 3), dtype=np.uint8)
    arr[0, 0] = 255
    import cv2
    cv2.imwrite(str(tmp_path / "x.png"), arr[:, :, ::-1])
    img = formats.load_image_png(tmp_path / "x.png")
    assert img.data[0, 0, 0] == 1.0
    assert img.data[0, 1, 1] == 0.0


def test_png16_gray_value_mapping(tmp_path):
    arr = np.full((2, 2), 32768, dtype=np.uint16)
    import cv2
    cv2.imwrite(str(tmp_path / "x.png"), arr)
    img = formats.load_image_png(tmp_path / "x.png")
    np.testing.assert_allclose(img.data, 32768.0 / 65535.0, rtol=1e-7)
    assert img.channels == 1


def test_png_roundtrip_8bit(tmp_path):
    rng = Rng(0)
    img = ImageTensor((rng.integers(0, 256, (3, 5, 7)) / 255.0).astype(np.float32))
    formats.save_image_png(img, tmp_path / "x.png", bit_depth=8)
    back = formats.load_image_png(tmp_path / "x.png")
    np.testing.assert_array_equal(back.data, img.data)


def test_png_missing_file_errors(tmp_path):
    with pytest.raises(FormatError):
        formats.load_image_png(tmp_path / "missing.png")


# ---------------------------------------------------------------- depth

def test_depth_png16_mm_conversion(tmp_path):
    mm = np.array([[1500, 0], [250, 65535]], dtype=np.uint16)
    import cv2
    cv2.imwrite(str(tmp_path / "d.png"), mm)
    d = formats.load_depth(tmp_path / "d.png", "millimeter_png16")
    assert d.depth[0, 0] == np.float32(1.5)
    assert not d.valid[0, 1]
    assert d.valid[1, 0] and abs(d.depth[1, 0] - 0.25) < 1e-7


def test_depth_png16_roundtrip(tmp_path):
    rng = Rng(1)
    mm = rng.integers(1, 5000, (8, 8)).astype(np.uint16)
    mm[0, 0] = 0
    import cv2
    cv2.imwrite(str(tmp_path / "d.png"), mm)
    d = formats.load_depth(tmp_path / "d.png")
    formats.save_depth(d, tmp_path / "d2.png")
    back = cv2.imread(str(tmp_path / "d2.png"), cv2.IMREAD_UNCHANGED)
    np.testing.assert_array_equal(back, mm)


def test_pfm_roundtrip_bit_exact(tmp_path):
    rng = Rng(2)
    depth = rng.uniform(0.5, 5.0, (6, 9)).astype(np.float32)
    d = DepthMap.full(depth)
    d.valid[2, 3] = False
    formats.save_depth(d, tmp_path / "d.pfm", "pfm_meters")
    back = formats.load_depth(tmp_path / "d.pfm", "pfm_meters")
    np.testing.assert_array_equal(back.depth[back.valid], d.depth[d.valid])
    np.testing.assert_array_equal(back.valid, d.valid)
    # the header written is negative-scale little-endian
    header = (tmp_path / "d.pfm").read_bytes().split(b"\n", 3)
    assert header[0] == b"Pf" and float(header[2]) < 0


def test_pfm_negative_depths_marked_invalid(tmp_path):
    data = np.array([[1.0, -2.0], [3.0, 4.0]], dtype=np.float32)
    formats.save_pfm(data, tmp_path / "d.pfm")
    d = formats.load_depth(tmp_path / "d.pfm", "pfm_meters")
    assert not d.valid[0, 1]
    assert d.valid.sum() == 3


def test_pfm_scale_magnitude_applied(tmp_path):
    data = np.array([[2.0]], dtype=np.float32)
    raw = b"Pf\n1 1\n-0.5\n" + data.astype("<f4").tobytes()
    (tmp_path / "s.pfm").write_bytes(raw)
    out = formats.load_pfm(tmp_path / "s.pfm")
    assert out[0, 0] == np.float32(1.0)


def test_pfm_truncated_errors(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"Pf\n4 4\n-1.0\n\x00\x00")
    with pytest.raises(FormatError):
        formats.load_pfm(tmp_path / "bad.pfm")


# ---------------------------------------------------------------- intrinsics

def test_intrinsics_roundtrip_and_tolerant_reader(tmp_path):
    (tmp_path / "k.json").write_text('{"fx":500,"fy":500,"cx":256,"cy":256,"model":"pinhole"}')
    k = formats.load_intrinsics(tmp_path / "k.json")
    assert (k.fx, k.fy, k.cx, k.cy) == (500, 500, 256, 256)
    formats.save_intrinsics(k, tmp_path / "k2.json")
    k2 = formats.load_intrinsics(tmp_path / "k2.json")
    assert k2 == k


def test_intrinsics_missing_field(tmp_path):
    (tmp_path / "k.json").write_text('{"fx":500,"cx":256,"cy":256}')
    with pytest.raises(FormatError):
        formats.load_intrinsics(tmp_path / "k.json")


def test_intrinsics_nonpositive_focal(tmp_path):
    (tmp_path / "k.json").write_text('{"fx":-1,"fy":500,"cx":0,"cy":0}')
    with pytest.raises(FormatError):
        formats.load_intrinsics(tmp_path / "k.json")


# ---------------------------------------------------------------- PLY

def test_ply_empty_cloud_header(tmp_path):
    formats.save_ply(PointCloud(np.zeros((0, 3))), tmp_path / "e.ply", binary=False)
    text = (tmp_path / "e.ply").read_text()
    assert "element vertex 0" in text


def test_ply_ascii_single_point_exact_line(tmp_path):
    pc = PointCloud(np.array([[0.0, 0.0, 1.0]]), np.array([[255, 0, 0]], dtype=np.uint8))
    formats.save_ply(pc, tmp_path / "p.ply", binary=False)
    body = (tmp_path / "p.ply").read_text().split("end_header\n", 1)[1].strip()
    assert body == "0 0 1 255 0 0"


def test_ply_binary_roundtrip_1000_points(tmp_path):
    rng = Rng(3)
    pts = rng.normal(0, 2.0, (1000, 3))
    cols = rng.integers(0, 256, (1000, 3)).astype(np.uint8)
    formats.save_ply(PointCloud(pts, cols), tmp_path / "r.ply", binary=True)
    back = formats.load_ply(tmp_path / "r.ply")
    np.testing.assert_array_equal(back.points, pts.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(back.colors, cols)


# ---------------------------------------------------------------- weights

def test_weights_empty_roundtrip(tmp_path):
    formats.save_weights({}, tmp_path / "w.mdpt")
    assert formats.load_weights(tmp_path / "w.mdpt") == {}


def test_weights_single_tensor_roundtrip(tmp_path):
    table = {"a": np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)}
    formats.save_weights(table, tmp_path / "w.mdpt")
    back = formats.load_weights(tmp_path / "w.mdpt")
    np.testing.assert_array_equal(back["a"], table["a"])


def test_weights_randomized_table_roundtrip_and_rewrite(tmp_path):
    rng = Rng(4)
    table = {}
    for i in range(50):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
        table[f"t{i:02d}"] = rng.normal(0, 1, shape).astype(np.float32)
    formats.save_weights(table, tmp_path / "w.mdpt")
    back = formats.load_weights(tmp_path / "w.mdpt")
    assert list(back) == list(table)
    for k in table:
        np.testing.assert_array_equal(back[k], table[k])
    formats.save_weights(back, tmp_path / "w2.mdpt")
    assert (tmp_path / "w.mdpt").read_bytes() == (tmp_path / "w2.mdpt").read_bytes()


def test_weights_bad_magic_and_version(tmp_path):
    (tmp_path / "bad.mdpt").write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(FormatError):
        formats.load_weights(tmp_path / "bad.mdpt")
    import struct
    (tmp_path / "v9.mdpt").write_bytes(b"MDPT" + struct.pack("<II", 9, 0))
    with pytest.raises(FormatError):
        formats.load_weights(tmp_path / "v9.mdpt")


# ---------------------------------------------------------------- masks

def _write_indexed(path, labels):
    from PIL import Image
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette([0, 0, 0, 255, 0, 0, 0, 255, 0] + [0] * 759)
    img.save(path)


def test_masks_indexed_png_two_labels(tmp_path):
    labels = np.array([[0, 1, 1], [2, 2, 0]])
    _write_indexed(tmp_path / "m.png", labels)
    ms = formats.load_masks(tmp_path / "m.png")
    assert len(ms) == 2
    names = [n for n, _ in ms.masks]
    assert names == ["label_001", "label_002"]


def test_masks_all_zero_indexed_is_empty(tmp_path):
    _write_indexed(tmp_path / "m.png", np.zeros((3, 3), dtype=np.uint8))
    ms = formats.load_masks(tmp_path / "m.png")
    assert len(ms) == 0


def test_masks_union_equals_nonzero_pixels(tmp_path):
    rng = Rng(5)
    labels = rng.integers(0, 4, (16, 16))
    _write_indexed(tmp_path / "m.png", labels)
    ms = formats.load_masks(tmp_path / "m.png")
    union = np.zeros((16, 16), dtype=bool)
    for _, m in ms.masks:
        union |= m
    np.testing.assert_array_equal(union, labels > 0)


def test_masks_directory_of_binaries(tmp_path):
    from PIL import Image
    d = tmp_path / "masks"
    d.mkdir()
    m0 = np.zeros((4, 4), dtype=np.uint8)
    m0[:2] = 255
    Image.fromarray(m0, mode="L").save(d / "a.png")
    m1 = np.zeros((4, 4), dtype=np.uint8)
    m1[2:] = 255
    Image.fromarray(m1, mode="L").save(d / "b.png")
    ms = formats.load_masks(d)
    assert [n for n, _ in ms.masks] == ["a", "b"]
    assert ms.masks[0][1].sum() == 8


def test_masks_dimension_mismatch(tmp_path):
    from PIL import Image
    d = tmp_path / "masks"
    d.mkdir()
    Image.fromarray(np.full((4, 4), 255, dtype=np.uint8), mode="L").save(d / "a.png")
    Image.fromarray(np.full((5, 5), 255, dtype=np.uint8), mode="L").save(d / "b.png")
    with pytest.raises(FormatError):
        formats.load_masks(d)


def test_maskset_save_load_roundtrip(tmp_path):
    masks = [("x", np.eye(4, dtype=bool)), ("y", ~np.eye(4, dtype=bool))]
    formats.save_masks(MaskSet(4, 4, masks), tmp_path / "out")
    back = formats.load_masks(tmp_path / "out")
    assert [n for n, _ in back.masks] == ["x", "y"]
    np.testing.assert_array_equal(back.masks[0][1], masks[0][1])
