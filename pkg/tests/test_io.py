import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from aquacurate.errors import FormatError
from aquacurate.io import (
    read_depth,
    read_mask,
    read_normal_png,
    read_pfm,
    read_png16,
    read_rgb,
    write_normal_png,
    write_pfm,
    write_png16,
    write_rgb,
)

F32 = np.finfo(np.float32)


def test_pfm_header_layout(tmp_path):
    g = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    p = tmp_path / "a.pfm"
    write_pfm(p, g)
    raw = p.read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first
    assert np.frombuffer(raw[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_big_endian_read(tmp_path):
    g = np.arange(6, dtype=np.float32).reshape(2, 3) - 2.5
    p = tmp_path / "be.pfm"
    p.write_bytes(b"Pf\n3 2\n1.0\n" + np.flipud(g).astype(">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(p), g)
    write_pfm(tmp_path / "be2.pfm", g, little_endian=False)
    assert (tmp_path / "be2.pfm").read_bytes() == p.read_bytes()


def test_pfm_colour(tmp_path):
    g = np.random.default_rng(0).random((3, 4, 3)).astype(np.float32)
    write_pfm(tmp_path / "c.pfm", g)
    np.testing.assert_array_equal(read_pfm(tmp_path / "c.pfm"), g)


@pytest.mark.parametrize("payload", [b"P5\n1 1\n255\n\x00", b"Pf\n2 x\n-1\n", b"Pf\n2 2\n-1\n\x00\x00"])
def test_pfm_malformed(tmp_path, payload):
    p = tmp_path / "bad.pfm"
    p.write_bytes(payload)
    with pytest.raises(FormatError):
        read_pfm(p)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)),
       st.booleans())
def test_pfm_roundtrip_bit_exact(tmp_path_factory, g, little):
    p = tmp_path_factory.mktemp("pfm") / "g.pfm"
    write_pfm(p, g, little_endian=little)
    back = read_pfm(p)
    assert back.dtype == np.float32
    assert back.tobytes() == g.tobytes()


def test_png16_roundtrip_exact(tmp_path):
    q = np.array([[0, 1, 2], [32767, 65534, 65535]], dtype=np.uint16)
    write_png16(tmp_path / "a.png", q / 65535.0)
    back = read_png16(tmp_path / "a.png")
    np.testing.assert_array_equal(np.rint(back.astype(np.float64) * 65535).astype(np.uint16), q)
    write_png16(tmp_path / "b.png", back)
    assert np.array_equal(np.array(Image.open(tmp_path / "a.png")), np.array(Image.open(tmp_path / "b.png")))


def test_png16_reads_8bit_gray(tmp_path):
    Image.fromarray(np.array([[0, 255]], dtype=np.uint8)).save(tmp_path / "g.png")
    np.testing.assert_array_equal(read_png16(tmp_path / "g.png"), [[0.0, 1.0]])


def test_png16_rejects_rgb(tmp_path):
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "c.png")
    with pytest.raises(FormatError):
        read_png16(tmp_path / "c.png")


def test_read_depth_dispatch(tmp_path):
    g = np.full((2, 2), 0.5, dtype=np.float32)
    write_pfm(tmp_path / "d.pfm", g)
    np.testing.assert_array_equal(read_depth(tmp_path / "d.pfm"), g)
    with pytest.raises(FormatError):
        read_depth(tmp_path / "d.exr")
    write_pfm(tmp_path / "n.pfm", np.array([[np.nan]], dtype=np.float32))
    with pytest.raises(FormatError):
        read_depth(tmp_path / "n.pfm")


def test_unreadable_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        read_rgb(tmp_path / "x.png")


def test_rgb_and_normal_roundtrip(tmp_path):
    rgb = np.random.default_rng(2).integers(0, 256, (4, 4, 3)) / 255.0
    write_rgb(tmp_path / "r.png", rgb)
    np.testing.assert_allclose(read_rgb(tmp_path / "r.png"), rgb, atol=1e-7)
    n = np.zeros((2, 2, 3))
    n[..., 2] = 1.0
    write_normal_png(tmp_path / "n.png", n)
    np.testing.assert_allclose(read_normal_png(tmp_path / "n.png"), n, atol=1e-2)


def test_read_mask(tmp_path):
    Image.fromarray(np.array([[0, 3], [255, 0]], dtype=np.uint8)).save(tmp_path / "m.png")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), [[False, True], [True, False]])
