"""File codecs: PFM, 16-bit grayscale PNG, 8-bit RGB PNG and normal maps."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError
from .grid_core import decode_normals, encode_normals

DEPTH_EXTENSIONS = (".pfm", ".png")
RGB_EXTENSIONS = (".png", ".jpg", ".jpeg")

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array, top row first.

    ``Pf`` files give ``(H, W)``, ``PF`` files ``(H, W, 3)``.  A negative
    scale marks little-endian data.
    """
    path = Path(path)
    with open(path, "rb") as f:
        tag = f.readline().rstrip()
        if tag == b"Pf":
            channels = 1
        elif tag == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: not a PFM file (header {tag[:8]!r})")
        m = _PFM_DIMS.match(f.readline())
        if not m:
            raise FormatError(f"{path}: malformed PFM dimension line")
        width, height = int(m.group(1)), int(m.group(2))
        try:
            scale = float(f.readline().decode("ascii").strip())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM scale line") from exc
        if scale == 0:
            raise FormatError(f"{path}: PFM scale must be nonzero")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        count = width * height * channels
        buf = f.read(count * 4)
    if len(buf) != count * 4:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(buf, dtype=dtype).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    # rows are stored bottom-up
    return np.ascontiguousarray(np.flipud(data.reshape(shape)))


def write_pfm(path, grid, little_endian: bool = True) -> None:
    a = np.asarray(grid, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"cannot write shape {a.shape} as PFM")
    h, w = a.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = b"-1.0" if little_endian else b"1.0"
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}".encode() + b"\n" + scale + b"\n")
        f.write(np.flipud(a).astype(dtype).tobytes())


def _open_image(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    return img


def read_png16(path) -> np.ndarray:
    """Grayscale PNG as float32 in [0, 1] (16-bit: v/65535, 8-bit: v/255)."""
    img = _open_image(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        a = np.array(img)
        if a.min() < 0 or a.max() > 65535:
            raise FormatError(f"{path}: 32-bit integer PNG out of 16-bit range")
        return (a.astype(np.float64) / 65535.0).astype(np.float32)
    if img.mode == "L":
        return (np.array(img).astype(np.float64) / 255.0).astype(np.float32)
    raise FormatError(f"{path}: expected a grayscale PNG, got mode {img.mode}")


def write_png16(path, grid) -> None:
    """Quantise a [0, 1] grid to 16 bits and write it as grayscale PNG."""
    a = np.asarray(grid, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError(f"PNG16 needs a single-channel grid, got shape {a.shape}")
    q = np.rint(np.clip(a, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_rgb_u8(path) -> np.ndarray:
    img = _open_image(path)
    if img.mode not in ("RGB", "RGBA", "L", "P"):
        raise FormatError(f"{path}: expected an 8-bit colour image, got mode {img.mode}")
    return np.array(img.convert("RGB"))


def read_rgb(path) -> np.ndarray:
    """8-bit colour image as float32 ``(H, W, 3)`` in [0, 1]."""
    return (read_rgb_u8(path).astype(np.float64) / 255.0).astype(np.float32)


def write_rgb(path, grid) -> None:
    a = np.asarray(grid, dtype=np.float64)
    q = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def read_normal_png(path) -> np.ndarray:
    img = _open_image(path)
    if img.mode != "RGB":
        raise FormatError(f"{path}: normal map must be 8-bit RGB, got mode {img.mode}")
    return decode_normals(np.array(img))


def write_normal_png(path, normals) -> None:
    Image.fromarray(encode_normals(normals)).save(path, format="PNG")


def read_depth(path) -> np.ndarray:
    """Depth/disparity file by extension (``.pfm`` or grayscale ``.png``)."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".pfm":
        d = read_pfm(path)
        if d.ndim != 2:
            raise FormatError(f"{path}: depth PFM must be single-channel")
        if not np.all(np.isfinite(d)):
            raise FormatError(f"{path}: depth contains NaN or Inf")
        return d
    if ext == ".png":
        return read_png16(path)
    raise FormatError(f"{path}: unsupported depth extension {ext!r}")


def read_mask(path) -> np.ndarray:
    """Validity mask: any nonzero pixel is valid."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path) != 0
    img = _open_image(path)
    a = np.array(img)
    if a.ndim == 3:
        a = a.max(axis=2)
    return a != 0
