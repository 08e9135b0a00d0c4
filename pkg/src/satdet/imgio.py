"""16-bit grayscale image I/O (PNG and binary PGM) and bilinear resizing."""

import os

import numpy as np
from PIL import Image

from .errors import DataError


def to_uint16(img: np.ndarray) -> np.ndarray:
    """Round and saturate a float image into 16-bit counts."""
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16)


def _as_2d_uint16(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.uint16)


def write_png16(path, img: np.ndarray) -> None:
    Image.fromarray(_as_2d_uint16(img)).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected single-channel image, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 65535:
            arr = arr.astype(np.uint16)
        else:
            raise DataError(f"{path}: expected 16-bit grayscale, got dtype {arr.dtype}")
    return arr


def write_pgm16(path, img: np.ndarray) -> None:
    """Binary PGM (P5), maxval 65535. Sample bytes are big-endian per the format."""
    arr = _as_2d_uint16(img)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(arr.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise DataError(f"{path}: expected maxval 65535, got {maxval}")
    raster = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos)
    return raster.reshape(h, w).astype(np.uint16)


def save_image(path, img: np.ndarray) -> None:
    """Write by extension: .png (default) or .pgm."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        write_pgm16(path, img)
    else:
        write_png16(path, img)


def load_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm16(path)
    return read_png16(path)


def resize_bilinear(img: np.ndarray, out_shape) -> np.ndarray:
    """Bilinear resample to (out_h, out_w) using half-pixel-centered sampling.

    Output pixel (i, j) samples the input at
    ((j + 0.5) * W/W' - 0.5, (i + 0.5) * H/H' - 0.5) with edge clamping.
    """
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy
