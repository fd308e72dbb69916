"""Image container conventions and bit-depth aware raster I/O.

Images are plain numpy arrays of floating samples nominally in [0, 1]:
shape ``(H, W)`` for single-channel data (NIR input, Ītex, ...) and
``(H, W, 3)`` for RGB.  The memory order is row-major with interleaved
channels, which is what numpy gives for C-contiguous arrays of that shape.

Supported containers are PNG (8/16 bit, gray or RGB) and binary PGM/PPM
with maxval 255 or 65535.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import png

PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}


class ImageFormatError(ValueError):
    """Raised for unreadable, malformed or out-of-range raster files."""


def as_image(data, dtype=np.float32) -> np.ndarray:
    """Validate ``data`` as an image and return it as a floating array."""
    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"image must have 1 or 3 channels, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating) or np.finfo(arr.dtype).bits < 32:
        arr = arr.astype(dtype)
    return arr


def channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def clamp_unit(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two images with identical shapes."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.multiply(a, b)


# -- PNM ---------------------------------------------------------------------

def _read_pnm(path: Path) -> tuple[np.ndarray, int]:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # magic, width, height, maxval; '#' comments may appear between tokens
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ImageFormatError(f"{path}: truncated PNM header")
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported PNM type {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PNM header") from exc
    if maxval not in (255, 65535):
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")
    nch = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    count = width * height * nch
    body = raw[pos:pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated PNM data")
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width, nch)
    return (arr[:, :, 0] if nch == 1 else arr), maxval


def _write_pnm(path: Path, q: np.ndarray, bits: int) -> None:
    height, width = q.shape[:2]
    magic = b"P5" if q.ndim == 2 else b"P6"
    maxval = (1 << bits) - 1
    dtype = ">u2" if bits == 16 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    path.write_bytes(header + np.ascontiguousarray(q, dtype=dtype).tobytes())


# -- PNG ---------------------------------------------------------------------

def _read_png(path: Path) -> tuple[np.ndarray, int]:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except png.Error as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    planes = info["planes"]
    if info.get("alpha"):
        raise ImageFormatError(f"{path}: alpha channels are not supported")
    if planes not in (1, 3):
        raise ImageFormatError(f"{path}: unsupported channel count {planes}")
    bitdepth = info["bitdepth"]
    data = data.reshape(height, width, planes)
    return (data[:, :, 0] if planes == 1 else data), (1 << bitdepth) - 1


def _write_png(path: Path, q: np.ndarray, bits: int) -> None:
    height, width = q.shape[:2]
    greyscale = q.ndim == 2
    writer = png.Writer(width, height, greyscale=greyscale, bitdepth=bits)
    rows = q.reshape(height, -1)
    with open(path, "wb") as fh:
        writer.write(fh, rows.tolist())


def read_raw(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Return the integer samples of a raster file and its container maximum."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    if path.suffix.lower() in PNM_SUFFIXES:
        return _read_pnm(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    raise ImageFormatError(f"{path}: unsupported container {path.suffix!r}")


def load_image(path: str | os.PathLike, sensor_bits: int | None = None) -> np.ndarray:
    """Load a raster file as float32 samples in [0, 1].

    With ``sensor_bits`` the raw integers are divided by ``2**sensor_bits - 1``
    (e.g. 10-bit sensor data stored in a 16-bit container); otherwise by the
    container maximum.  The divisor is never guessed from the data.
    """
    raw, container_max = read_raw(path)
    if sensor_bits is not None:
        divisor = (1 << int(sensor_bits)) - 1
        if divisor > container_max:
            raise ImageFormatError(
                f"{path}: sensor_bits={sensor_bits} exceeds the container depth")
        peak = int(raw.max(initial=0))
        if peak > divisor:
            raise ImageFormatError(
                f"{path}: sample {peak} exceeds 2^{sensor_bits}-1 = {divisor}")
    else:
        divisor = container_max
    img = raw.astype(np.float32) / np.float32(divisor)
    img.flags.writeable = False
    return img


def quantize(img: np.ndarray, bits: int) -> np.ndarray:
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite samples")
    maxval = (1 << bits) - 1
    q = np.rint(clamp_unit(np.asarray(img, dtype=np.float64)) * maxval)
    return q.astype(np.uint16 if bits == 16 else np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike, bits: int = 8) -> None:
    """Clamp to [0, 1], quantize to ``bits`` and write by file suffix."""
    img = as_image(img)
    q = quantize(img, bits)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm" and q.ndim == 2 or suffix == ".pgm" and q.ndim == 3:
        raise ImageFormatError(f"{path}: channel count does not fit {suffix}")
    try:
        if suffix in PNM_SUFFIXES:
            _write_pnm(path, q, bits)
        elif suffix == ".png":
            _write_png(path, q, bits)
        else:
            raise ImageFormatError(f"{path}: unsupported container {path.suffix!r}")
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def read_size(path: str | os.PathLike) -> tuple[int, int]:
    """(height, width) from the file header without decoding samples."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            reader = png.Reader(filename=str(path))
            reader.preamble()
        except png.Error as exc:
            raise ImageFormatError(f"{path}: {exc}") from exc
        return reader.height, reader.width
    raw, _ = read_raw(path)
    return raw.shape[:2]
