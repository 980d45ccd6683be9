"""Binary PGM (P5) / PPM (P6) raster IO.

Slides enter the pipeline as plain 8-bit rasters; pyramidal pathology
formats are out of scope and must be pre-exported.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RasterFormatError


@dataclass(frozen=True)
class SlideRaster:
    """An 8-bit slide image held fully in memory.

    `data` is row-major with shape (height, width) for grayscale or
    (height, width, 3) for RGB.
    """

    slide_id: str
    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        expected = (self.height, self.width) if self.channels == 1 else (self.height, self.width, 3)
        if self.channels not in (1, 3):
            raise RasterFormatError(f"channels must be 1 or 3, got {self.channels}")
        if self.data.shape != expected or self.data.dtype != np.uint8:
            raise RasterFormatError(
                f"data shape {self.data.shape}/{self.data.dtype} does not match "
                f"{self.channels}-channel {self.width}x{self.height} uint8"
            )


def grayscale(slide: SlideRaster) -> np.ndarray:
    """Luma conversion, 0.299 R + 0.587 G + 0.114 B rounded half-up to uint8."""
    if slide.channels == 1:
        return slide.data
    rgb = slide.data.astype(np.float64)
    gray = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return np.floor(gray + 0.5).astype(np.uint8)


def _read_token(stream: io.BufferedIOBase) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            raise RasterFormatError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"", b"\n"):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_raster(path, slide_id: str | None = None) -> SlideRaster:
    """Load a binary PGM/PPM file. The slide id defaults to the file stem."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise RasterFormatError(f"{path}: unsupported magic {magic!r} (binary P5/P6 only)")
        channels = 1 if magic == b"P5" else 3
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as exc:
            raise RasterFormatError(f"{path}: malformed header") from exc
        if maxval != 255:
            raise RasterFormatError(f"{path}: only maxval 255 supported, got {maxval}")
        n = width * height * channels
        raw = f.read(n)
        if len(raw) != n:
            raise RasterFormatError(f"{path}: expected {n} sample bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return SlideRaster(
        slide_id=slide_id if slide_id is not None else path.stem,
        width=width,
        height=height,
        channels=channels,
        data=data.reshape(shape).copy(),
    )


def raster_bytes(data: np.ndarray) -> bytes:
    """Serialize a uint8 tile (H,W) or (H,W,3) as binary PGM/PPM bytes."""
    if data.dtype != np.uint8 or data.ndim not in (2, 3):
        raise RasterFormatError(f"cannot serialize array of shape {data.shape}/{data.dtype}")
    if data.ndim == 3 and data.shape[2] != 3:
        raise RasterFormatError(f"third axis must have 3 channels, got {data.shape[2]}")
    magic = b"P5" if data.ndim == 2 else b"P6"
    h, w = data.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    return header + data.tobytes()


def write_raster(path, data: np.ndarray) -> None:
    Path(path).write_bytes(raster_bytes(data))


def tile_filename(slide_id: str, scale: str, row: int, col: int, channels: int) -> str:
    ext = "pgm" if channels == 1 else "ppm"
    return f"{slide_id}_{scale}_{row}_{col}.{ext}"
