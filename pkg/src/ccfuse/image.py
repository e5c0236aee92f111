"""Pixel container and image file I/O.

Images live in :class:`ImageGrid`, a thin immutable wrapper around a
``(height, width, channels)`` float64 array. Everything downstream
operates on plain numpy arrays; ``ImageGrid`` implements ``__array__``
so ``np.asarray(grid)`` yields the underlying data.

Supported files: binary PGM (P5) and PPM (P6), 8 or 16 bit, and PNG
(8/16-bit grayscale or RGB). Output is always 8 bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, IoError, ParamError

__all__ = [
    "ImageGrid",
    "load_image",
    "save_image",
    "to_luma",
    "quantize",
    "LUMA_WEIGHTS",
]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """H x W x C grid of real samples.

    ``ranged`` marks images that follow the nominal [0, 1] convention;
    gradients and residuals set it to False.
    """

    data: np.ndarray
    ranged: bool = True

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ParamError(f"expected (H, W) or (H, W, 1|3) data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ParamError("height and width must be positive")
        if not np.all(np.isfinite(arr)):
            raise ParamError("image data must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.ranged == other.ranged and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.ranged, self.data.tobytes()))


def _read_pnm(raw: bytes, path) -> np.ndarray:
    tokens = []
    pos = 0
    # Header: magic, width, height, maxval separated by whitespace; '#' comments.
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PNM header") from None
    channels = {b"P5": 1, b"P6": 3}[magic]
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(raw) - pos < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated PNM raster")
    body = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return body.reshape(height, width, channels).astype(np.float64) / maxval


def load_image(path) -> ImageGrid:
    """Read a PGM/PPM/PNG file and scale samples into [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc

    if raw[:2] in (b"P5", b"P6"):
        return ImageGrid(_read_pnm(raw, path))
    if raw[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError(f"{path}: not a PGM (P5), PPM (P6) or PNG file")

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                data, maxval = np.asarray(im, dtype=np.float64), 255.0
            elif mode == "RGB":
                data, maxval = np.asarray(im, dtype=np.float64), 255.0
            elif mode in ("I;16", "I;16B", "I"):
                bits = im.info.get("bits", 16) if mode == "I" else 16
                data, maxval = np.asarray(im, dtype=np.float64), float(2**bits - 1)
            else:
                raise FormatError(f"{path}: unsupported PNG color type/bit depth (mode {mode})")
    except FormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on corrupt files
        raise FormatError(f"{path}: {exc}") from exc
    return ImageGrid(data / maxval)


def quantize(data) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint8 with round-half-up."""
    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_image(img: ImageGrid, path) -> None:
    """Write an 8-bit image; format chosen from the extension (.png, .pgm, .ppm)."""
    if not img.ranged:
        raise ParamError("refusing to save an unranged grid (gradient/residual) as an image")
    path = Path(path)
    q = quantize(img.data)
    ext = path.suffix.lower()
    try:
        if ext in (".pgm", ".ppm"):
            want = 1 if ext == ".pgm" else 3
            if img.channels != want:
                raise FormatError(f"{ext} needs {want} channel(s), image has {img.channels}")
            header = b"P5" if want == 1 else b"P6"
            header += f"\n{img.width} {img.height}\n255\n".encode()
            with open(path, "wb") as fh:
                fh.write(header + q.tobytes())
        elif ext == ".png":
            arr = q[:, :, 0] if img.channels == 1 else q
            Image.fromarray(arr).save(path, format="PNG")
        else:
            raise FormatError(f"unsupported output extension {ext!r}")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def to_luma(img):
    """Luminance with BT.601 weights; grayscale input is returned unchanged.

    Accepts an ImageGrid (returns one) or an ``(H, W, C)`` array.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 1:
        out = arr.copy()
    elif arr.shape[2] == 3:
        out = (arr @ LUMA_WEIGHTS)[:, :, None]
    else:
        raise ParamError(f"to_luma needs 1 or 3 channels, got {arr.shape[2]}")
    if isinstance(img, ImageGrid):
        return ImageGrid(out, ranged=img.ranged)
    return out

