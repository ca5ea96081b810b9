from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import numpy.typing as npt
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ImageFormatError

logger = logging.getLogger("crackalign.imgio")

FloatArray = npt.NDArray[np.float64]
PathLike = Union[str, Path]

# Pillow reports binary PGM (P5) under the PPM plugin.
SUPPORTED_FORMATS = {"PNG", "PPM"}
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
RANGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GrayImage:
    """Single-channel raster with intensities in [0, 1], stored row-major as (height, width)."""

    data: FloatArray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ImageFormatError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageFormatError("GrayImage data contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -RANGE_TOLERANCE or hi > 1 + RANGE_TOLERANCE:
            raise ImageFormatError(f"GrayImage intensities must lie in [0,1], got [{lo:.4g}, {hi:.4g}]")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> "GrayImage":
        """Build from any real array, clipping to [0, 1]."""
        return cls(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))

    @classmethod
    def constant(cls, width: int, height: int, value: float) -> "GrayImage":
        return cls(np.full((height, width), float(value)))


def load_image(path: PathLike) -> GrayImage:
    path = Path(path)
    try:
        with Image.open(path) as handle:
            fmt = handle.format
            if fmt not in SUPPORTED_FORMATS:
                raise ImageFormatError(f"{path.name}: unsupported format {fmt!r} (PNG or PGM expected)")
            handle.load()
            pil = handle.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc

    if pil.width == 0 or pil.height == 0:
        raise ImageFormatError(f"{path.name}: zero-dimension image")

    if pil.mode in ("L", "1", "P", "LA", "RGBA", "RGB"):
        if pil.mode in ("L", "1", "LA"):
            gray = np.asarray(pil.convert("L"), dtype=np.float64)
        else:
            rgb = np.asarray(pil.convert("RGB"), dtype=np.float64)
            r, g, b = LUMA_WEIGHTS
            gray = r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]
    else:
        raise ImageFormatError(f"{path.name}: unsupported pixel mode {pil.mode!r} (8-bit gray or RGB expected)")
    logger.debug("loaded %s %sx%s mode=%s", path.name, pil.width, pil.height, pil.mode)
    return GrayImage.from_array(gray / 255.0)


def to_uint8(img: GrayImage) -> npt.NDArray[np.uint8]:
    return np.round(img.data * 255.0).astype(np.uint8)


def save_image(img: GrayImage, path: PathLike) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    Image.fromarray(to_uint8(img)).save(path, format=fmt)


def save_rgb(pixels: npt.NDArray[np.uint8], path: PathLike) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError(f"RGB canvas must be (h, w, 3), got {pixels.shape}")
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(Path(path), format="PNG")


def sample_bilinear(data: FloatArray, xs: npt.ArrayLike, ys: npt.ArrayLike) -> Tuple[FloatArray, npt.NDArray[np.bool_]]:
    """Bilinear lookup of many points; returns values (0 outside the lattice hull) and a validity mask."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h, w = data.shape
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    values = ndimage.map_coordinates(data, [ys.ravel(), xs.ravel()], order=1, mode="nearest").reshape(xs.shape)
    values = np.where(valid, values, 0.0)
    return values, valid


def bilinear_sample(img: GrayImage, x: float, y: float) -> float:
    values, _ = sample_bilinear(img.data, np.array([x]), np.array([y]))
    return float(values[0])
