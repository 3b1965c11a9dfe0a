"""Tile loading, saving and geometric transforms."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import (
    ConfigError,
    InvalidTheta,
    NonSquareTile,
    UnreadableFile,
    UnsupportedPixelFormat,
    UpscaleRequested,
)
from file_formats import Label, ManifestRow, atomic_output

logger = logging.getLogger(__name__)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
SUPPORTED_SIDES = (256, 128, 64, 32, 16)
MIN_SIDE = 16
DEFAULT_THETAS = (0.0, 60.0, 120.0)

# Sample positions this close outside the raster still count as inside
EDGE_TOLERANCE = 1e-9


class Transform(NamedTuple):
    dx: int
    dy: int
    theta: float


@dataclass(frozen=True, eq=False)
class Tile:
    """An immutable RGB raster with provenance.

    ``pixels`` is a read-only (height, width, 3) uint8 array.
    """

    pixels: np.ndarray
    id: str = ""
    patient_id: str = ""
    label: Label = Label.UNLABELED
    transform: Optional[Transform] = None
    source_id: str = ""
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ConfigError(
                f"Tile pixels must be (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}"
            )
        if pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise ConfigError("Tile must contain at least one pixel")
        if pixels.flags.writeable:
            pixels = pixels.copy()
            pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def replace(self, **changes) -> "Tile":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Real-valued luminance in [0, 255], shape (height, width)."""

    values: np.ndarray
    source_id: str = ""

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""


def _promote(path: str, image: Image.Image):
    """Return an (H, W, 3) uint8 array and the warnings raised by conversion."""
    mode = image.mode
    if mode == "RGB":
        return np.asarray(image, dtype=np.uint8), ()
    if mode == "RGBA":
        return np.asarray(image, dtype=np.uint8)[:, :, :3], ()
    if mode in ("L", "LA", "P", "PA", "1"):
        converted = image.convert("RGB")
        return np.asarray(converted, dtype=np.uint8), (f"promoted {mode} to RGB",)
    if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
        wide = np.asarray(image).astype(np.int64)
        gray = (np.clip(wide, 0, 65535) >> 8).astype(np.uint8)
        return np.repeat(gray[:, :, None], 3, axis=2), (f"truncated 16-bit {mode} to 8-bit RGB",)
    raise UnsupportedPixelFormat(path, mode)


def load_tile(path: str, meta: Optional[ManifestRow] = None) -> Tile:
    """Decode a PNG or TIFF tile and attach manifest metadata."""
    if not os.path.isfile(path):
        raise UnreadableFile(path, "no such file")
    try:
        with Image.open(path) as image:
            image.load()
            pixels, warnings = _promote(path, image)
    except UnidentifiedImageError:
        raise UnsupportedPixelFormat(path, "not an image") from None
    except OSError as e:
        raise UnreadableFile(path, str(e)) from None

    for warning in warnings:
        logger.warning("%s: %s", path, warning)

    if meta is None:
        return Tile(pixels, id=os.path.splitext(os.path.basename(path))[0], warnings=warnings)

    transform = None
    if meta.dx is not None:
        transform = Transform(meta.dx, meta.dy or 0, meta.theta or 0.0)
    return Tile(
        pixels,
        id=meta.tile_id,
        patient_id=meta.patient_id,
        label=meta.label,
        transform=transform,
        source_id=meta.source_id,
        warnings=warnings,
    )


def save_tile(tile: Union[Tile, np.ndarray], path: str) -> None:
    """Write a tile (or raw uint8 raster) as PNG; the file appears atomically."""
    pixels = tile.pixels if isinstance(tile, Tile) else np.asarray(tile)
    with atomic_output(path, "wb") as handle:
        Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(handle, format="PNG")


def to_gray(tile: Tile) -> GrayImage:
    pixels = tile.pixels
    values = pixels.astype(np.float64) @ GRAY_WEIGHTS
    # Gray pixels map to their own value exactly
    neutral = (pixels[:, :, 0] == pixels[:, :, 1]) & (pixels[:, :, 1] == pixels[:, :, 2])
    values[neutral] = pixels[:, :, 0][neutral]
    np.clip(values, 0.0, 255.0, out=values)
    return GrayImage(values, source_id=tile.id)


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the overlap of output cell i with each input cell, normalised."""
    scale = n_in / n_out
    starts = np.arange(n_out)[:, None] * scale
    ends = starts + scale
    cells = np.arange(n_in)[None, :]
    overlap = np.minimum(ends, cells + 1) - np.maximum(starts, cells)
    return np.clip(overlap, 0.0, None) / scale


def downscale(tile: Tile, side: int) -> Tile:
    """Area-average a square tile down to side x side."""
    if tile.width != tile.height:
        raise NonSquareTile(f"Tile {tile.id!r} is {tile.width}x{tile.height}")
    if side > tile.width:
        raise UpscaleRequested(f"Cannot downscale {tile.width}px tile {tile.id!r} to {side}px")
    if side < MIN_SIDE:
        raise ConfigError(f"Downscale side must be at least {MIN_SIDE}, got {side}")
    if side == tile.width:
        return tile

    weights = _box_weights(tile.width, side)
    rows = np.tensordot(weights, tile.pixels.astype(np.float64), axes=(1, 0))
    averaged = np.einsum("ikc,lk->ilc", rows, weights)
    pixels = np.clip(np.rint(averaged), 0, 255).astype(np.uint8)
    return tile.replace(pixels=pixels)


def _validate_theta(theta: float, allowed: Sequence[float]) -> None:
    if not any(abs(theta - a) < 1e-9 for a in allowed):
        raise InvalidTheta(theta, allowed)


def extract_region(
    context: Tile,
    center: Tuple[float, float],
    side: int,
    theta: float,
    allowed_thetas: Sequence[float] = DEFAULT_THETAS,
    pad_value: Optional[int] = None,
) -> Union[Tile, Rejection]:
    """Cut a side x side window centred at ``center`` after rotating by ``theta``.

    Output pixel (u, v) samples the context at center + R(theta) . (u - side//2, v - side//2)
    with bilinear interpolation. Any sample outside the context yields
    ``Rejection("OutOfBounds")`` unless ``pad_value`` is given.
    """
    _validate_theta(theta, allowed_thetas)
    if side < 1 or side > max(context.width, context.height):
        raise UpscaleRequested(
            f"Region side {side} does not fit a {context.width}x{context.height} context"
        )

    cx, cy = float(center[0]), float(center[1])
    offsets = np.arange(side, dtype=np.float64) - side // 2
    du, dv = np.meshgrid(offsets, offsets)
    radians = np.deg2rad(theta)
    cos, sin = np.cos(radians), np.sin(radians)
    sx = cx + cos * du - sin * dv
    sy = cy + sin * du + cos * dv

    width, height = context.width, context.height
    inside = (
        (sx >= -EDGE_TOLERANCE) & (sx <= width - 1 + EDGE_TOLERANCE)
        & (sy >= -EDGE_TOLERANCE) & (sy <= height - 1 + EDGE_TOLERANCE)
    )
    if pad_value is None and not inside.all():
        return Rejection("OutOfBounds", f"{int((~inside).sum())} samples outside context")

    x0 = np.clip(np.floor(sx), 0, width - 1).astype(np.intp)
    y0 = np.clip(np.floor(sy), 0, height - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = np.clip(sx - x0, 0.0, 1.0)[:, :, None]
    wy = np.clip(sy - y0, 0.0, 1.0)[:, :, None]

    src = context.pixels.astype(np.float64)
    top = (1.0 - wx) * src[y0, x0] + wx * src[y0, x1]
    bottom = (1.0 - wx) * src[y1, x0] + wx * src[y1, x1]
    sampled = (1.0 - wy) * top + wy * bottom
    if pad_value is not None:
        sampled[~inside] = pad_value

    pixels = np.clip(np.rint(sampled), 0, 255).astype(np.uint8)
    return Tile(
        pixels,
        id=context.id,
        patient_id=context.patient_id,
        label=context.label,
        source_id=context.source_id or context.id,
    )
