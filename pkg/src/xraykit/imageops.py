"""Image preprocessing and seeded augmentation on (H, W, C) numpy buffers.

Bilinear sampling uses the pixel-center convention (centers at ``i + 0.5``,
corners not aligned). Interpolation is written as ``a + t * (b - a)`` so
constant regions stay bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._util import round_count
from .boxes import BBox

RAW8 = "raw8"
UNIT = "unit"

TARGET_SIZE = (476, 476)

_MAGIC = b"CXIB"
_HEADER = struct.Struct("<4sIIHH")  # magic, width, height, channels, range flag


class ImageError(ValueError):
    pass


class AlreadyNormalized(ImageError):
    pass


class ZeroDimension(ImageError):
    pass


class CropTooSmall(ImageError):
    pass


class BoxOutsideImage(ImageError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    data: np.ndarray  # (height, width, channels)
    value_range: str = UNIT

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ImageError(f"expected (H, W, 1|3) data, got shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ZeroDimension(f"empty image {d.shape}")
        if self.value_range == RAW8:
            if d.dtype != np.uint8:
                if not np.all((d >= 0) & (d <= 255) & (d == np.round(d))):
                    raise ImageError("raw8 buffers hold integers 0..255")
            d = d.astype(np.uint8)
        elif self.value_range == UNIT:
            d = d.astype(np.float64)
            if not np.all((d >= 0.0) & (d <= 1.0)):
                raise ImageError("unit buffers hold values in [0, 1]")
        else:
            raise ImageError(f"unknown value range {self.value_range!r}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def _with(self, data: np.ndarray) -> "ImageBuffer":
        return replace(self, data=data)


def _as_float(img: ImageBuffer) -> np.ndarray:
    return img.data.astype(np.float64)


def _finish(img: ImageBuffer, out: np.ndarray) -> ImageBuffer:
    if img.value_range == RAW8:
        return ImageBuffer(np.clip(np.round(out), 0, 255).astype(np.uint8), RAW8)
    return ImageBuffer(np.clip(out, 0.0, 1.0), UNIT)


def normalize(img: ImageBuffer) -> ImageBuffer:
    if img.value_range != RAW8:
        raise AlreadyNormalized("image is already in unit range")
    return ImageBuffer(img.data.astype(np.float64) / 255.0, UNIT)


def _axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(img: ImageBuffer, w: int, h: int) -> ImageBuffer:
    if w < 1 or h < 1:
        raise ZeroDimension(f"target size must be positive, got {w}x{h}")
    d = _as_float(img)
    x0, x1, fx = _axis_coords(w, img.width)
    y0, y1, fy = _axis_coords(h, img.height)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = d[y0][:, x0] + fx * (d[y0][:, x1] - d[y0][:, x0])
    bot = d[y1][:, x0] + fx * (d[y1][:, x1] - d[y1][:, x0])
    return _finish(img, top + fy * (bot - top))


def hflip(img: ImageBuffer) -> ImageBuffer:
    return img._with(img.data[:, ::-1, :].copy())


def vflip(img: ImageBuffer) -> ImageBuffer:
    return img._with(img.data[::-1, :, :].copy())


def rotate(img: ImageBuffer, degrees: float) -> ImageBuffer:
    """Rotate about the image center (counter-clockwise on screen), zero fill."""
    if not math.isfinite(degrees):
        raise ImageError("rotation angle must be finite")
    H, W = img.height, img.width
    d = _as_float(img)
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    # inverse map: output pixel -> source location
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    tol = 1e-9
    inside = (sx >= -tol) & (sx <= W - 1 + tol) & (sy >= -tol) & (sy <= H - 1 + tol)
    sx = np.clip(sx, 0.0, W - 1)
    sy = np.clip(sy, 0.0, H - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    top = d[y0, x0] + fx * (d[y0, x1] - d[y0, x0])
    bot = d[y1, x0] + fx * (d[y1, x1] - d[y1, x0])
    out = top + fy * (bot - top)
    out[~inside] = 0.0
    return _finish(img, out)


def center_crop(img: ImageBuffer, fraction: float) -> ImageBuffer:
    if not 0.0 < fraction <= 1.0:
        raise ImageError(f"crop fraction must be in (0, 1], got {fraction}")
    nw = round_count(fraction * img.width)
    nh = round_count(fraction * img.height)
    if nw < 1 or nh < 1:
        raise CropTooSmall(f"crop of {img.width}x{img.height} by {fraction} is empty")
    ox = (img.width - nw) // 2
    oy = (img.height - nh) // 2
    return img._with(img.data[oy : oy + nh, ox : ox + nw].copy())


def crop_bbox(img: ImageBuffer, box: BBox) -> ImageBuffer:
    """Sub-image covering ``box``, expanded to whole pixels and clamped to the image."""
    x0 = max(0, math.floor(box.x_min))
    y0 = max(0, math.floor(box.y_min))
    x1 = min(img.width, math.ceil(box.x_max))
    y1 = min(img.height, math.ceil(box.y_max))
    if x0 >= x1 or y0 >= y1:
        raise BoxOutsideImage(f"box {box} does not intersect {img.width}x{img.height} image")
    return img._with(img.data[y0:y1, x0:x1].copy())


@dataclass(frozen=True)
class AugmentConfig:
    resize: bool = True
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    center_crop: bool = True
    p_resize: float = 0.5
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    p_center_crop: float = 0.5
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    crop_fraction: float = 0.9
    target_size: tuple[int, int] = TARGET_SIZE
    seed: int = 0

    def __post_init__(self):
        for name in ("p_resize", "p_hflip", "p_vflip", "p_rotate", "p_center_crop"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.rotation_range
        if lo > hi:
            raise ValueError(f"rotation range must satisfy lo <= hi, got {self.rotation_range}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if min(self.target_size) < 1:
            raise ValueError("target_size must be positive")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(p_resize=0.0, p_hflip=0.0, p_vflip=0.0, p_rotate=0.0, p_center_crop=0.0, **kw)


def augment(img: ImageBuffer, cfg: AugmentConfig, index: int = 0) -> ImageBuffer:
    """Apply center_crop, rotate, hflip, vflip, resize, each with its own probability.

    The generator is seeded from ``(cfg.seed, index)`` and every draw is made
    whether or not its transform is enabled, so toggling one transform never
    shifts the randomness of the others.
    """
    rng = np.random.default_rng([cfg.seed, index])
    u = rng.random(5)
    angle = float(rng.uniform(*cfg.rotation_range))

    out = img
    if cfg.center_crop and u[0] < cfg.p_center_crop:
        out = center_crop(out, cfg.crop_fraction)
    if cfg.rotate and u[1] < cfg.p_rotate:
        out = rotate(out, angle)
    if cfg.hflip and u[2] < cfg.p_hflip:
        out = hflip(out)
    if cfg.vflip and u[3] < cfg.p_vflip:
        out = vflip(out)
    if cfg.resize and u[4] < cfg.p_resize:
        out = resize(out, *cfg.target_size)
    return out


def preprocess(img: ImageBuffer, box: BBox | None = None, size: tuple[int, int] = TARGET_SIZE) -> ImageBuffer:
    """Inference path: crop to the radiograph, scale to [0, 1], resize. No augmentation."""
    if box is not None:
        img = crop_bbox(img, box)
    if img.value_range == RAW8:
        img = normalize(img)
    return resize(img, *size)


# --- I/O ---------------------------------------------------------------


def to_bytes(img: ImageBuffer) -> bytes:
    flag = 0 if img.value_range == RAW8 else 1
    header = _HEADER.pack(_MAGIC, img.width, img.height, img.channels, flag)
    if flag == 0:
        payload = img.data.astype(np.uint8).tobytes()
    else:
        payload = img.data.astype("<f8").tobytes()
    return header + payload


def from_bytes(buf: bytes) -> ImageBuffer:
    if len(buf) < _HEADER.size:
        raise ImageError("buffer too short for image header")
    magic, w, h, c, flag = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise ImageError(f"bad image magic {magic!r}")
    dtype = np.uint8 if flag == 0 else np.dtype("<f8")
    data = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size)
    if data.size != w * h * c:
        raise ImageError(f"payload holds {data.size} values, header says {w}x{h}x{c}")
    return ImageBuffer(data.reshape(h, w, c).astype(np.float64 if flag else np.uint8), RAW8 if flag == 0 else UNIT)


def save_buffer(img: ImageBuffer, path) -> None:
    Path(path).write_bytes(to_bytes(img))


def load_buffer(path) -> ImageBuffer:
    return from_bytes(Path(path).read_bytes())


def load_png(path) -> ImageBuffer:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.uint8)
    return ImageBuffer(arr, RAW8)


def save_png(img: ImageBuffer, path) -> None:
    from PIL import Image

    d = img.data if img.value_range == RAW8 else np.round(img.data * 255.0).astype(np.uint8)
    arr = d[:, :, 0] if img.channels == 1 else d
    Image.fromarray(arr).save(path)
