"""Images, augmentation sampling and the exact coordinate maps behind each view.

Images are ``(H, W, 3)`` float arrays with values in ``[0, 1]``. Integer
coordinates are pixel centers. A view is produced from a source image by
crop -> bilinear resize -> optional horizontal flip, followed by color ops.
Every stochastic choice is frozen into a :class:`TransformSpec`, so applying
a spec is a pure function and its coordinate maps are exact.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, GeometryError, PPMError, ShapeError

MIN_SIDE = 8
_LUMA = np.array([0.299, 0.587, 0.114])


class ViewKind(str, enum.Enum):
    COLOR_ONLY = "color_only"
    SPATIAL_COLOR = "spatial_color"


class ColorOp(str, enum.Enum):
    JITTER = "jitter"
    GRAYSCALE = "grayscale"
    BLUR = "blur"
    SOLARIZE = "solarize"


@dataclass(frozen=True)
class ColorOpSpec:
    """One sampled color op.

    ``params`` holds ``(brightness, contrast, saturation, hue_shift)`` factors
    for jitter, ``(sigma,)`` for blur, ``(threshold,)`` for solarize and is
    empty for grayscale. Parameters are drawn even when ``applied`` is false
    so the random stream does not depend on earlier coin flips.
    """

    op: ColorOp
    applied: bool
    params: tuple[float, ...] = ()


@dataclass(frozen=True)
class AugConfig:
    """Sampling ranges for one augmentation pipeline.

    Per-view probabilities are ``(color_only, spatial_color)`` pairs.
    """

    scale: tuple[float, float] = (0.4, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: tuple[float, float] = (1.0, 0.1)
    blur_sigma: tuple[float, float] = (0.1, 0.6)
    solarize_p: tuple[float, float] = (0.0, 0.2)
    solarize_threshold: float = 0.5
    out_size: tuple[int, int] | None = None

    def validate(self) -> None:
        for name in ("scale", "ratio", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"aug.{name}: min {lo} > max {hi}")
        if not 0 < self.scale[0] <= self.scale[1] <= 1:
            raise ConfigError(f"aug.scale must lie in (0, 1], got {self.scale}")
        if self.ratio[0] <= 0:
            raise ConfigError(f"aug.ratio must be positive, got {self.ratio}")
        if self.blur_sigma[0] <= 0:
            raise ConfigError("aug.blur_sigma must be positive")
        probs = [self.flip_p, self.jitter_p, self.gray_p, *self.blur_p, *self.solarize_p]
        if any(not 0 <= p <= 1 for p in probs):
            raise ConfigError("augmentation probabilities must lie in [0, 1]")
        if not 0 <= self.solarize_threshold <= 1:
            raise ConfigError("aug.solarize_threshold must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"aug.{name} must lie in [0, 1]")
        if not 0 <= self.hue <= 0.5:
            raise ConfigError("aug.hue must lie in [0, 0.5]")
        if self.out_size is not None and min(self.out_size) < MIN_SIDE:
            raise ConfigError(f"aug.out_size too small: {self.out_size}")


@dataclass(frozen=True)
class TransformSpec:
    kind: ViewKind
    src_size: tuple[int, int]  # (H, W) of the source image
    crop: tuple[float, float, float, float]  # x0, y0, cw, ch
    flip: bool
    out_size: tuple[int, int]
    color_ops: tuple[ColorOpSpec, ...] = field(default=())
    seed: int = 0

    def __post_init__(self):
        src_h, src_w = self.src_size
        x0, y0, cw, ch = self.crop
        if cw <= 0 or ch <= 0 or x0 < 0 or y0 < 0 or x0 + cw > src_w or y0 + ch > src_h:
            raise GeometryError(f"crop {self.crop} outside source of size {self.src_size}")
        if self.kind is ViewKind.COLOR_ONLY and (
            self.flip or self.crop != (0.0, 0.0, float(src_w), float(src_h))
        ):
            raise GeometryError("color-only spec must use the full image and no flip")
        if min(self.out_size) < 1:
            raise GeometryError(f"bad out_size {self.out_size}")


def identity_spec(src_size: tuple[int, int], out_size: tuple[int, int] | None = None,
                  flip: bool = False) -> TransformSpec:
    """Full-image spec without color ops; ``flip=True`` gives a flip-only view."""
    h, w = src_size
    kind = ViewKind.SPATIAL_COLOR if flip else ViewKind.COLOR_ONLY
    return TransformSpec(kind, (h, w), (0.0, 0.0, float(w), float(h)), flip,
                         out_size or (h, w))


# ---------------------------------------------------------------------------
# sampling


def _sample_crop(rng: np.random.Generator, config: AugConfig, src_h: int, src_w: int):
    area = src_h * src_w
    log_lo, log_hi = math.log(config.ratio[0]), math.log(config.ratio[1])
    for _ in range(10):
        target = area * rng.uniform(config.scale[0], config.scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = math.sqrt(target * aspect)
        ch = math.sqrt(target / aspect)
        if cw <= src_w and ch <= src_h:
            x0 = rng.uniform(0.0, src_w - cw)
            y0 = rng.uniform(0.0, src_h - ch)
            return (x0, y0, cw, ch)
    # fall back to the largest centered crop with an admissible aspect
    aspect = src_w / src_h
    cw, ch = float(src_w), float(src_h)
    if aspect < config.ratio[0]:
        ch = cw / config.ratio[0]
    elif aspect > config.ratio[1]:
        cw = ch * config.ratio[1]
    return ((src_w - cw) / 2, (src_h - ch) / 2, cw, ch)


def _sample_color_ops(rng: np.random.Generator, config: AugConfig, view: int):
    b, c, s, h = config.brightness, config.contrast, config.saturation, config.hue
    jitter = ColorOpSpec(
        ColorOp.JITTER,
        bool(rng.uniform() < config.jitter_p),
        (rng.uniform(1 - b, 1 + b), rng.uniform(1 - c, 1 + c),
         rng.uniform(1 - s, 1 + s), rng.uniform(-h, h)),
    )
    gray = ColorOpSpec(ColorOp.GRAYSCALE, bool(rng.uniform() < config.gray_p))
    blur = ColorOpSpec(ColorOp.BLUR, bool(rng.uniform() < config.blur_p[view]),
                       (rng.uniform(*config.blur_sigma),))
    solarize = ColorOpSpec(ColorOp.SOLARIZE, bool(rng.uniform() < config.solarize_p[view]),
                           (config.solarize_threshold,))
    return (jitter, gray, blur, solarize)


def sample_transform(seed: int, config: AugConfig, kind: ViewKind,
                     src_size: tuple[int, int]) -> TransformSpec:
    """Draw a reproducible TransformSpec for a source image of ``src_size``."""
    config.validate()
    kind = ViewKind(kind)
    src_h, src_w = src_size
    rng = np.random.default_rng(seed)
    out_size = tuple(config.out_size) if config.out_size else (src_h, src_w)
    if kind is ViewKind.COLOR_ONLY:
        crop = (0.0, 0.0, float(src_w), float(src_h))
        flip = False
        view = 0
    else:
        crop = _sample_crop(rng, config, src_h, src_w)
        flip = bool(rng.uniform() < config.flip_p)
        view = 1
    ops = _sample_color_ops(rng, config, view)
    return TransformSpec(kind, (src_h, src_w), tuple(float(v) for v in crop), flip,
                         out_size, ops, int(seed))


# ---------------------------------------------------------------------------
# coordinate maps


def _src_x(spec: TransformSpec, x_view):
    x0, _, cw, _ = spec.crop
    w = spec.out_size[1]
    x_r = (w - 1) - x_view if spec.flip else x_view
    return x0 + x_r * cw / w


def _src_y(spec: TransformSpec, y_view):
    _, y0, _, ch = spec.crop
    return y0 + y_view * ch / spec.out_size[0]


def map_view_to_source(spec: TransformSpec, p_view):
    """View coordinates ``(x, y)`` to source coordinates. Accepts arrays."""
    x, y = p_view
    return _src_x(spec, x), _src_y(spec, y)


def map_source_to_view(spec: TransformSpec, p_src):
    """Exact inverse of :func:`map_view_to_source`."""
    x, y = p_src
    x0, y0, cw, ch = spec.crop
    h, w = spec.out_size
    x_r = (x - x0) * w / cw
    x_v = (w - 1) - x_r if spec.flip else x_r
    return x_v, (y - y0) * h / ch


# ---------------------------------------------------------------------------
# application


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ShapeError(f"image sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    return img


def _lerp_axis(data: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    t = coords - i0
    shape = [1] * data.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return np.take(data, i0, axis=axis) * (1 - t) + np.take(data, i1, axis=axis) * t


def resample(data: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Spatial part of ``spec`` on any ``(H, W, ...)`` array (edge-clamped bilinear).

    Works on arbitrary values, which lets tests push coordinate ramps through
    the exact resampler used for images.
    """
    if tuple(data.shape[:2]) != tuple(spec.src_size):
        raise GeometryError(f"spec built for source {spec.src_size}, got {data.shape[:2]}")
    h, w = spec.out_size
    ys = _src_y(spec, np.arange(h, dtype=np.float64))
    xs = _src_x(spec, np.arange(w, dtype=np.float64))
    rows = _lerp_axis(data, ys, axis=0)
    return _lerp_axis(rows, xs, axis=1)


def grayscale(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.intp) % 6
    choices = [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ]
    out = np.empty(hsv.shape, dtype=hsv.dtype)
    for k, (rr, gg, bb) in enumerate(choices):
        m = i == k
        out[..., 0][m], out[..., 1][m], out[..., 2][m] = rr[m], gg[m], bb[m]
    return out


def _jitter(img, brightness, contrast, saturation, hue_shift):
    img = np.clip(img * brightness, 0.0, 1.0)
    mean = grayscale(img).mean()
    img = np.clip((img - mean) * contrast + mean, 0.0, 1.0)
    gray = grayscale(img)[..., None]
    img = np.clip((img - gray) * saturation + gray, 0.0, 1.0)
    if hue_shift != 0.0:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        img = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return img


def apply_color_op(img: np.ndarray, op: ColorOpSpec) -> np.ndarray:
    if not op.applied:
        return img
    if op.op is ColorOp.JITTER:
        return _jitter(img, *op.params)
    if op.op is ColorOp.GRAYSCALE:
        return np.repeat(grayscale(img)[..., None], 3, axis=-1)
    if op.op is ColorOp.BLUR:
        (sigma,) = op.params
        return np.clip(gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect"), 0.0, 1.0)
    if op.op is ColorOp.SOLARIZE:
        (threshold,) = op.params
        return np.where(img < threshold, img, 1.0 - img)
    raise ConfigError(f"unknown color op {op.op}")


def apply_transform(img: np.ndarray, spec: TransformSpec) -> np.ndarray:
    check_image(img)
    out = resample(img, spec)
    for op in spec.color_ops:
        out = apply_color_op(out, op)
    return out


# ---------------------------------------------------------------------------
# PPM I/O


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64) / 255.0


def as_float(img: np.ndarray) -> np.ndarray:
    """uint8 images become floats in [0, 1]; float images pass through."""
    return from_uint8(img) if img.dtype == np.uint8 else img


def _read_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def decode_ppm(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode a binary P6 PPM into uint8 ``(H, W, 3)``."""
    try:
        (magic, w, h, maxval), offset = _read_tokens(buf, 4)
        if magic != b"P6":
            raise ValueError(f"bad magic {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PPMError(f"{name}: malformed PPM header ({exc})") from None
    if maxval != 255:
        raise PPMError(f"{name}: only maxval 255 is supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise PPMError(f"{name}: bad dimensions {w}x{h}")
    body = buf[offset:offset + w * h * 3]
    if len(body) != w * h * 3:
        raise PPMError(f"{name}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(data: np.ndarray) -> bytes:
    if data.dtype != np.uint8:
        data = to_uint8(data)
    h, w = data.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(data).tobytes()


def read_ppm(path) -> np.ndarray:
    """Read a PPM into a float image in [0, 1]."""
    path = Path(path)
    return from_uint8(decode_ppm(path.read_bytes(), str(path)))


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_image(path, allow_png: bool = False) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not allow_png:
            raise PPMError(f"{path}: PNG ingest is disabled")
        from PIL import Image  # optional dependency

        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    return read_ppm(path)


def stack_views(images: Sequence[np.ndarray]) -> np.ndarray:
    """``(N, H, W, 3)`` -> ``(N, 3, H, W)`` float32, the layout the networks take."""
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32)
