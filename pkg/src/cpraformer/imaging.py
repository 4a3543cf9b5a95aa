"""Image I/O (binary PPM), YCbCr conversion, Y-channel quality metrics, and a
parametric synthetic rain-streak generator.

Metrics follow the restoration-benchmark convention: full-range BT.601 luma
(Y = 0.299R + 0.587G + 0.114B), PSNR capped at 100 dB for identical inputs,
SSIM with an 11-tap Gaussian window (sigma 1.5) and the canonical k1/k2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import PRECISION_DTYPES, Tensor

PSNR_CAP_DB = 100.0

_WS = {b" ", b"\t", b"\n", b"\r", b"\x0b", b"\x0c"}


class PpmError(ValueError):
    """Malformed PPM header or payload."""


@dataclass
class ImagePlanar:
    """8-bit RGB raster with derived YCbCr planes (floats in [0,255])."""

    width: int
    height: int
    rgb: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        if self.rgb.shape != (self.height, self.width, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} != "
                             f"({self.height}, {self.width}, 3)")

    @property
    def y(self) -> np.ndarray:
        r, g, b = (self.rgb[..., i].astype(np.float64) for i in range(3))
        return 0.299 * r + 0.587 * g + 0.114 * b

    @property
    def cb(self) -> np.ndarray:
        r, g, b = (self.rgb[..., i].astype(np.float64) for i in range(3))
        return 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b

    @property
    def cr(self) -> np.ndarray:
        r, g, b = (self.rgb[..., i].astype(np.float64) for i in range(3))
        return 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)
# ---------------------------------------------------------------------------

def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        c = buf[pos:pos + 1]
        if c in _WS:
            pos += 1
        elif c == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos:pos + 1] not in _WS \
            and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PpmError("unexpected end of header")
    return buf[start:pos], pos


def _int_token(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, pos = _next_token(buf, pos)
    try:
        value = int(tok)
    except ValueError:
        raise PpmError(f"{what}: expected integer, got {tok!r}") from None
    return value, pos


def read_ppm(path) -> ImagePlanar:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0)
    if magic != b"P6":
        raise PpmError(f"bad magic {magic!r}; only binary P6 is supported")
    width, pos = _int_token(buf, pos, "width")
    height, pos = _int_token(buf, pos, "height")
    maxval, pos = _int_token(buf, pos, "maxval")
    if width <= 0 or height <= 0:
        raise PpmError(f"non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise PpmError(f"maxval {maxval} unsupported; expected 255")
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise PpmError("missing single whitespace after maxval")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise PpmError(f"truncated payload: need {need} bytes, have {len(payload)}")
    rgb = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImagePlanar(width=width, height=height, rgb=rgb.copy())


def write_ppm(image: ImagePlanar, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.rgb).tobytes())


# ---------------------------------------------------------------------------
# tensor bridges
# ---------------------------------------------------------------------------

def image_to_tensor(image: ImagePlanar, precision: str = "single") -> Tensor:
    """(1,3,H,W) tensor of reals in [0,1]."""
    dt = PRECISION_DTYPES[precision]
    arr = image.rgb.astype(dt) / dt(255.0)
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)[None]))

def tensor_to_image(t: Tensor) -> ImagePlanar:
    """Clamp to [0,1], quantize to 8 bits; this is the only place clamping
    happens on the inference path."""
    if t.shape[0] != 1 or t.shape[1] != 3:
        raise ValueError(f"tensor_to_image: need (1,3,H,W), got {t.shape}")
    arr = np.clip(t.data[0].astype(np.float64), 0.0, 1.0) * 255.0
    rgb = np.rint(arr).astype(np.uint8).transpose(1, 2, 0)
    return ImagePlanar(width=rgb.shape[1], height=rgb.shape[0], rgb=rgb)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _require_same_dims(a: ImagePlanar, b: ImagePlanar, what: str) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"{what}: image dimensions differ "
                         f"({a.width}x{a.height} vs {b.width}x{b.height})")


def psnr_y(a: ImagePlanar, b: ImagePlanar) -> float:
    """Peak signal-to-noise ratio on the luma plane, in dB, capped at 100."""
    _require_same_dims(a, b, "psnr_y")
    mse = float(np.mean((a.y - b.y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP_DB)


def _gaussian_taps(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    h = sliding_window_view(img, len(taps), axis=1) @ taps
    return sliding_window_view(h, len(taps), axis=0) @ taps


def ssim_y(a: ImagePlanar, b: ImagePlanar, window: int = 11,
           sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local structural similarity on the luma plane, Gaussian-weighted
    windows, valid region only."""
    _require_same_dims(a, b, "ssim_y")
    if a.width < window or a.height < window:
        raise ValueError(f"ssim_y: image {a.width}x{a.height} smaller than "
                         f"window {window}")
    taps = _gaussian_taps(window, sigma)
    x = a.y
    y = b.y
    c1 = (k1 * 255.0) ** 2
    c2 = (k2 * 255.0) ** 2
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mu_x * mu_x
    syy = _filter_valid(y * y, taps) - mu_y * mu_y
    sxy = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# synthetic rain
# ---------------------------------------------------------------------------

@dataclass
class RainParams:
    """Additive rain model: line streaks with a Gaussian cross profile.

    `angle_deg` tilts streaks from vertical (clockwise, screen coordinates).
    """

    streak_count: int = 80
    angle_deg: float = 70.0
    length_px: float = 12.0
    width_px: float = 1.2
    intensity: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.streak_count <= 0 or self.length_px <= 0 or self.width_px <= 0:
            raise ValueError("streak_count, length_px, width_px must be positive")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside [0,1]")


def synth_rain(clean: ImagePlanar, params: RainParams) -> ImagePlanar:
    """Add parametric rain streaks to the luminance; deterministic per seed."""
    if params.intensity == 0.0:
        return ImagePlanar(clean.width, clean.height, clean.rgb.copy())
    rng = np.random.default_rng(np.random.PCG64(params.seed))
    h, w = clean.height, clean.width
    theta = math.radians(params.angle_deg)
    dx, dy = math.sin(theta), math.cos(theta)
    half = params.length_px / 2.0
    reach = 3.0 * params.width_px
    layer = np.zeros((h, w), dtype=np.float64)
    for _ in range(params.streak_count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        amp = params.intensity * 255.0 * rng.uniform(0.5, 1.0)
        x0, y0 = cx - dx * half, cy - dy * half
        x1, y1 = cx + dx * half, cy + dy * half
        lo_x = max(int(math.floor(min(x0, x1) - reach)), 0)
        hi_x = min(int(math.ceil(max(x0, x1) + reach)) + 1, w)
        lo_y = max(int(math.floor(min(y0, y1) - reach)), 0)
        hi_y = min(int(math.ceil(max(y0, y1) + reach)) + 1, h)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        xs, ys = np.meshgrid(np.arange(lo_x, hi_x, dtype=np.float64),
                             np.arange(lo_y, hi_y, dtype=np.float64))
        vx, vy = x1 - x0, y1 - y0
        seg_len2 = vx * vx + vy * vy
        t = np.clip(((xs - x0) * vx + (ys - y0) * vy) / seg_len2, 0.0, 1.0)
        d2 = (xs - (x0 + t * vx)) ** 2 + (ys - (y0 + t * vy)) ** 2
        layer[lo_y:hi_y, lo_x:hi_x] += amp * np.exp(
            -d2 / (2.0 * params.width_px ** 2))
    rainy = np.clip(clean.rgb.astype(np.float64) + layer[..., None], 0.0, 255.0)
    return ImagePlanar(clean.width, clean.height, np.rint(rainy).astype(np.uint8))
