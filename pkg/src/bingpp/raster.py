"""Image decoding, grayscale conversion, resizing, gradients and Canny edges.

Images are plain numpy arrays: a gray image is a ``(H, W)`` uint8 array and a
color image is a ``(H, W, 3)`` uint8 array in RGB order. Every function here is
pure and never mutates its input.
"""

from __future__ import annotations

import io
import re
from typing import NamedTuple

import numba
import numpy as np
from scipy import ndimage

from .errors import CorruptPayload, UnsupportedFormat, ZeroDimension

try:  # optional PNG/JPEG support
    from PIL import Image as _PILImage
except ImportError:  # pragma: no cover
    _PILImage = None

HAS_EXTERNAL_DECODER = _PILImage is not None

CANNY_SIGMA = 1.0
CANNY_LOW = 50.0
CANNY_HIGH = 100.0


class GradientMap(NamedTuple):
    gx: np.ndarray
    gy: np.ndarray
    mag: np.ndarray


# ---------------------------------------------------------------------------
# decoding / encoding

_PNM_MAGIC = {b"P5": 1, b"P6": 3, b"P2": 1, b"P3": 3}
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pnm_header(payload: bytes):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(payload, pos)
        if m is None:
            raise CorruptPayload("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptPayload(f"bad PNM header field: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise CorruptPayload(f"invalid PNM dimensions {width}x{height} maxval={maxval}")
    return magic, width, height, maxval, pos


def _decode_pnm(payload: bytes) -> np.ndarray:
    magic, width, height, maxval, pos = _pnm_header(payload)
    channels = _PNM_MAGIC[magic]
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        # exactly one whitespace byte separates the header from the raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        nbytes = count * dtype.itemsize
        raw = payload[pos : pos + nbytes]
        if len(raw) < nbytes:
            raise CorruptPayload(f"raster truncated: need {nbytes} bytes, got {len(raw)}")
        data = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    else:
        fields = payload[pos:].split()
        if len(fields) < count:
            raise CorruptPayload("ASCII raster truncated")
        try:
            data = np.array([int(v) for v in fields[:count]], dtype=np.int64)
        except ValueError as exc:
            raise CorruptPayload(str(exc)) from None
    if data.max(initial=0) > maxval:
        raise CorruptPayload("sample exceeds maxval")
    if maxval != 255:
        data = np.floor(data * 255.0 / maxval + 0.5).astype(np.int64)
    data = data.astype(np.uint8).reshape(height, width, channels)
    if channels == 1:
        data = np.repeat(data, 3, axis=2)
    return data


def decode_image(payload: bytes) -> np.ndarray:
    """Decode an encoded image into an ``(H, W, 3)`` uint8 RGB array.

    PPM/PGM (binary and ASCII) are decoded natively and pixel-exactly. PNG and
    JPEG are accepted when Pillow is importable.
    """
    if not payload:
        raise CorruptPayload("empty payload")
    if payload[:2] in _PNM_MAGIC:
        return _decode_pnm(payload)
    if payload[:1] == b"P" and payload[1:2].isdigit():
        raise UnsupportedFormat(f"unsupported PNM variant {payload[:2]!r}")
    if HAS_EXTERNAL_DECODER:
        try:
            with _PILImage.open(io.BytesIO(payload)) as im:
                im.load()
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        except _PILImage.UnidentifiedImageError:
            raise UnsupportedFormat("unrecognised image format") from None
        except (OSError, SyntaxError) as exc:
            raise CorruptPayload(str(exc)) from None
    raise UnsupportedFormat("unrecognised image format and no external decoder")


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("encode_ppm expects an (H, W, 3) array")
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("encode_pgm expects an (H, W) array")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


# ---------------------------------------------------------------------------
# pixel operations


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded half up. Gray input is returned unchanged."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=False)
    # exact integer form of floor(0.299 R + 0.587 G + 0.114 B + 0.5)
    rgb = img.astype(np.int32)
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


def _axis_taps(n_src: int, n_dst: int):
    # half-pixel centres: dst pixel i samples src coordinate (i + 0.5) * n_src / n_dst - 0.5
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, src - i0


@numba.njit(cache=True, nogil=True)
def _bilinear(data, y0, y1, fy, x0, x1, fx, to_byte):
    # rows first, then columns; matches the separable float formulation exactly
    nh = y0.shape[0]
    nw = x0.shape[0]
    c = data.shape[2]
    out = np.empty((nh, nw, c), dtype=np.float64)
    for i in range(nh):
        a = y0[i]
        b = y1[i]
        wy = fy[i]
        for j in range(nw):
            p = x0[j]
            q = x1[j]
            wx = fx[j]
            for k in range(c):
                left = data[a, p, k] * (1.0 - wy) + data[b, p, k] * wy
                right = data[a, q, k] * (1.0 - wy) + data[b, q, k] * wy
                v = left * (1.0 - wx) + right * wx
                if to_byte:
                    v = np.floor(v + 0.5)
                    v = min(max(v, 0.0), 255.0)
                out[i, j, k] = v
    return out


def resize(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize with the half-pixel-centre sampling grid.

    uint8 input is rounded back to uint8; float input stays float64.
    """
    if new_w < 1 or new_h < 1:
        raise ZeroDimension(f"target size {new_w}x{new_h}")
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (w, h) == (new_w, new_h):
        return img.copy()
    data = img if img.ndim == 3 else img[..., None]
    y0, y1, fy = _axis_taps(h, new_h)
    x0, x1, fx = _axis_taps(w, new_w)
    is_byte = img.dtype == np.uint8
    src = data if is_byte else data.astype(np.float64)
    out = _bilinear(src, y0, y1, fy, x0, x1, fx, is_byte)
    if img.ndim == 2:
        out = out[..., 0]
    return out.astype(np.uint8) if is_byte else out


def _diff(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    d = np.zeros_like(a)
    if a.shape[0] > 1:
        d[1:-1] = (a[2:] - a[:-2]) * 0.5
        d[0] = a[1] - a[0]
        d[-1] = a[-1] - a[-2]
    return np.moveaxis(d, 0, axis)


def gradients(img: np.ndarray) -> GradientMap:
    """Central-difference gradients (one-sided at borders) and the clamped L1 norm."""
    f = to_gray(img).astype(np.float64)
    gx = _diff(f, 1)
    gy = _diff(f, 0)
    mag = np.minimum(np.abs(gx) + np.abs(gy), 255.0)
    return GradientMap(gx, gy, mag)


@numba.njit(cache=True, nogil=True)
def _gradient_bytes(f):
    h, w = f.shape
    out = np.empty((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            if w == 1:
                gx = 0.0
            elif x == 0:
                gx = float(f[y, 1]) - float(f[y, 0])
            elif x == w - 1:
                gx = float(f[y, x]) - float(f[y, x - 1])
            else:
                gx = (float(f[y, x + 1]) - float(f[y, x - 1])) * 0.5
            if h == 1:
                gy = 0.0
            elif y == 0:
                gy = float(f[1, x]) - float(f[0, x])
            elif y == h - 1:
                gy = float(f[y, x]) - float(f[y - 1, x])
            else:
                gy = (float(f[y + 1, x]) - float(f[y - 1, x])) * 0.5
            m = min(abs(gx) + abs(gy), 255.0)
            out[y, x] = np.uint8(np.floor(m + 0.5))
    return out


def gradient_bytes(img: np.ndarray) -> np.ndarray:
    """Normed-gradient map rounded to bytes (same values as ``gradients().mag``)."""
    return _gradient_bytes(np.ascontiguousarray(to_gray(img)))


# ---------------------------------------------------------------------------
# Canny


def canny(
    img: np.ndarray,
    low: float = CANNY_LOW,
    high: float = CANNY_HIGH,
    sigma: float = CANNY_SIGMA,
) -> np.ndarray:
    """Classical Canny detector returning a boolean edge mask.

    Thresholds apply to the L2 norm of the unnormalised 3x3 Sobel response of
    the Gaussian-smoothed image, the usual OpenCV scale.
    """
    if not 0 <= low <= high:
        raise ValueError(f"need 0 <= low <= high, got {low}, {high}")
    f = to_gray(img).astype(np.float64)
    if sigma > 0:
        f = ndimage.gaussian_filter(f, sigma, mode="nearest", truncate=3.0)
    gx = ndimage.sobel(f, axis=1, mode="nearest")
    gy = ndimage.sobel(f, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)

    # quantise gradient direction into 0/45/90/135 degree bins
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(np.int8)) % 4
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dx, dy) in enumerate(((1, 0), (1, 1), (0, 1), (-1, 1))):
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        back = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # strict on one side so plateaus of width two thin to a single pixel
        keep |= (sector == s) & (mag > back) & (mag >= fwd)

    weak = keep & (mag >= low)
    strong = keep & (mag >= high)
    if not strong.any():
        return np.zeros(mag.shape, dtype=bool)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    hit = np.zeros(n + 1, dtype=bool)
    hit[labels[strong]] = True
    hit[0] = False
    return hit[labels]
