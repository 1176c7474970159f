"""Heatmap post-processing and image IO.

Holds the Heatmap carrier (nonnegative single-channel grid plus
provenance), max-normalization with an explicit degenerate flag,
align-corners-false bilinear upsampling, piecewise-linear colormaps,
alpha blending, and bit-exact P5/P6 pixmap plus PNG codecs.
"""

import io
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image, UnidentifiedImageError

_DEGENERATE_EPS = 1e-12


@dataclass
class Heatmap:
    grid: np.ndarray             # (H, W) float32, entries >= 0
    resolution: str              # "feature" | "input" | "grid"
    method: str
    target_class: int
    normalized: bool = False     # True once scaled to unit range
    degenerate: bool = False     # all-zero map, normalization was a no-op

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError(f"heatmap grid must be 2D, got {self.grid.ndim}D")
        if self.grid.size and float(self.grid.min()) < 0:
            raise ValueError("heatmap entries must be >= 0")


def normalize(hm: Heatmap) -> Heatmap:
    """Scale so max == 1; an (all but) all-zero map comes back zeroed with
    the degenerate flag set instead of erroring. Idempotent."""
    m = float(hm.grid.max()) if hm.grid.size else 0.0
    if m < _DEGENERATE_EPS:
        return replace(hm, grid=np.zeros_like(hm.grid), normalized=True,
                       degenerate=True)
    return replace(hm, grid=hm.grid / np.float32(m), normalized=True,
                   degenerate=False)


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Any-size bilinear resample, align-corners-false, edge-clamped."""
    h, w = grid.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(np.float32)[:, None]
    fx = (sx - x0).astype(np.float32)[None, :]
    g = grid.astype(np.float32)
    top = g[np.ix_(y0, x0)] * (1 - fx) + g[np.ix_(y0, x1)] * fx
    bot = g[np.ix_(y1, x0)] * (1 - fx) + g[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def upsample_bilinear(hm: Heatmap, out_hw: tuple[int, int]) -> Heatmap:
    out_h, out_w = out_hw
    h, w = hm.grid.shape
    if out_h < h or out_w < w:
        raise ValueError(
            f"upsample target {out_h}x{out_w} smaller than map {h}x{w}")
    return replace(hm, grid=resize_bilinear(hm.grid, out_h, out_w),
                   resolution="input")


# ----------------------------------------------------------------- color

@dataclass(frozen=True)
class ColorMap:
    stops: tuple[tuple[float, tuple[int, int, int]], ...]

    def __post_init__(self):
        ts = [t for t, _ in self.stops]
        if len(ts) < 2 or ts[0] != 0.0 or ts[-1] != 1.0:
            raise ValueError("colormap stops must start at 0 and end at 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("colormap stops must be strictly increasing")


THERMAL = ColorMap(stops=(
    (0.00, (0, 0, 128)),
    (0.25, (0, 255, 255)),
    (0.50, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.00, (128, 0, 0)),
))


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray           # (H, W, 3) uint8

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel buffer {self.pixels.shape} != {self.height}x{self.width}x3")


def _round_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a + 0.5), 0, 255).astype(np.uint8)


def colorize(hm: Heatmap, cmap: ColorMap = THERMAL) -> RgbImage:
    """Piecewise-linear color lookup on a unit-range map. A degenerate map
    renders as the coldest color everywhere."""
    if not hm.normalized:
        raise ValueError("colorize needs a unit-range (normalized) heatmap")
    v = np.clip(hm.grid, 0.0, 1.0).astype(np.float64)
    if hm.degenerate:
        v = np.zeros_like(v)
    ts = np.array([t for t, _ in cmap.stops])
    cols = np.array([c for _, c in cmap.stops], dtype=np.float64)
    seg = np.clip(np.searchsorted(ts, v, side="right") - 1, 0, len(ts) - 2)
    t0, t1 = ts[seg], ts[seg + 1]
    f = ((v - t0) / (t1 - t0))[..., None]
    rgb = cols[seg] * (1 - f) + cols[seg + 1] * f
    return RgbImage(width=v.shape[1], height=v.shape[0], pixels=_round_u8(rgb))


def gray_to_rgb(gray01: np.ndarray) -> RgbImage:
    """Float [0,1] grayscale or CxHxW image to 8-bit RGB."""
    a = np.asarray(gray01, dtype=np.float64)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        if a.shape[2] == 1:
            a = np.repeat(a, 3, axis=2)
        elif a.shape[2] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {a.shape[2]}")
    elif a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    else:
        raise ValueError("expected HxW or CxHxW input")
    return RgbImage(width=a.shape[1], height=a.shape[0],
                    pixels=_round_u8(a * 255.0))


def overlay(base: RgbImage, heat: RgbImage, alpha: float) -> RgbImage:
    if (base.width, base.height) != (heat.width, heat.height):
        raise ValueError(
            f"overlay dims {base.width}x{base.height} != "
            f"{heat.width}x{heat.height}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    mix = (1.0 - alpha) * base.pixels.astype(np.float64) \
        + alpha * heat.pixels.astype(np.float64)
    return RgbImage(width=base.width, height=base.height, pixels=_round_u8(mix))


# ----------------------------------------------------------------- pixmaps

class PnmError(ValueError):
    """Malformed P5/P6 header."""


class PnmTruncatedError(PnmError):
    """Pixel payload shorter than the header promises."""


def encode_ppm(img: RgbImage) -> bytes:
    return (f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
            + img.pixels.tobytes())


def encode_pgm(gray_u8: np.ndarray) -> bytes:
    g = np.ascontiguousarray(gray_u8, dtype=np.uint8)
    if g.ndim != 2:
        raise ValueError("encode_pgm wants an HxW uint8 array")
    return (f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
            + g.tobytes())


def _parse_pnm(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise PnmError(f"not a {magic.decode()} pixmap")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise PnmError(f"malformed header token {tok!r}")
        fields.append(int(tok))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PnmError("missing whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    return w, h, data[pos:]


def decode_ppm(data: bytes) -> RgbImage:
    w, h, payload = _parse_pnm(data, b"P6")
    if len(payload) < 3 * w * h:
        raise PnmTruncatedError(
            f"P6 payload holds {len(payload)} bytes, needs {3 * w * h}")
    px = np.frombuffer(payload[:3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return RgbImage(width=w, height=h, pixels=px.copy())


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, payload = _parse_pnm(data, b"P5")
    if len(payload) < w * h:
        raise PnmTruncatedError(
            f"P5 payload holds {len(payload)} bytes, needs {w * h}")
    return np.frombuffer(payload[:w * h], dtype=np.uint8).reshape(h, w).copy()


# -------------------------------------------------------------------- PNG

class ImageDecodeError(ValueError):
    """Bytes did not decode as any supported image format."""


def encode_png(img: RgbImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> RgbImage:
    try:
        im = Image.open(io.BytesIO(data))
        im = im.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageDecodeError(f"cannot decode PNG: {e}") from e
    px = np.asarray(im, dtype=np.uint8)
    return RgbImage(width=px.shape[1], height=px.shape[0], pixels=px)


def decode_image(data: bytes) -> RgbImage:
    """Sniff PNG / P6 / P5 and decode to RGB."""
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return decode_png(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:2] == b"P5":
        g = decode_pgm(data)
        return RgbImage(width=g.shape[1], height=g.shape[0],
                        pixels=np.repeat(g[:, :, None], 3, axis=2))
    raise ImageDecodeError("unrecognized image format "
                           f"(leading bytes {data[:8]!r})")


def save_image(img: RgbImage, path) -> None:
    path = str(path)
    if path.endswith(".ppm"):
        with open(path, "wb") as f:
            f.write(encode_ppm(img))
    elif path.endswith(".png"):
        with open(path, "wb") as f:
            f.write(encode_png(img))
    else:
        raise ValueError(f"unsupported image extension on {path!r}")
