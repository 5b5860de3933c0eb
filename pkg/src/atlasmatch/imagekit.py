"""Grayscale images: PGM I/O, CLAHE, bilinear resize and centered affine warps.

Images are immutable 2D rasters with float intensities in [0, 1]. The only
disk format is binary PGM (P5, maxval 255), which round-trips bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MalformedHeader(ValueError):
    """PGM header is not a binary P5 header."""


class TruncatedPayload(ValueError):
    """PGM payload holds fewer than width*height bytes."""


class UnsupportedMaxval(ValueError):
    """PGM maxval is not 255."""


class IoFailure(OSError):
    """Underlying filesystem write/read failed."""


class TileLargerThanImage(ValueError):
    """CLAHE tile grid has more tiles than pixels along an axis."""


class SingularTransform(ValueError):
    """Affine matrix is not invertible (|det| < 1e-8)."""


_DET_EPS = 1e-8


@dataclass(frozen=True)
class GrayImage:
    """2D grayscale raster; `pixels` is an (H, W) float array in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim != 2:
            raise ValueError(f"pixels must be 2D, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("pixels contain non-finite values")
        lo, hi = float(px.min()), float(px.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities must lie in [0, 1], got [{lo}, {hi}]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class AffineTransform:
    """2x3 affine transform.

    The linear part (a11, a12, a21, a22) acts about the image center;
    (tx, ty) translate by a fraction of the output width/height, so the same
    transform means the same relative motion at every resolution.
    """

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.a11, self.a12, self.a21, self.a22, self.tx, self.ty)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"affine parameters must be finite, got {vals}")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_params(cls, params) -> "AffineTransform":
        a11, a12, a21, a22, tx, ty = (float(v) for v in params)
        return cls(a11, a12, a21, a22, tx, ty)

    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def inverse(self) -> "AffineTransform":
        d = self.det()
        if abs(d) < _DET_EPS:
            raise SingularTransform(f"|det| = {abs(d):g} < {_DET_EPS:g}")
        i11, i12 = self.a22 / d, -self.a12 / d
        i21, i22 = -self.a21 / d, self.a11 / d
        return AffineTransform(
            i11, i12, i21, i22,
            -(i11 * self.tx + i12 * self.ty),
            -(i21 * self.tx + i22 * self.ty),
        )

    def compose(self, first: "AffineTransform") -> "AffineTransform":
        """Transform equivalent to applying `first`, then `self` (square images)."""
        a = self.matrix() @ first.matrix()
        t = self.matrix() @ np.array([first.tx, first.ty]) + np.array([self.tx, self.ty])
        return AffineTransform(a[0, 0], a[0, 1], a[1, 0], a[1, 1], t[0], t[1])


def make_affine(rotation_deg: float = 0.0, scale: float = 1.0,
                tx: float = 0.0, ty: float = 0.0) -> AffineTransform:
    """Rotation (counter-clockwise in x-right/y-down pixel coords) + isotropic scale + fractional shift."""
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    return AffineTransform(scale * c, -scale * s, scale * s, scale * c, tx, ty)


@dataclass(frozen=True)
class ClaheConfig:
    """Contrast-limited adaptive histogram equalization parameters."""

    tile_grid: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tile_grid < 1:
            raise ValueError(f"tile_grid must be >= 1, got {self.tile_grid}")
        if self.clip_limit < 1.0:
            raise ValueError(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")


# ---------------------------------------------------------------------------
# PGM I/O


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header")
    return data[start:pos], pos


def load_pgm(path) -> GrayImage:
    """Read a binary PGM (P5, maxval 255) as intensities value/255."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        magic, pos = _next_token(data, 0)
    except MalformedHeader:
        raise MalformedHeader(f"{path}: empty or unreadable header") from None
    if magic != b"P5":
        raise MalformedHeader(f"{path}: expected magic P5, got {magic!r}")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _next_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise MalformedHeader(f"{path}: non-numeric {name} {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeader(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte separates header from payload
    payload = data[pos:pos + width * height]
    if len(payload) < width * height:
        raise TruncatedPayload(
            f"{path}: need {width * height} payload bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(raw.astype(np.float64) / 255.0)


def save_pgm(img: GrayImage, path) -> None:
    """Write binary PGM; intensities quantized with round-half-up to 8 bits."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    quantized = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    try:
        Path(path).write_bytes(header + quantized.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# CLAHE


def clahe(img: GrayImage, cfg: ClaheConfig = ClaheConfig()) -> GrayImage:
    """Per-tile clipped histogram equalization with bilinear tile blending.

    Each tile's histogram is clipped at clip_limit times the uniform bin
    height, the excess redistributed evenly, and values mapped through the
    tile CDF. Tiles whose pixels are all equal keep the identity mapping
    (bin centers), so constant images pass through as constants.
    """
    h, w = img.shape
    g = cfg.tile_grid
    if g > h or g > w:
        raise TileLargerThanImage(
            f"tile grid {g}x{g} exceeds image {w}x{h}; tiles would be empty")
    th, tw = -(-h // g), -(-w // g)  # ceil division
    pad_h, pad_w = g * th - h, g * tw - w
    px = np.pad(img.pixels, ((0, pad_h), (0, pad_w)), mode="edge")

    bins = cfg.bins
    ib = np.minimum((px * bins).astype(np.int64), bins - 1)
    tiles = ib.reshape(g, th, g, tw).transpose(0, 2, 1, 3).reshape(g, g, th * tw)

    npix = th * tw
    luts = np.empty((g, g, bins))
    identity_lut = (np.arange(bins) + 0.5) / bins
    clip_val = cfg.clip_limit * npix / bins
    for i in range(g):
        for j in range(g):
            hist = np.bincount(tiles[i, j], minlength=bins).astype(np.float64)
            if np.count_nonzero(hist) <= 1:
                luts[i, j] = identity_lut
                continue
            excess = np.maximum(hist - clip_val, 0.0).sum()
            hist = np.minimum(hist, clip_val) + excess / bins
            luts[i, j] = np.cumsum(hist) / npix

    hp, wp = px.shape
    fy = np.clip((np.arange(hp) - (th - 1) / 2.0) / th, 0.0, g - 1.0)
    fx = np.clip((np.arange(wp) - (tw - 1) / 2.0) / tw, 0.0, g - 1.0)
    i0 = np.minimum(fy.astype(np.int64), g - 1)
    j0 = np.minimum(fx.astype(np.int64), g - 1)
    i1 = np.minimum(i0 + 1, g - 1)
    j1 = np.minimum(j0 + 1, g - 1)
    wy = (fy - i0)[:, None]
    wx = (fx - j0)[None, :]

    i0c, i1c = i0[:, None], i1[:, None]
    j0c, j1c = j0[None, :], j1[None, :]
    out = ((1 - wy) * (1 - wx) * luts[i0c, j0c, ib]
           + (1 - wy) * wx * luts[i0c, j1c, ib]
           + wy * (1 - wx) * luts[i1c, j0c, ib]
           + wy * wx * luts[i1c, j1c, ib])
    return GrayImage(np.clip(out[:h, :w], 0.0, 1.0))


# ---------------------------------------------------------------------------
# Sampling, warping, resizing


def bilinear_sample(pixels: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample `pixels` at real coordinates (sx, sy); outside contributions are 0."""
    h, w = pixels.shape
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def fetch(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = pixels[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(valid, vals, 0.0)

    return ((1 - fy) * (1 - fx) * fetch(y0, x0)
            + (1 - fy) * fx * fetch(y0, x1)
            + fy * (1 - fx) * fetch(y1, x0)
            + fy * fx * fetch(y1, x1))


def warp_affine(img: GrayImage, t: AffineTransform,
                out_w: int | None = None, out_h: int | None = None) -> GrayImage:
    """Inverse-mapping warp: each output pixel samples the input at T^-1(x, y).

    Out-of-bounds samples fill with 0, mimicking a black background.
    """
    out_w = img.width if out_w is None else out_w
    out_h = img.height if out_h is None else out_h
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dimensions must be >= 1, got {out_w}x{out_h}")
    inv = t.inverse()  # raises SingularTransform

    cx_out, cy_out = (out_w - 1) / 2.0, (out_h - 1) / 2.0
    cx_in, cy_in = (img.width - 1) / 2.0, (img.height - 1) / 2.0
    xs = np.arange(out_w, dtype=np.float64)[None, :] - cx_out - t.tx * out_w
    ys = np.arange(out_h, dtype=np.float64)[:, None] - cy_out - t.ty * out_h
    sx = inv.a11 * xs + inv.a12 * ys + cx_in
    sy = inv.a21 * xs + inv.a22 * ys + cy_in
    out = bilinear_sample(img.pixels, np.broadcast_to(sx, (out_h, out_w)),
                          np.broadcast_to(sy, (out_h, out_w)))
    return GrayImage(np.clip(out, 0.0, 1.0))


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Bilinear resize with endpoint-aligned sampling; same-size resize is exact."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dimensions must be >= 1, got {out_w}x{out_h}")
    h, w = img.shape

    def grid(n_out, n_in):
        if n_out == 1:
            return np.full(1, (n_in - 1) / 2.0)
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    sx = grid(out_w, w)[None, :]
    sy = grid(out_h, h)[:, None]
    out = bilinear_sample(img.pixels, np.broadcast_to(sx, (out_h, out_w)),
                          np.broadcast_to(sy, (out_h, out_w)))
    return GrayImage(np.clip(out, 0.0, 1.0))


def binomial_blur5(pixels: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial ([1,4,6,4,1]/16) blur with edge replication."""
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    padded = np.pad(pixels, ((2, 2), (0, 0)), mode="edge")
    out = sum(kernel[k] * padded[k:k + pixels.shape[0], :] for k in range(5))
    padded = np.pad(out, ((0, 0), (2, 2)), mode="edge")
    return sum(kernel[k] * padded[:, k:k + pixels.shape[1]] for k in range(5))
