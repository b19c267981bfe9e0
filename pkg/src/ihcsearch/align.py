"""Global similarity registration of biomarker slides onto the H&E slide.

A :class:`SimilarityTransform` ``t`` maps a point ``p`` of the reference
image to ``s * R(theta) @ (p - c) + c + (tx, ty)`` in the moving image,
where ``c`` is the image center and points are ``(x, y)`` with ``y`` down.
``warp(img, t)`` resamples ``img`` through the inverse of that map, so
``moving = warp(fixed, t)`` is the forward model and
``warp(moving, t.inverse())`` undoes it.

The search is a grid over rotation and scale. For each grid cell the
moving image is un-rotated/un-scaled and the translation is found as the
peak of a masked normalized cross-correlation surface computed by FFT;
the cell with the highest correlation wins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from .errors import ConfigError, FlatImage
from .raster import SlideRaster, luminance, tissue_mask

THUMB_MAGNIFICATION = 1.25
# shifts overlapping less than this fraction of the smaller image are ignored
MIN_OVERLAP = 0.3


@dataclass(frozen=True)
class SimilarityTransform:
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.s <= 2.0:
            raise ConfigError(f"scale {self.s} outside [0.5, 2.0]")
        if not -180 < self.theta <= 180:
            raise ConfigError(f"theta {self.theta} outside (-180, 180]")

    @property
    def matrix(self) -> np.ndarray:
        a = math.radians(self.theta)
        return self.s * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])

    @property
    def is_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.theta == 0 and self.s == 1

    def inverse(self) -> "SimilarityTransform":
        # p = A^-1 (q - c - t) + c
        a_inv = np.linalg.inv(self.matrix)
        t = -a_inv @ np.array([self.tx, self.ty])
        theta = -self.theta if self.theta != 180 else 180.0
        return SimilarityTransform(float(t[0]), float(t[1]), theta, 1.0 / self.s)

    def scaled(self, factor: float) -> "SimilarityTransform":
        """Same transform expressed in pixels ``factor`` times finer."""
        return SimilarityTransform(self.tx * factor, self.ty * factor, self.theta, self.s)

    def to_dict(self, ncc_score: float | None = None) -> dict:
        d = {"tx": self.tx, "ty": self.ty, "theta_deg": self.theta, "scale": self.s}
        if ncc_score is not None:
            d["ncc_score"] = ncc_score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(float(d["tx"]), float(d["ty"]), float(d["theta_deg"]), float(d["scale"]))


def save_transform(t: SimilarityTransform, score: float, path) -> None:
    Path(path).write_text(json.dumps(t.to_dict(score), indent=2), encoding="utf-8")


def load_transform(path) -> tuple[SimilarityTransform, float | None]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return SimilarityTransform.from_dict(d), d.get("ncc_score")


@dataclass(frozen=True)
class SearchGrid:
    theta_range: float = 15.0
    theta_step: float = 1.0
    scale_set: tuple[float, ...] = (0.95, 1.0, 1.05)

    @property
    def thetas(self) -> np.ndarray:
        n = int(round(self.theta_range / self.theta_step))
        return np.arange(-n, n + 1) * self.theta_step


def _center(shape) -> np.ndarray:
    return np.array([(shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0])


def _sample_coords(shape, a: np.ndarray, t: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Source (row, col) coordinates for every output pixel of ``shape``."""
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    px = xs - center[0]
    py = ys - center[1]
    sx = a[0, 0] * px + a[0, 1] * py + center[0] + t[0]
    sy = a[1, 0] * px + a[1, 1] * py + center[1] + t[1]
    return np.stack([sy, sx])


def warp_array(
    img: np.ndarray, t: SimilarityTransform, fill=255.0, output_shape=None, order: int = 1
) -> np.ndarray:
    """Inverse-mapped resampling, ``out(q) = img(t^-1 q)``.

    ``order`` 1 is bilinear, 0 nearest neighbour.
    """
    img = np.asarray(img)
    shape = img.shape[:2] if output_shape is None else output_shape
    if t.is_identity and shape == img.shape[:2]:
        return img.copy()
    inv = t.inverse()
    coords = _sample_coords(shape, inv.matrix, np.array([inv.tx, inv.ty]), _center(img.shape))
    channels = img[..., None] if img.ndim == 2 else img
    out = np.empty(tuple(shape) + (channels.shape[2],), dtype=float)
    for k in range(channels.shape[2]):
        out[..., k] = ndimage.map_coordinates(
            channels[..., k].astype(float), coords, order=order, mode="constant", cval=float(fill)
        )
    out = out[..., 0] if img.ndim == 2 else out
    if img.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out


def warp(slide: SlideRaster, t: SimilarityTransform, magnification=None) -> SlideRaster:
    """Resample ``slide`` through ``t`` (translation given in base pixels).

    Pixels mapped from outside the slide become white.
    """
    mag = slide.base_magnification if magnification is None else magnification
    pixels = slide.read(mag)
    local = t.scaled(mag / slide.base_magnification)
    return slide.with_pixels(warp_array(pixels, local, fill=255), mag)


def registration_thumbnail(slide: SlideRaster, magnification=THUMB_MAGNIFICATION) -> np.ndarray:
    """Inverted luminance of tissue pixels; background is 0."""
    pixels = slide.read(magnification)
    tissue = tissue_mask(slide, magnification)
    return (255.0 - luminance(pixels)) * tissue


# ---------------------------------------------------------------------------
# masked normalized cross-correlation
# ---------------------------------------------------------------------------


def _masked_ncc_surface(fixed, fmask, moving, mmask, fixed_cache=None):
    """NCC of ``fixed`` against ``moving`` shifted by every integer offset.

    Entry ``[dy, dx]`` (with wrap-around indexing for negative shifts)
    compares ``moving(p)`` with ``fixed(p - (dx, dy))``, restricted to
    pixels valid in both images. Returns ``(ncc, fft_shape)``.

    ``fixed_cache`` (a dict) keeps the fixed-image spectra between calls
    that share ``fixed``, ``fmask`` and the moving shape.
    """
    shape = [fixed.shape[i] + moving.shape[i] - 1 for i in range(2)]
    shape = [fft.next_fast_len(s) for s in shape]

    def spec(a):
        return fft.rfft2(a, shape)

    def xcorr(a_spec, b_spec):
        # sum_p b(p) a(p - u)
        return fft.irfft2(np.conj(a_spec) * b_spec, shape)

    key = tuple(shape)
    if fixed_cache is not None and key in fixed_cache:
        F, F2, FM = fixed_cache[key]
    else:
        f = fixed * fmask
        F, F2, FM = spec(f), spec(f * f), spec(fmask)
        if fixed_cache is not None:
            fixed_cache[key] = (F, F2, FM)
    m = moving * mmask
    M, M2, MM = spec(m), spec(m * m), spec(mmask)

    n = np.round(xcorr(FM, MM))
    sum_f = xcorr(F, MM)
    sum_m = xcorr(FM, M)
    sum_f2 = xcorr(F2, MM)
    sum_m2 = xcorr(FM, M2)
    sum_fm = xcorr(F, M)

    eps = np.finfo(float).eps
    n_safe = np.maximum(n, 1)
    num = sum_fm - sum_f * sum_m / n_safe
    var_f = sum_f2 - sum_f**2 / n_safe
    var_m = sum_m2 - sum_m**2 / n_safe
    scale = max(np.max(np.abs(sum_f2)), np.max(np.abs(sum_m2)), 1.0)
    var_f = np.where(var_f > eps * 1e3 * scale, var_f, 0.0)
    var_m = np.where(var_m > eps * 1e3 * scale, var_m, 0.0)
    denom = np.sqrt(var_f * var_m)
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(denom > 0, num / denom, -np.inf)
    min_n = MIN_OVERLAP * min(fmask.sum(), mmask.sum())
    ncc[n < min_n] = -np.inf
    return np.clip(ncc, -1.0, 1.0), shape


def _peak(ncc, shape):
    idx = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    best = float(ncc[idx])
    offs = []
    for axis in range(2):
        i = idx[axis]
        size = shape[axis]
        lo = list(idx)
        hi = list(idx)
        lo[axis] = (i - 1) % size
        hi[axis] = (i + 1) % size
        a, b, c = float(ncc[tuple(lo)]), best, float(ncc[tuple(hi)])
        frac = 0.0
        if np.isfinite(a) and np.isfinite(c):
            d = a - 2 * b + c
            if d < 0:
                frac = float(np.clip(0.5 * (a - c) / d, -0.5, 0.5))
        shift = i if i <= size // 2 else i - size
        offs.append(shift + frac)
    dy, dx = offs
    return np.array([dx, dy]), best


def ncc_score(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Plain normalized cross-correlation over ``mask`` (default all pixels)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a.ravel() @ a.ravel()) * float(b.ravel() @ b.ravel()))
    if denom == 0:
        raise FlatImage("zero variance")
    return float(a.ravel() @ b.ravel()) / denom


def estimate_transform(
    fixed: np.ndarray, moving: np.ndarray, grid: SearchGrid | None = None
) -> tuple[SimilarityTransform, float]:
    """Best similarity transform with ``moving ~= warp(fixed, t)``.

    Translation is in pixels of the given images. Equal scores keep the
    earlier cell (lower theta, then lower scale).
    """
    grid = grid or SearchGrid()
    fixed = np.asarray(fixed, dtype=float)
    moving = np.asarray(moving, dtype=float)
    if fixed.ndim != 2 or moving.ndim != 2:
        raise ValueError("registration expects 2-D gray images")
    if min(fixed.shape) < 8 or min(moving.shape) < 8:
        raise ValueError("registration images are too small")
    if np.ptp(fixed) == 0 or np.ptp(moving) == 0:
        raise FlatImage("cannot register an image with zero variance")

    fmask = np.ones_like(fixed)
    cache: dict = {}
    center = _center(moving.shape)
    best = (-np.inf, None)
    for theta in grid.thetas:
        for s in sorted(grid.scale_set):
            t0 = SimilarityTransform(0.0, 0.0, float(theta), float(s))
            a = t0.matrix
            if t0.is_identity:
                m_img, m_mask = moving, np.ones_like(moving)
            else:
                # m'(p) = moving(A (p - c) + c), valid where the source lies inside
                coords = _sample_coords(moving.shape, a, np.zeros(2), center)
                m_img = ndimage.map_coordinates(moving, coords, order=1, mode="constant", cval=0.0)
                m_mask = (
                    (coords[0] >= 0) & (coords[0] <= moving.shape[0] - 1)
                    & (coords[1] >= 0) & (coords[1] <= moving.shape[1] - 1)
                ).astype(float)
            ncc, shape = _masked_ncc_surface(fixed, fmask, m_img, m_mask, cache)
            u, score = _peak(ncc, shape)
            if score > best[0] + 1e-12:
                t = a @ u
                best = (score, SimilarityTransform(float(t[0]), float(t[1]), float(theta), float(s)))
    score, t = best
    if t is None:
        raise FlatImage("no overlap produced a finite correlation")
    return t, score


def register_slides(
    fixed: SlideRaster,
    moving: SlideRaster,
    magnification: float = THUMB_MAGNIFICATION,
    grid: SearchGrid | None = None,
) -> tuple[SimilarityTransform, float]:
    """Estimate the moving slide's transform, returned in base-magnification pixels."""
    t, score = estimate_transform(
        registration_thumbnail(fixed, magnification),
        registration_thumbnail(moving, magnification),
        grid,
    )
    return t.scaled(moving.base_magnification / magnification), score
