"""Slide containers, tiled PNG I/O, and binary/gray raster operations.

Gray rasters are 2-D ``uint8`` arrays, binary rasters 2-D ``bool`` arrays.
Slides are stored as a JSON manifest next to a directory of PNG tiles named
``tile_{row}_{col}.png``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionMismatch, EvenElement, ManifestParse, MissingInputError, MissingTile

STAINS = ("HE", "CD30", "PAX5")

# Background box (all channels) widened by TISSUE_MARGIN
BACKGROUND_LO = np.array([214, 214, 213])
BACKGROUND_HI = np.array([247, 247, 247])
TISSUE_MARGIN = 8

GrayRaster = np.ndarray
BinaryRaster = np.ndarray


@dataclass(frozen=True)
class SlideManifest:
    slide_id: str
    patient_id: str
    stain: str
    label: str
    base_magnification: float
    width_px: int
    height_px: int
    tile_size_px: int
    tile_dir: str

    def __post_init__(self):
        if self.stain not in STAINS:
            raise ManifestParse(f"unknown stain {self.stain!r}; expected one of {STAINS}")
        if not self.base_magnification > 0:
            raise ManifestParse("base_magnification must be > 0")
        for name in ("width_px", "height_px", "tile_size_px"):
            if int(getattr(self, name)) <= 0:
                raise ManifestParse(f"{name} must be a positive integer")

    @property
    def grid(self) -> tuple[int, int]:
        """Tile grid shape as (rows, cols)."""
        t = self.tile_size_px
        return -(-self.height_px // t), -(-self.width_px // t)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "SlideManifest":
        fields = set(cls.__dataclass_fields__)
        missing = fields - set(data)
        extra = set(data) - fields
        if missing or extra:
            raise ManifestParse(f"manifest keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        try:
            return cls(
                slide_id=str(data["slide_id"]),
                patient_id=str(data["patient_id"]),
                stain=str(data["stain"]),
                label=str(data["label"]),
                base_magnification=float(Fraction(str(data["base_magnification"]))),
                width_px=int(data["width_px"]),
                height_px=int(data["height_px"]),
                tile_size_px=int(data["tile_size_px"]),
                tile_dir=str(data["tile_dir"]),
            )
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            raise ManifestParse(f"bad manifest value: {exc}") from exc


def _scale_factor(base: float, magnification: float) -> Fraction:
    """Downscale factor base/magnification as an exact fraction."""
    f = Fraction(str(base)) / Fraction(str(magnification))
    if f < 1:
        raise ValueError(f"cannot read at {magnification}x above base {base}x")
    return f.limit_denominator(1000)


def box_downscale(pixels: np.ndarray, factor: Fraction | int) -> np.ndarray:
    """Area-average downscale of a uint8 image by a rational factor.

    Each output pixel averages the input area it covers; the result is
    rounded half-up. Integer factors reduce to plain block means. Trailing
    rows/columns that do not fill a whole output pixel are dropped.
    """
    factor = Fraction(factor)
    if factor == 1:
        return pixels.copy()
    p, q = factor.numerator, factor.denominator
    img = pixels.astype(np.int64)
    if q > 1:
        img = np.repeat(np.repeat(img, q, axis=0), q, axis=1)
    h, w = img.shape[0] // p, img.shape[1] // p
    img = img[: h * p, : w * p]
    blocks = img.reshape(h, p, w, p, *img.shape[2:]).sum(axis=(1, 3))
    area = p * p
    # round half up in exact integer arithmetic
    return ((2 * blocks + area) // (2 * area)).astype(np.uint8)


class SlideRaster:
    """Read-only RGB slide held at base magnification.

    ``read(mag)`` returns the whole slide resampled to ``mag``; results are
    cached so repeated reads are identical and cheap.
    """

    def __init__(self, manifest: SlideManifest, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.shape != (manifest.height_px, manifest.width_px, 3):
            raise DimensionMismatch(
                f"{manifest.slide_id}: pixels {pixels.shape} != manifest "
                f"{(manifest.height_px, manifest.width_px, 3)}"
            )
        self.manifest = manifest
        self._pixels = pixels.astype(np.uint8, copy=False)
        self._pixels.setflags(write=False)
        self._cache: dict[Fraction, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def slide_id(self) -> str:
        return self.manifest.slide_id

    @property
    def base_magnification(self) -> float:
        return self.manifest.base_magnification

    def size_at(self, magnification: float) -> tuple[int, int]:
        """(width, height) in pixels at ``magnification``."""
        f = _scale_factor(self.base_magnification, magnification)
        w, h = self.manifest.width_px, self.manifest.height_px
        return int(w * f.denominator // f.numerator), int(h * f.denominator // f.numerator)

    def read(self, magnification: float | None = None) -> np.ndarray:
        if magnification is None:
            return self._pixels
        f = _scale_factor(self.base_magnification, magnification)
        if f == 1:
            return self._pixels
        with self._lock:
            out = self._cache.get(f)
            if out is None:
                out = box_downscale(self._pixels, f)
                out.setflags(write=False)
                self._cache[f] = out
        return out

    def read_region(self, x: int, y: int, width: int, height: int, magnification=None) -> np.ndarray:
        img = self.read(magnification)
        if x < 0 or y < 0 or x + width > img.shape[1] or y + height > img.shape[0]:
            raise ValueError(f"region ({x},{y},{width},{height}) outside slide {img.shape[1::-1]}")
        return img[y : y + height, x : x + width]

    def with_pixels(self, pixels: np.ndarray, magnification: float | None = None) -> "SlideRaster":
        """New raster sharing this manifest's metadata but holding ``pixels``."""
        m = self.manifest
        mag = m.base_magnification if magnification is None else magnification
        manifest = SlideManifest(
            m.slide_id, m.patient_id, m.stain, m.label, mag,
            pixels.shape[1], pixels.shape[0], m.tile_size_px, m.tile_dir,
        )
        return SlideRaster(manifest, pixels)


def load_slide(manifest_path) -> SlideRaster:
    manifest_path = Path(manifest_path)
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MissingInputError(f"manifest not found: {manifest_path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestParse(f"{manifest_path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestParse(f"{manifest_path}: manifest must be a JSON object")
    manifest = SlideManifest.from_dict(data)
    tile_dir = Path(manifest.tile_dir)
    if not tile_dir.is_absolute():
        tile_dir = manifest_path.parent / tile_dir

    t = manifest.tile_size_px
    rows, cols = manifest.grid
    pixels = np.empty((manifest.height_px, manifest.width_px, 3), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            path = tile_dir / f"tile_{r}_{c}.png"
            if not path.is_file():
                raise MissingTile(f"{manifest.slide_id}: missing {path.name}")
            h = min(t, manifest.height_px - r * t)
            w = min(t, manifest.width_px - c * t)
            try:
                with Image.open(path) as im:
                    tile = np.asarray(im.convert("RGB"))
            except OSError as exc:
                raise MissingTile(f"{manifest.slide_id}: cannot decode {path.name}: {exc}") from exc
            if tile.shape[:2] != (h, w):
                raise DimensionMismatch(
                    f"{manifest.slide_id}: {path.name} is {tile.shape[1]}x{tile.shape[0]}, expected {w}x{h}"
                )
            pixels[r * t : r * t + h, c * t : c * t + w] = tile
    return SlideRaster(manifest, pixels)


def save_slide(slide: SlideRaster, out_dir, tile_dir: str = "tiles") -> Path:
    """Write ``manifest.json`` and PNG tiles under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    m = slide.manifest
    manifest = SlideManifest(
        m.slide_id, m.patient_id, m.stain, m.label, m.base_magnification,
        m.width_px, m.height_px, m.tile_size_px, tile_dir,
    )
    tiles = out_dir / tile_dir
    tiles.mkdir(parents=True, exist_ok=True)
    pixels = slide.read()
    t = m.tile_size_px
    rows, cols = manifest.grid
    for r in range(rows):
        for c in range(cols):
            tile = pixels[r * t : (r + 1) * t, c * t : (c + 1) * t]
            Image.fromarray(np.ascontiguousarray(tile), "RGB").save(tiles / f"tile_{r}_{c}.png")
    path = out_dir / "manifest.json"
    path.write_text(manifest.to_json(), encoding="utf-8")
    return path


def write_gray_png(raster: np.ndarray, path) -> None:
    arr = np.asarray(raster)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    Image.fromarray(np.ascontiguousarray(arr.astype(np.uint8)), "L").save(path)


def read_gray_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")).copy()


# ---------------------------------------------------------------------------
# raster algebra
# ---------------------------------------------------------------------------


def morph(raster: BinaryRaster, op: str, element: int = 3, iterations: int = 1) -> BinaryRaster:
    """Binary erosion or dilation with an ``element x element`` square.

    Pixels outside the raster count as 0 for both operations.
    """
    if element < 1 or element % 2 == 0:
        raise EvenElement(f"structuring element side must be odd and >= 1, got {element}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    out = np.asarray(raster, dtype=bool)
    if iterations == 0:
        return out.copy()
    structure = np.ones((element, element), dtype=bool)
    if op == "erode":
        return ndimage.binary_erosion(out, structure, iterations=iterations, border_value=0)
    if op == "dilate":
        return ndimage.binary_dilation(out, structure, iterations=iterations, border_value=0)
    raise ValueError(f"unknown morphology op {op!r}")


def opening(raster: BinaryRaster, element: int = 3, erode_iters: int = 1, dilate_iters: int = 1):
    return morph(morph(raster, "erode", element, erode_iters), "dilate", element, dilate_iters)


def threshold(raster: GrayRaster, theta: int) -> BinaryRaster:
    return np.asarray(raster) > theta


def background_pixels(rgb: np.ndarray, margin: int = TISSUE_MARGIN) -> np.ndarray:
    rgb = np.asarray(rgb)
    lo = BACKGROUND_LO - margin
    hi = BACKGROUND_HI + margin
    return np.all((rgb >= lo) & (rgb <= hi), axis=-1)


def tissue_mask(slide: SlideRaster, magnification=None, margin: int = TISSUE_MARGIN) -> BinaryRaster:
    """Pixels outside the (widened) background color box."""
    return ~background_pixels(slide.read(magnification), margin)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """0.299 R + 0.587 G + 0.114 B; exact for gray inputs."""
    rgb = np.asarray(rgb, dtype=float)
    return (299.0 * rgb[..., 0] + 587.0 * rgb[..., 1] + 114.0 * rgb[..., 2]) / 1000.0
