"""Composite biomarker image (CBI), attention masks, and patch selection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, UnknownBiomarker
from .raster import BinaryRaster, GrayRaster, SlideRaster, opening, threshold

THETA_MASK = 32
PATCH_SIDE = 300
PATCH_MAGNIFICATION = 20.0
DEFAULT_TAU = 0.5
DEFAULT_STRIDE = 300
RANDOM_MIN_TISSUE = 0.5
DEFAULT_ORDER = ("CD30", "PAX5")
DEFAULT_COLORS = {"CD30": (165, 82, 42), "PAX5": (214, 40, 160)}
_FALLBACK_COLOR = (90, 90, 90)


@dataclass(frozen=True)
class MorphConfig:
    erode_iters: int = 1
    dilate_iters: int = 1
    element_size: int = 3


@dataclass(frozen=True)
class CbiLayer:
    biomarker: str
    relevance: GrayRaster
    overlay_color: tuple[int, int, int]

    @property
    def present(self) -> BinaryRaster:
        return self.relevance > 0


@dataclass(frozen=True)
class CompositeBiomarkerImage:
    layers: tuple[CbiLayer, ...]  # bottom first

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a CBI needs at least one layer")
        shapes = {layer.relevance.shape for layer in self.layers}
        if len(shapes) != 1:
            raise DimensionMismatch(f"CBI layers differ in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers[0].relevance.shape

    @property
    def order(self) -> tuple[str, ...]:
        return tuple(layer.biomarker for layer in self.layers)

    def top_layer(self) -> np.ndarray:
        """Index of the topmost nonzero layer per pixel, -1 where none."""
        top = np.full(self.shape, -1, dtype=np.int16)
        for i, layer in enumerate(self.layers):
            top[layer.present] = i
        return top

    def render(self, background=(255, 255, 255)) -> np.ndarray:
        colors = np.array([background] + [layer.overlay_color for layer in self.layers], dtype=np.uint8)
        return colors[self.top_layer() + 1]


def build_cbi(
    filtered: Sequence[tuple[str, GrayRaster]] | Mapping[str, GrayRaster],
    morph_cfg: MorphConfig | None = None,
    order: Sequence[str] | None = None,
    colors: Mapping[str, tuple[int, int, int]] | None = None,
    theta_mask: int = THETA_MASK,
) -> CompositeBiomarkerImage:
    """Binarize, open, and stack per-biomarker relevance rasters.

    Layer relevance keeps the original gray level wherever the opened mask
    is set. ``order`` lists biomarkers bottom first; by default CD30 sits
    below PAX5 and any other biomarkers follow in input order.
    """
    morph_cfg = morph_cfg or MorphConfig()
    items = dict(filtered.items() if isinstance(filtered, Mapping) else filtered)
    if not items:
        raise ValueError("no filtered rasters given")
    shapes = {np.asarray(g).shape for g in items.values()}
    if len(shapes) != 1:
        raise DimensionMismatch(f"filtered rasters differ in shape: {sorted(shapes)}")
    if order is None:
        order = [b for b in DEFAULT_ORDER if b in items] + [b for b in items if b not in DEFAULT_ORDER]
    unknown = [b for b in order if b not in items]
    if unknown:
        raise UnknownBiomarker(f"order names biomarkers with no raster: {unknown}")
    colors = {**DEFAULT_COLORS, **(colors or {})}

    layers = []
    for biomarker in order:
        gray = np.asarray(items[biomarker], dtype=np.uint8)
        keep = opening(
            threshold(gray, theta_mask),
            morph_cfg.element_size,
            morph_cfg.erode_iters,
            morph_cfg.dilate_iters,
        )
        layers.append(
            CbiLayer(biomarker, np.where(keep, gray, 0).astype(np.uint8), colors.get(biomarker, _FALLBACK_COLOR))
        )
    return CompositeBiomarkerImage(tuple(layers))


def attention_mask(cbi: CompositeBiomarkerImage, mode: str = "union") -> BinaryRaster:
    stack = np.stack([layer.present for layer in cbi.layers])
    if mode == "union":
        return stack.any(axis=0)
    if mode == "intersection":
        return stack.all(axis=0)
    raise ValueError(f"unknown mask mode {mode!r}")


@dataclass(frozen=True)
class PatchSpec:
    slide_id: str
    x: int
    y: int
    side: int = PATCH_SIDE
    magnification: float = PATCH_MAGNIFICATION
    coverage: float = 1.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PatchSpec":
        return cls(**json.loads(line))


def write_patches(patches: Sequence[PatchSpec], path) -> None:
    Path(path).write_text("".join(p.to_json() + "\n" for p in patches), encoding="utf-8")


def read_patches(path) -> list[PatchSpec]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [PatchSpec.from_json(line) for line in lines if line.strip()]


def _grid_coverage(mask: np.ndarray, side: int, stride: int):
    """Yield (x, y, covered pixel count) for every in-bounds grid patch, row-major."""
    integral = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1)
    for y in range(0, mask.shape[0] - side + 1, stride):
        for x in range(0, mask.shape[1] - side + 1, stride):
            count = (
                integral[y + side, x + side] - integral[y, x + side]
                - integral[y + side, x] + integral[y, x]
            )
            yield x, y, int(count)


def _check_registered(mask, slide, magnification):
    w, h = slide.size_at(magnification)
    if mask.shape != (h, w):
        raise DimensionMismatch(
            f"mask {mask.shape} does not match slide {slide.slide_id} at {magnification}x ({h}, {w})"
        )


def select_patches(
    mask: BinaryRaster,
    slide: SlideRaster,
    tau: float = DEFAULT_TAU,
    stride: int = DEFAULT_STRIDE,
    side: int = PATCH_SIDE,
    magnification: float = PATCH_MAGNIFICATION,
) -> list[PatchSpec]:
    """Grid patches whose mask coverage is at least ``tau``."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    mask = np.asarray(mask, dtype=bool)
    _check_registered(mask, slide, magnification)
    area = side * side
    return [
        PatchSpec(slide.slide_id, x, y, side, magnification, count / area)
        for x, y, count in _grid_coverage(mask, side, stride)
        if count / area >= tau
    ]


def select_patches_random(
    tissue: BinaryRaster,
    slide: SlideRaster,
    count: int,
    seed: int | np.random.Generator,
    stride: int = DEFAULT_STRIDE,
    side: int = PATCH_SIDE,
    magnification: float = PATCH_MAGNIFICATION,
    min_tissue: float = RANDOM_MIN_TISSUE,
) -> list[PatchSpec]:
    """Uniform draw without replacement among grid patches with enough tissue.

    The chosen patches are returned in row-major grid order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    candidates = select_patches(tissue, slide, min_tissue, stride, side, magnification)
    if len(candidates) <= count:
        return candidates
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(candidates), size=count, replace=False))
    return [candidates[i] for i in chosen]
