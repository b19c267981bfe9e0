"""Synthetic H&E / CD30 / PAX5 slide triplets with ground truth.

Each case has an irregular tissue region holding a few elliptical tumor
blobs. The H&E slide paints tissue with blue/gray cell colors; inside the
blobs a stripe pattern modulates brightness, with a stripe period that
depends on the diagnosis label. Outside the blobs the texture is identical
for every label, so only tumor patches carry label information.

The biomarker slides share the geometry: blob cells are brown (light,
medium or dark for CD30, medium only for PAX5), other tissue is blue/gray
counterstain. Each biomarker slide is rendered through its own random
similarity transform, mimicking a section cut and scanned separately.

All colors are drawn from the stain range table, so the crisp range
classifier recovers the intended category of every noise-free pixel.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .align import SimilarityTransform
from .anfis import StainCategory, sample_category_pixels
from .errors import ConfigInvalid, MissingInputError
from .raster import SlideManifest, SlideRaster, save_slide, write_gray_png
from .seeds import rng_for

PALETTE_SIZE = 2048
_BG, _TISSUE, _BLOB = 0, 1, 2
_STRIPE_DEPTH = 0.35
_FIELD_DOWNSAMPLE = 32


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 23
    labels: tuple[str, str] = ("CHL", "NLPHL")
    n_first_label: int = 15
    width_px: int = 1500
    height_px: int = 1500
    # slides are generated directly at patch magnification
    base_magnification: float = 20.0
    tile_size_px: int = 512
    tissue_fraction: float = 0.55
    blob_count: tuple[int, int] = (2, 3)
    blob_area_fraction: float = 0.18
    # stripe period inside tumor blobs, base-magnification pixels, per label
    stripe_period_px: tuple[float, float] = (4.0, 9.0)
    cell_px: int = 2
    color_spread: float = 0.5
    misalign_theta: float = 8.0
    misalign_shift_px: float = 48.0
    misalign_scale: float = 0.03
    noise: float = 3.0
    seed: int = 42

    def __post_init__(self):
        problems = []
        if self.n_patients < 1:
            problems.append("n_patients must be >= 1")
        if not 0 <= self.n_first_label <= self.n_patients:
            problems.append("n_first_label must lie in [0, n_patients]")
        if len(self.labels) != 2 or len(self.stripe_period_px) != 2:
            problems.append("exactly two labels and two stripe periods are required")
        if self.width_px < 64 or self.height_px < 64:
            problems.append("slides must be at least 64 x 64")
        if not 0 < self.tissue_fraction < 1:
            problems.append("tissue_fraction must be in (0, 1)")
        if not 0 <= self.blob_area_fraction < self.tissue_fraction:
            problems.append("blob_area_fraction must be in [0, tissue_fraction)")
        lo, hi = self.blob_count
        if not 0 <= lo <= hi:
            problems.append("blob_count must be an ordered non-negative range")
        if self.cell_px < 1 or self.noise < 0 or not 0 < self.color_spread <= 1:
            problems.append("cell_px >= 1, noise >= 0 and color_spread in (0, 1] are required")
        if self.misalign_scale >= 0.5 or self.misalign_theta > 180 or self.misalign_shift_px < 0:
            problems.append("misalignment range out of bounds")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    def label_of(self, patient_index: int) -> str:
        return self.labels[0] if patient_index < self.n_first_label else self.labels[1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCase:
    patient_id: str
    label: str
    slides: dict[str, SlideRaster]
    truth_mask: np.ndarray
    transforms: dict[str, SimilarityTransform] = field(default_factory=dict)

    @property
    def he(self) -> SlideRaster:
        return self.slides["HE"]


def _palettes(config: SynthConfig) -> dict[str, np.ndarray]:
    rng = rng_for(config.seed, "synth", "palette")
    pal = {
        c: sample_category_pixels(c, PALETTE_SIZE, rng, config.color_spread).astype(np.uint8)
        for c in StainCategory
    }
    return {
        "background": pal[StainCategory.BACKGROUND],
        "counterstain": np.concatenate([pal[StainCategory.BLUE], pal[StainCategory.GRAY]]),
        "CD30": np.concatenate(
            [pal[StainCategory.LIGHT_BROWN], pal[StainCategory.MEDIUM_BROWN], pal[StainCategory.DARK_BROWN]]
        ),
        "PAX5": pal[StainCategory.MEDIUM_BROWN],
    }


def _tissue_field(config: SynthConfig, rng) -> np.ndarray:
    """Smooth random field whose upper level set is the tissue region."""
    h, w = config.height_px, config.width_px
    lh, lw = -(-h // _FIELD_DOWNSAMPLE), -(-w // _FIELD_DOWNSAMPLE)
    noise = ndimage.gaussian_filter(rng.standard_normal((lh, lw)), sigma=max(lh, lw) / 16.0)
    noise /= noise.std() + 1e-12
    ys, xs = np.mgrid[0:lh, 0:lw]
    r = np.hypot((ys - (lh - 1) / 2.0) / (lh / 2.0), (xs - (lw - 1) / 2.0) / (lw / 2.0))
    low = 0.45 * noise - 2.0 * r**2
    full = ndimage.zoom(low, (h / lh, w / lw), order=1, grid_mode=True, mode="nearest")
    return full[:h, :w]


def _geometry(config: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Region code map (0 background, 1 tissue, 2 blob) and the blob mask."""
    h, w = config.height_px, config.width_px
    fld = _tissue_field(config, rng)
    level = np.quantile(fld, 1.0 - config.tissue_fraction)
    tissue = fld > level
    blob = np.zeros_like(tissue)
    n_blobs = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
    if n_blobs and config.blob_area_fraction > 0:
        weights = rng.uniform(0.7, 1.3, n_blobs)
        areas = config.blob_area_fraction * h * w * weights / weights.sum()
        # blob centers come from the tissue core, away from the boundary
        core = np.argwhere(fld[::8, ::8] > np.quantile(fld, 1.0 - 0.35 * config.tissue_fraction)) * 8
        if len(core) == 0:
            core = np.argwhere(tissue[::8, ::8]) * 8
        ys, xs = np.ogrid[0:h, 0:w]
        for area in areas:
            cy, cx = core[rng.integers(len(core))]
            aspect = rng.uniform(0.75, 1.33)
            a = math.sqrt(area / math.pi * aspect)
            b = math.sqrt(area / math.pi / aspect)
            phi = rng.uniform(0, math.pi)
            dx, dy = xs - cx, ys - cy
            u = dx * math.cos(phi) + dy * math.sin(phi)
            v = -dx * math.sin(phi) + dy * math.cos(phi)
            blob |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
        blob &= tissue
    code = np.where(blob, _BLOB, np.where(tissue, _TISSUE, _BG)).astype(np.uint8)
    return code, blob


def _random_transform(config: SynthConfig, rng) -> SimilarityTransform:
    return SimilarityTransform(
        float(rng.uniform(-1, 1) * config.misalign_shift_px),
        float(rng.uniform(-1, 1) * config.misalign_shift_px),
        float(rng.uniform(-1, 1) * config.misalign_theta),
        float(1.0 + rng.uniform(-1, 1) * config.misalign_scale),
    )


def _source_coords(config: SynthConfig, t: SimilarityTransform):
    """Nearest source pixel (row, col) for every output pixel, plus validity."""
    h, w = config.height_px, config.width_px
    ys, xs = np.mgrid[0:h, 0:w]
    if t.is_identity:
        return ys, xs, np.ones((h, w), dtype=bool)
    inv = t.inverse()
    a = inv.matrix
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    px, py = xs - cx, ys - cy
    sx = np.floor(a[0, 0] * px + a[0, 1] * py + cx + inv.tx + 0.5).astype(np.int64)
    sy = np.floor(a[1, 0] * px + a[1, 1] * py + cy + inv.ty + 0.5).astype(np.int64)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    return np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1), valid


def _render(config, code, cell_colors, sy, sx, valid, shade=None, rng=None):
    """Paint region-dependent cell colors at the given source coordinates."""
    c = config.cell_px
    _, hc, wc, _ = cell_colors.shape
    region = np.where(valid, code[sy, sx], _BG).astype(np.int64)
    flat = (region * hc + sy // c) * wc + sx // c
    rgb = np.take(cell_colors.reshape(-1, 3), flat, axis=0)
    if shade is None and config.noise == 0:
        return rgb
    rgb = rgb.astype(np.float32)
    if shade is not None:
        rgb *= shade[..., None]
    if config.noise > 0:
        rgb += config.noise * rng.standard_normal(rgb.shape[:2], dtype=np.float32)[..., None]
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def _cell_table(config, rng, palettes, blob_palette):
    hc = -(-config.height_px // config.cell_px)
    wc = -(-config.width_px // config.cell_px)

    def pick(p):
        return p[rng.integers(len(p), size=(hc, wc))]

    return np.stack([pick(palettes["background"]), pick(palettes["counterstain"]), pick(blob_palette)])


def generate_case(config: SynthConfig, patient_index: int, palettes=None) -> SynthCase:
    """Build the H&E / CD30 / PAX5 triplet for one patient.

    Randomness comes from the ``synth/patient/<index>`` stream, so cases can
    be generated in any order or in parallel.
    """
    if not 0 <= patient_index < config.n_patients:
        raise ConfigInvalid(f"patient index {patient_index} outside [0, {config.n_patients})")
    palettes = palettes or _palettes(config)
    rng = rng_for(config.seed, "synth", "patient", patient_index)
    label = config.label_of(patient_index)
    patient_id = f"P{patient_index:03d}"
    code, blob = _geometry(config, rng)
    h, w = code.shape

    # H&E: counterstain cells everywhere in tissue, stripes inside blobs
    he_cells = _cell_table(config, rng, palettes, palettes["counterstain"])
    period = config.stripe_period_px[config.labels.index(label)]
    phi = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    wave = np.sin((2 * math.pi / period) * (xs * math.cos(phi) + ys * math.sin(phi)) + phase)
    shade = np.where(blob, 1.0 - _STRIPE_DEPTH * 0.5 * (1.0 + wave), 1.0).astype(np.float32)
    del xs, ys, wave
    iy, ix, ok = _source_coords(config, SimilarityTransform())
    he = _render(config, code, he_cells, iy, ix, ok, shade=shade, rng=rng)

    def manifest(stain, pixels):
        return SlideManifest(
            f"{patient_id}-{stain}", patient_id, stain, label, config.base_magnification,
            pixels.shape[1], pixels.shape[0], config.tile_size_px, "tiles",
        )

    slides = {"HE": SlideRaster(manifest("HE", he), he)}
    transforms = {}
    for stain in ("CD30", "PAX5"):
        t = _random_transform(config, rng)
        cells = _cell_table(config, rng, palettes, palettes[stain])
        sy, sx, valid = _source_coords(config, t)
        pixels = _render(config, code, cells, sy, sx, valid, rng=rng)
        slides[stain] = SlideRaster(manifest(stain, pixels), pixels)
        transforms[stain] = t
    return SynthCase(patient_id, label, slides, blob, transforms)


def generate_cases(config: SynthConfig, threads: int = 1):
    """Yield every case in patient order."""
    palettes = _palettes(config)
    if threads <= 1:
        for i in range(config.n_patients):
            yield generate_case(config, i, palettes)
        return
    with ThreadPoolExecutor(threads) as pool:
        yield from pool.map(lambda i: generate_case(config, i, palettes), range(config.n_patients))


def write_case(case: SynthCase, case_dir) -> None:
    case_dir = Path(case_dir)
    for stain, slide in case.slides.items():
        save_slide(slide, case_dir / stain)
    write_gray_png(case.truth_mask, case_dir / "truth_mask.png")
    truth = {
        "patient_id": case.patient_id,
        "label": case.label,
        "blob_mask": "truth_mask.png",
        "slides": {stain: f"{stain}/manifest.json" for stain in case.slides},
        "transforms": [
            {"biomarker": stain, **t.to_dict()} for stain, t in case.transforms.items()
        ],
    }
    (case_dir / "truth.json").write_text(json.dumps(truth, indent=2), encoding="utf-8")


def generate_dataset(config: SynthConfig, out_dir, threads: int = 1) -> Path:
    """Write all cases under ``out_dir`` plus a ``dataset.json`` index."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        cases = []
        for case in generate_cases(config, threads):
            name = f"case_{case.patient_id}"
            write_case(case, out_dir / name)
            cases.append(name)
        index = {"config": config.to_dict(), "cases": cases}
        path = out_dir / "dataset.json"
        path.write_text(json.dumps(index, indent=2), encoding="utf-8")
    except OSError as exc:
        raise MissingInputError(f"cannot write dataset to {out_dir}: {exc}") from exc
    return path
