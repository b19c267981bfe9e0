"""End-to-end retrieval pipeline over H&E / IHC slide triplets.

For each case the biomarker slides are registered to the H&E slide on
low-magnification thumbnails, filtered by the per-biomarker fuzzy models,
warped into the H&E frame at patch magnification, fused into a
composite biomarker image and reduced to an attention mask. Targeted mode
picks H&E patches under the mask; normal mode picks random tissue patches.
Only H&E patches are embedded and indexed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .align import SearchGrid, SimilarityTransform, register_slides, warp_array
from .anfis import (
    CD30_TARGETS,
    PAX5_TARGETS,
    AnfisModel,
    TrainConfig,
    filter_pixels,
    sample_table,
    split_samples,
    train_hybrid,
)
from .attention import (
    MorphConfig,
    PatchSpec,
    attention_mask,
    build_cbi,
    select_patches,
    select_patches_random,
)
from .embed import BuiltinBackend, EmbeddingBackend, WsiSignature, embed_patches
from .evaluation import EvalConfig, EvalReport, compare_runs, leave_one_patient_out
from .index import SignatureIndex
from .raster import SlideRaster, tissue_mask
from .seeds import rng_for, substream_seed

log = logging.getLogger(__name__)

BIOMARKER_TARGETS = {"CD30": CD30_TARGETS, "PAX5": PAX5_TARGETS}
MODES = ("targeted", "normal")


@dataclass(frozen=True)
class PipelineParams:
    seed: int = 42
    # fuzzy filter training
    anfis_epochs: int = 200
    anfis_learning_rate: float = 0.05
    anfis_per_class: int = 30
    anfis_n_train: int = 25
    anfis_spread: float = 0.5
    # attention
    theta_mask: int = 32
    morph: MorphConfig = field(default_factory=MorphConfig)
    mask_mode: str = "union"
    tau: float = 0.5
    # a slide with no patch at tau keeps its best patch if it is at least this covered
    fallback_coverage: float = 0.1
    stride: int = 300
    patch_side: int = 300
    patch_magnification: float = 20.0
    thumb_magnification: float = 1.25
    grid: SearchGrid = field(default_factory=SearchGrid)
    # normal mode
    random_count: int = 8
    min_tissue: float = 0.5


def train_models(params: PipelineParams, biomarkers=("CD30", "PAX5")) -> dict[str, AnfisModel]:
    """One fuzzy filter per biomarker, each from its own seed stream."""
    models = {}
    for b in biomarkers:
        rng = rng_for(params.seed, "anfis", b)
        samples = sample_table(params.anfis_per_class, rng, params.anfis_spread)
        train, _ = split_samples(samples, params.anfis_n_train, rng)
        cfg = TrainConfig(params.anfis_epochs, params.anfis_learning_rate, substream_seed(params.seed, "anfis", b))
        models[b] = train_hybrid(train, cfg, trained_for=b, target_classes=BIOMARKER_TARGETS[b])
    return models


@dataclass
class CaseArtifacts:
    """Intermediate products for one case, all in the H&E frame at patch magnification."""

    transforms: dict[str, tuple[SimilarityTransform, float]]
    filtered: dict[str, np.ndarray]
    mask: np.ndarray
    patches: dict[str, list[PatchSpec]]
    fallback: bool = False


def attention_for_case(
    slides: Mapping[str, SlideRaster],
    models: Mapping[str, AnfisModel],
    params: PipelineParams,
    grid: SearchGrid | None = None,
) -> tuple[np.ndarray, dict, dict]:
    """Register, filter, warp and fuse the biomarker slides of one case.

    Returns ``(mask, transforms, filtered)``.
    """
    he = slides["HE"]
    shape = he.size_at(params.patch_magnification)[::-1]
    transforms, filtered = {}, {}
    for b, model in models.items():
        if b not in slides:
            continue
        ihc = slides[b]
        t, score = register_slides(he, ihc, params.thumb_magnification, grid or params.grid)
        transforms[b] = (t, score)
        # the filter is per-pixel, so filtering before a nearest-neighbour
        # warp gives the same raster as filtering after it
        gray = filter_pixels(model, ihc.read(params.patch_magnification))
        local = t.inverse().scaled(params.patch_magnification / ihc.base_magnification)
        filtered[b] = warp_array(gray, local, fill=0, output_shape=shape, order=0)
    cbi = build_cbi(filtered, params.morph, theta_mask=params.theta_mask)
    return attention_mask(cbi, params.mask_mode), transforms, filtered


def targeted_patches(mask: np.ndarray, he: SlideRaster, params: PipelineParams) -> tuple[list[PatchSpec], bool]:
    """Patches under the mask.

    When none reaches tau, the best-covered patch is kept if its coverage is
    at least ``fallback_coverage``; a mask of scattered false positives still
    yields no patch.
    """
    patches = select_patches(mask, he, params.tau, params.stride, params.patch_side, params.patch_magnification)
    if patches or params.fallback_coverage >= params.tau:
        return patches, False
    candidates = select_patches(
        mask, he, params.fallback_coverage, params.stride, params.patch_side, params.patch_magnification
    )
    if not candidates:
        return [], False
    best = max(candidates, key=lambda p: p.coverage)
    return [best], True


def random_patches(he: SlideRaster, params: PipelineParams) -> list[PatchSpec]:
    tissue = tissue_mask(he, params.patch_magnification)
    rng = rng_for(params.seed, "patch", "random", he.slide_id)
    return select_patches_random(
        tissue, he, params.random_count, rng, params.stride, params.patch_side,
        params.patch_magnification, params.min_tissue,
    )


def process_case(
    slides: Mapping[str, SlideRaster],
    models: Mapping[str, AnfisModel],
    params: PipelineParams,
    backend: EmbeddingBackend | None = None,
    modes: Iterable[str] = MODES,
) -> tuple[dict[str, WsiSignature | None], CaseArtifacts]:
    """H&E signature per requested mode for one case.

    A mode maps to ``None`` when it selected no patch at all. Patches shared
    between modes are embedded once.
    """
    backend = backend or BuiltinBackend()
    modes = tuple(modes)
    he = slides["HE"]
    patches, transforms, filtered = {}, {}, {}
    mask = np.zeros(he.size_at(params.patch_magnification)[::-1], dtype=bool)
    fallback = False
    if "targeted" in modes:
        mask, transforms, filtered = attention_for_case(slides, models, params)
        patches["targeted"], fallback = targeted_patches(mask, he, params)
        if fallback:
            log.warning("%s: no patch reached tau=%s, using fallback", he.slide_id, params.tau)
    if "normal" in modes:
        patches["normal"] = random_patches(he, params)

    unique = sorted({(p.x, p.y): p for ps in patches.values() for p in ps}.values(), key=lambda p: (p.y, p.x))
    vectors = {(e.patch.x, e.patch.y): e.vector for e in embed_patches(he, unique, backend)}
    m = he.manifest
    signatures = {}
    for mode, ps in patches.items():
        if not ps:
            signatures[mode] = None
            continue
        signatures[mode] = WsiSignature(
            m.slide_id, m.patient_id, m.label,
            np.stack([vectors[(p.x, p.y)] for p in ps]),
            backend.backend_id,
            tuple(ps),
        )
    return signatures, CaseArtifacts(transforms, filtered, mask, patches, fallback)


@dataclass
class BenchmarkResult:
    reports: dict[str, EvalReport]
    n_fallback: int = 0
    n_missing: dict[str, int] = field(default_factory=dict)

    def accuracy(self, mode: str, n: int = 3) -> float:
        return self.reports[mode].accuracy[n]

    @property
    def gap(self) -> dict[int, float]:
        return compare_runs(self.reports["targeted"], self.reports["normal"]).accuracy_delta


def run_benchmark(
    cases: Iterable[Mapping[str, SlideRaster]],
    params: PipelineParams | None = None,
    eval_config: EvalConfig | None = None,
    backend: EmbeddingBackend | None = None,
    models: Mapping[str, AnfisModel] | None = None,
) -> BenchmarkResult:
    """Index every case in both modes and run leave-one-patient-out on each.

    ``cases`` yields ``{stain: SlideRaster}`` dicts and is consumed lazily so
    only one case is held in memory at a time.
    """
    params = params or PipelineParams()
    eval_config = eval_config or EvalConfig(seed=params.seed)
    models = models or train_models(params)
    indices = {mode: SignatureIndex() for mode in MODES}
    n_fallback, missing = 0, {mode: 0 for mode in MODES}
    for slides in cases:
        sigs, art = process_case(slides, models, params, backend)
        n_fallback += art.fallback
        for mode, sig in sigs.items():
            if sig is None:
                missing[mode] += 1
            else:
                indices[mode].add(sig)
    reports = {
        mode: leave_one_patient_out(
            indices[mode], EvalConfig(eval_config.n_values, mode, eval_config.seed, eval_config.ranking)
        )
        for mode in MODES
    }
    return BenchmarkResult(reports, n_fallback, missing)
