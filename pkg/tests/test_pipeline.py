import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ihcsearch.evaluation import EvalReport
from ihcsearch.pipeline import (
    PipelineParams,
    attention_for_case,
    process_case,
    random_patches,
    targeted_patches,
)
from ihcsearch.raster import SlideManifest, SlideRaster
from ihcsearch.synth import generate_case

GOLDEN = Path(__file__).parent / "golden" / "eval_seed42_targeted.json"
CLEAN = dict(noise=0.0, misalign_theta=0.0, misalign_shift_px=0.0, misalign_scale=0.0)


def iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


def blank(h=900, w=900):
    return SlideRaster(SlideManifest("S", "P", "HE", "CHL", 20.0, w, h, 512, "t"), np.zeros((h, w, 3), np.uint8))


def test_clean_case_mask_recovers_truth(small_config, models):
    case = generate_case(replace(small_config, **CLEAN), 0)
    mask, transforms, filtered = attention_for_case(case.slides, models, PipelineParams(seed=5))
    assert iou(mask, case.truth_mask) >= 0.9
    assert set(filtered) == {"CD30", "PAX5"}
    for t, score in transforms.values():
        assert abs(t.tx) <= 16 and abs(t.ty) <= 16 and t.theta == 0 and score > 0.9


def test_misaligned_case_mask_recovers_truth(small_case, models):
    mask, transforms, _ = attention_for_case(small_case.slides, models, PipelineParams(seed=5))
    assert iou(mask, small_case.truth_mask) >= 0.85
    for b, (t, _) in transforms.items():
        truth = small_case.transforms[b]
        assert abs(t.theta - truth.theta) <= 1


def test_shared_patches_embedded_identically(small_case, models):
    signatures, art = process_case(small_case.slides, models, PipelineParams(seed=5))
    vec = {}
    for mode in ("targeted", "normal"):
        for p, v in zip(signatures[mode].patches, signatures[mode].vectors):
            key = (p.x, p.y)
            if key in vec:
                assert np.array_equal(vec[key], v)
            vec[key] = v
    assert list(signatures["targeted"].patches) == art.patches["targeted"]
    assert all(p.coverage >= 0.5 for p in art.patches["targeted"])


def test_single_mode(small_case, models):
    signatures, art = process_case(small_case.slides, models, PipelineParams(seed=5), modes=("normal",))
    assert set(signatures) == {"normal"} and not art.mask.any() and art.transforms == {}


def test_random_patches_deterministic_per_seed():
    params = PipelineParams(seed=1, random_count=3)
    slide = blank()
    tissue = SlideRaster(slide.manifest, np.full((900, 900, 3), 120, np.uint8))
    a, b = random_patches(tissue, params), random_patches(tissue, params)
    assert a == b and len(a) == 3
    other = SlideRaster(replace(tissue.manifest, slide_id="T"), tissue.read())
    seeds = {tuple((p.x, p.y) for p in random_patches(other, replace(params, seed=s))) for s in range(6)}
    assert len(seeds) > 1


def test_fallback_rules():
    params = PipelineParams()
    slide = blank()
    mask = np.zeros((900, 900), bool)
    mask[:120, :300] = True  # 40% of patch (0, 0)
    patches, fallback = targeted_patches(mask, slide, params)
    assert fallback and [(p.x, p.y) for p in patches] == [(0, 0)] and patches[0].coverage == 0.4
    sparse = np.zeros((900, 900), bool)
    sparse[::50, ::50] = True
    assert targeted_patches(sparse, slide, params) == ([], False)
    assert targeted_patches(mask, slide, replace(params, fallback_coverage=0.5)) == ([], False)
    full = np.ones((900, 900), bool)
    patches, fallback = targeted_patches(full, slide, params)
    assert len(patches) == 9 and not fallback


def test_golden_seed42_targeted(benchmark):
    """The seed-42 benchmark reproduces the recorded targeted report."""
    golden = EvalReport.load(GOLDEN)
    report = benchmark(42).reports["targeted"]
    assert report.accuracy == golden.accuracy
    assert report.per_label == golden.per_label
    assert len(report.queries) == 23
    for got, want in zip(report.queries, golden.queries):
        assert {k: got[k] for k in ("slide_id", "truth", "retrieved", "labels", "predicted")} == {
            k: want[k] for k in ("slide_id", "truth", "retrieved", "labels", "predicted")
        }
        assert got["distances"] == pytest.approx(want["distances"], rel=1e-6)


def test_golden_file_is_well_formed():
    data = json.loads(GOLDEN.read_text())
    assert data["config"]["mode"] == "targeted" and data["config"]["seed"] == 42
    assert sorted(q["truth"] for q in data["queries"]).count("CHL") == 15
