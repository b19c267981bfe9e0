import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ihcsearch.anfis import (
    STAIN_RANGES,
    AnfisModel,
    DegenerateFiringWarning,
    LabeledSample,
    StainCategory,
    TrainConfig,
    accuracy,
    classify_range,
    decode_category,
    filter_pixels,
    filter_slide,
    firing_strengths,
    infer,
    initial_premises,
    premise_gradient,
    sample_category_pixels,
    sample_table,
    solve_consequents,
    split_samples,
    squared_error,
    train_hybrid,
    train_reference,
)
from ihcsearch.errors import ConfigError
from ihcsearch.raster import SlideManifest, SlideRaster

C = StainCategory


def model_with(centers, sigmas, consequents, **kw):
    return AnfisModel.from_arrays(np.asarray(centers, float), np.asarray(sigmas, float), np.asarray(consequents, float), **kw)


def random_model(rng):
    return model_with(rng.uniform(0, 255, (3, 3)), rng.uniform(20, 90, (3, 3)), rng.normal(0, 1, (3, 4)) * [1, 1, 1, 50])


def uniform_slide(rgb, size=16):
    px = np.broadcast_to(np.array(rgb, np.uint8), (size, size, 3)).copy()
    return SlideRaster(SlideManifest("s", "p", "CD30", "CHL", 20, size, size, size, "t"), px)


# -- table and categories -----------------------------------------------------


def test_table_matches_reference_rows():
    assert STAIN_RANGES[C.BACKGROUND] == ((214, 247), (214, 247), (213, 247))
    assert STAIN_RANGES[C.DARK_BROWN] == ((37, 98), (0, 67), (0, 61))
    assert [c.target for c in C] == [0, 51, 102, 153, 204, 255]


def test_classify_range_examples():
    assert classify_range((230, 230, 230)) == C.BACKGROUND
    assert classify_range((50, 10, 10)) == C.DARK_BROWN
    assert classify_range((150, 100, 100)) == C.MEDIUM_BROWN
    assert classify_range((255, 0, 255)) is None


def test_classify_range_midpoint_oracle():
    # independent midpoint-distance evaluation for (150, 100, 100)
    p = np.array([150, 100, 100])
    matches = [c for c in C if all(lo <= v <= hi for v, (lo, hi) in zip(p, STAIN_RANGES[c]))]
    assert set(matches) == {C.BLUE, C.GRAY, C.MEDIUM_BROWN}
    dist = {c: np.sum((p - np.array([(lo + hi) / 2 for lo, hi in STAIN_RANGES[c]])) ** 2) for c in matches}
    assert min(dist, key=dist.get) == C.MEDIUM_BROWN


def test_classify_range_lattice_bruteforce():
    """On a 16^3 lattice, single-box pixels classify as plain box membership."""
    vals = np.arange(8, 256, 16)
    lattice = np.array(list(itertools.product(vals, vals, vals)))
    got = classify_range(lattice)
    for p, g in zip(lattice, got):
        boxes = [c for c in C if all(lo <= v <= hi for v, (lo, hi) in zip(p, STAIN_RANGES[c]))]
        if len(boxes) == 0:
            assert g == -1
        elif len(boxes) == 1:
            assert g == int(boxes[0])
        else:
            assert g in [int(b) for b in boxes]


def test_decode_category_examples():
    assert decode_category(0) == C.BACKGROUND
    assert decode_category(300) == C.DARK_BROWN
    assert decode_category(76.5) == C.BLUE
    assert decode_category(-40) == C.BACKGROUND
    assert list(decode_category(np.array([25.4, 25.5, 25.6, 229.6]))) == [0, 0, 1, 5]


def test_labeled_sample_must_lie_in_box():
    LabeledSample((50, 10, 10), C.DARK_BROWN)
    with pytest.raises(ConfigError):
        LabeledSample((250, 250, 250), C.DARK_BROWN)


@pytest.mark.parametrize("cat", list(C))
def test_sampling_stays_in_box_and_classifies_back(cat):
    rng = np.random.default_rng(3)
    for spread in (1.0, 0.5):
        px = sample_category_pixels(cat, 200, rng, spread)
        lo = np.array([r[0] for r in cat.ranges])
        hi = np.array([r[1] for r in cat.ranges])
        assert np.all((px >= lo) & (px <= hi))
        assert np.all(classify_range(px) == int(cat))


def test_split_is_per_class():
    rng = np.random.default_rng(1)
    train, test = split_samples(sample_table(30, rng), 25, rng)
    for cat in C:
        assert sum(s.category == cat for s in train) == 25
        assert sum(s.category == cat for s in test) == 5


# -- inference ----------------------------------------------------------------


def test_identical_rules_give_uniform_weights():
    m = model_with(np.full((3, 3), 100.0), np.full((3, 3), 30.0), np.zeros((3, 4)))
    assert np.allclose(firing_strengths(m, (10, 20, 30)), 1 / 3, atol=1e-12)


def test_dominant_rule():
    x = np.array([120.0, 80.0, 60.0])
    sig = 10.0
    centers = np.stack([x, x + 10 * sig, x - 10 * sig])
    m = model_with(centers, np.full((3, 3), sig), np.zeros((3, 4)))
    assert firing_strengths(m, x)[0] >= 1 - 1e-9


def test_weights_direct_formula():
    centers = np.array([[0.0] * 3, [128.0] * 3, [255.0] * 3])
    m = model_with(centers, np.full((3, 3), 50.0), np.zeros((3, 4)))
    raw = [math.exp(-sum((128 - c) ** 2 for c in row) / (2 * 50.0**2)) for row in centers]
    expected = np.array(raw) / sum(raw)
    assert np.allclose(firing_strengths(m, (128, 128, 128)), expected, rtol=0, atol=1e-15)


def test_degenerate_firing_falls_back_to_uniform():
    m = model_with(np.zeros((3, 3)), np.full((3, 3), 1.0), np.zeros((3, 4)))
    with pytest.warns(DegenerateFiringWarning):
        w = firing_strengths(m, (255, 255, 255))
    assert np.allclose(w, 1 / 3)


@given(st.tuples(*[st.integers(0, 255)] * 3), st.integers(0, 2**31))
def test_weights_sum_to_one(rgb, seed):
    m = random_model(np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFiringWarning)
        assert abs(firing_strengths(m, rgb).sum() - 1.0) <= 1e-9


def test_constant_consequents():
    rng = np.random.default_rng(0)
    q = np.tile([0, 0, 0, 128.0], (3, 1))
    m = model_with(rng.uniform(0, 255, (3, 3)), rng.uniform(30, 80, (3, 3)), q)
    assert np.allclose(infer(m, rng.integers(0, 256, (50, 3))), 128.0)


def test_single_rule_linear_output_unclamped():
    x = np.array([100.0, 50.0, 25.0])
    centers = np.stack([x, x + 500, x - 500])
    q = np.array([[1, 2, 4, 0], [0, 0, 0, 0], [0, 0, 0, 0]], float)
    assert infer(m := model_with(centers, np.full((3, 3), 10.0), q), x) == pytest.approx(300.0, abs=1e-6)
    assert decode_category(infer(m, x)) == C.DARK_BROWN


def test_infer_deterministic(rng):
    m = random_model(rng)
    px = rng.integers(0, 256, (100, 3))
    assert np.array_equal(infer(m, px), infer(m, px))


# -- training -----------------------------------------------------------------


@given(st.integers(0, 2**31))
def test_premise_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    x = rng.integers(0, 256, (40, 3)).astype(float)
    y = rng.uniform(0, 255, 40)
    grad_c, grad_s = premise_gradient(m, x, y)
    h = 1e-4
    c, s, q = m.centers, m.sigmas, m.consequents
    for arr, grad, which in ((c, grad_c, "c"), (s, grad_s, "s")):
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            if which == "c":
                ep = squared_error(model_with(plus, s, q), x, y)
                em = squared_error(model_with(minus, s, q), x, y)
            else:
                ep = squared_error(model_with(c, plus, q), x, y)
                em = squared_error(model_with(c, minus, q), x, y)
            fd = (ep - em) / (2 * h)
            scale = max(abs(fd), abs(grad[idx]), 1e-3 * np.max(np.abs(grad)) + 1e-12)
            assert abs(fd - grad[idx]) / scale <= 1e-4


def test_lse_never_increases_error():
    rng = np.random.default_rng(42)
    train, _ = split_samples(sample_table(30, rng), 25, rng)
    records = []
    train_hybrid(train, TrainConfig(epochs=60), on_epoch=lambda e, b, a: records.append((b, a)))
    assert len(records) == 60
    assert all(a <= b + 1e-9 for b, a in records)


def test_constant_target_fit_exact():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (60, 3)).astype(float)
    m = train_hybrid((x, np.full(60, 128.0)), TrainConfig(epochs=5))
    assert m.training["rmse_curve"][-1] < 1e-6


def test_zero_learning_rate_is_pure_lse():
    rng = np.random.default_rng(2)
    train, _ = split_samples(sample_table(30, rng), 25, rng)
    x = np.array([s.rgb for s in train], float)
    y = np.array([s.category.target for s in train], float)
    m = train_hybrid(train, TrainConfig(epochs=1, learning_rate=0.0))
    c0, s0 = initial_premises(x)
    assert np.array_equal(m.centers, c0) and np.array_equal(m.sigmas, s0)
    assert np.allclose(m.consequents, solve_consequents(c0, s0, x, y), atol=1e-9)


def test_initial_premises_rule():
    x = np.arange(101, dtype=float)[:, None].repeat(3, axis=1)
    c, s = initial_premises(x)
    assert np.allclose(c[:, 0], [10, 50, 90])
    assert np.allclose(s, 20.0)
    c, s = initial_premises(np.full((10, 3), 7.0))
    assert np.all(s == 5.0)


def test_rank_deficient_lse_uses_ridge():
    x = np.tile([[100.0, 100.0, 100.0]], (10, 1))
    q = solve_consequents(np.full((3, 3), 100.0), np.full((3, 3), 30.0), x, np.full(10, 51.0))
    assert np.all(np.isfinite(q))


def test_training_is_seed_deterministic():
    a, _, _ = train_reference(seed=7, config=TrainConfig(epochs=30, seed=7))
    b, _, _ = train_reference(seed=7, config=TrainConfig(epochs=30, seed=7))
    assert a == b


def test_representative_colors_train_well():
    """Samples concentrated near box centers (pathologist-picked colors)."""
    rng = np.random.default_rng(42)
    train, test = split_samples(sample_table(30, rng, spread=0.5), 25, rng)
    m = train_hybrid(train, TrainConfig())
    assert accuracy(m, test) >= 0.9


def test_model_roundtrip_bit_exact(tmp_path):
    m, _, _ = train_reference(config=TrainConfig(epochs=20))
    m.save(tmp_path / "m.json")
    back = AnfisModel.load(tmp_path / "m.json")
    assert back == m
    assert np.array_equal(back.centers, m.centers) and np.array_equal(back.consequents, m.consequents)
    assert back.training == m.training


def test_model_needs_three_rules():
    m = model_with(np.zeros((3, 3)), np.ones((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ConfigError):
        AnfisModel(m.rules[:2])


# -- filtering ----------------------------------------------------------------


def test_filter_pixels_matches_direct_inference(models, rng):
    m = models["CD30"]
    px = rng.integers(0, 256, (40, 50, 3), dtype=np.uint8)
    o = infer(m, px.reshape(-1, 3).astype(float))
    keep = np.isin(decode_category(o), [int(c) for c in m.target_classes])
    expected = np.where(keep, np.clip(np.floor(o + 0.5), 0, 255), 0).reshape(40, 50)
    assert np.array_equal(filter_pixels(m, px), expected.astype(np.uint8))


def test_filter_background_is_zero(models):
    assert not filter_slide(models["CD30"], uniform_slide((230, 230, 230))).any()


def test_filter_dark_brown(models):
    cd30 = filter_slide(models["CD30"], uniform_slide((50, 10, 10)))
    assert np.all(cd30 == cd30[0, 0]) and cd30[0, 0] > 0
    assert decode_category(float(cd30[0, 0])) == C.DARK_BROWN
    assert decode_category(infer(models["CD30"], (50, 10, 10))) == C.DARK_BROWN
    assert not filter_slide(models["PAX5"], uniform_slide((50, 10, 10))).any()
