"""Three-rule first-order Sugeno fuzzy inference over RGB pixels.

The model maps a pixel ``(r, g, b)`` to a scalar gray level. Each rule ``i``
has one Gaussian membership function per channel and a linear consequent
``o_i = j_i r + k_i g + l_i b + z_i``. Firing strengths use the product
T-norm and are normalized before the weighted sum.

Training follows the classic hybrid scheme: with the premises frozen the
consequents are an ordinary linear least-squares problem, after which one
full-batch gradient step moves the membership centers and widths.

Stain categories come from a six-row RGB range table (background, blue,
gray, light/medium/dark brown). Category ``k`` is encoded as the gray level
``51 * k`` so that the six classes span ``0..255``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InsufficientSamples, NonFiniteGradient, SingularLSE

log = logging.getLogger(__name__)

N_RULES = 3
GRAY_STEP = 51
RIDGE_LAMBDA = 1e-6
MIN_SIGMA = 5.0
# premises are kept inside a sane region during gradient descent
_SIGMA_FLOOR = 1.0
_CENTER_LIMITS = (-64.0, 319.0)


class StainCategory(IntEnum):
    BACKGROUND = 0
    BLUE = 1
    GRAY = 2
    LIGHT_BROWN = 3
    MEDIUM_BROWN = 4
    DARK_BROWN = 5

    @property
    def ranges(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        """Inclusive (lo, hi) per channel, in R, G, B order."""
        return STAIN_RANGES[self]

    @property
    def target(self) -> int:
        return GRAY_STEP * int(self)

    @property
    def midpoint(self) -> np.ndarray:
        return np.array([(lo + hi) / 2.0 for lo, hi in self.ranges])


STAIN_RANGES = {
    StainCategory.BACKGROUND: ((214, 247), (214, 247), (213, 247)),
    StainCategory.BLUE: ((24, 208), (44, 217), (79, 228)),
    StainCategory.GRAY: ((63, 221), (65, 221), (77, 226)),
    StainCategory.LIGHT_BROWN: ((163, 251), (124, 218), (107, 214)),
    StainCategory.MEDIUM_BROWN: ((136, 192), (87, 157), (70, 147)),
    StainCategory.DARK_BROWN: ((37, 98), (0, 67), (0, 61)),
}

# (6, 3) arrays for vectorized box tests
_LO = np.array([[lo for lo, _ in STAIN_RANGES[c]] for c in StainCategory], dtype=float)
_HI = np.array([[hi for _, hi in STAIN_RANGES[c]] for c in StainCategory], dtype=float)
_MID = (_LO + _HI) / 2.0
_TARGETS = np.array([c.target for c in StainCategory], dtype=float)

CD30_TARGETS = frozenset(
    {StainCategory.LIGHT_BROWN, StainCategory.MEDIUM_BROWN, StainCategory.DARK_BROWN}
)
PAX5_TARGETS = frozenset({StainCategory.MEDIUM_BROWN})
DEFAULT_TARGETS = {"CD30": CD30_TARGETS, "PAX5": PAX5_TARGETS}


class DegenerateFiringWarning(RuntimeWarning):
    """All rule firing strengths underflowed; uniform weights were used."""


@dataclass(frozen=True)
class MembershipFn:
    c: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"membership width must be > 0, got {self.sigma}")

    def value(self, x):
        return np.exp(-((np.asarray(x, dtype=float) - self.c) ** 2) / (2.0 * self.sigma**2))


@dataclass(frozen=True)
class RuleConsequent:
    j: float
    k: float
    l: float  # noqa: E741
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.j, self.k, self.l, self.z])):
            raise ConfigError("rule consequent coefficients must be finite")


@dataclass(frozen=True)
class Rule:
    A: MembershipFn
    B: MembershipFn
    C: MembershipFn
    consequent: RuleConsequent


@dataclass(frozen=True)
class AnfisModel:
    rules: tuple[Rule, ...]
    trained_for: str = "custom"
    target_classes: frozenset = CD30_TARGETS
    training: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.rules) != N_RULES:
            raise ConfigError(f"model needs exactly {N_RULES} rules, got {len(self.rules)}")
        object.__setattr__(
            self, "target_classes", frozenset(StainCategory(c) for c in self.target_classes)
        )

    @property
    def centers(self) -> np.ndarray:
        """(rules, channels) membership centers."""
        return np.array([[r.A.c, r.B.c, r.C.c] for r in self.rules], dtype=float)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([[r.A.sigma, r.B.sigma, r.C.sigma] for r in self.rules], dtype=float)

    @property
    def consequents(self) -> np.ndarray:
        """(rules, 4) rows of ``j, k, l, z``."""
        return np.array(
            [[r.consequent.j, r.consequent.k, r.consequent.l, r.consequent.z] for r in self.rules],
            dtype=float,
        )

    @classmethod
    def from_arrays(cls, centers, sigmas, consequents, **kwargs) -> "AnfisModel":
        rules = []
        for c, s, q in zip(np.asarray(centers), np.asarray(sigmas), np.asarray(consequents)):
            rules.append(
                Rule(
                    MembershipFn(float(c[0]), float(s[0])),
                    MembershipFn(float(c[1]), float(s[1])),
                    MembershipFn(float(c[2]), float(s[2])),
                    RuleConsequent(*(float(v) for v in q)),
                )
            )
        return cls(rules=tuple(rules), **kwargs)

    def replace(self, **changes) -> "AnfisModel":
        params = dict(
            centers=self.centers,
            sigmas=self.sigmas,
            consequents=self.consequents,
            trained_for=self.trained_for,
            target_classes=self.target_classes,
            training=self.training,
        )
        params.update(changes)
        return AnfisModel.from_arrays(**params)

    def to_dict(self) -> dict:
        def mf(m):
            return {"c": m.c, "sigma": m.sigma}

        return {
            "trained_for": self.trained_for,
            "target_classes": sorted(int(c) for c in self.target_classes),
            "rules": [
                {
                    "A": mf(r.A),
                    "B": mf(r.B),
                    "C": mf(r.C),
                    "consequent": {
                        "j": r.consequent.j,
                        "k": r.consequent.k,
                        "l": r.consequent.l,
                        "z": r.consequent.z,
                    },
                }
                for r in self.rules
            ],
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnfisModel":
        try:
            rules = tuple(
                Rule(
                    MembershipFn(float(r["A"]["c"]), float(r["A"]["sigma"])),
                    MembershipFn(float(r["B"]["c"]), float(r["B"]["sigma"])),
                    MembershipFn(float(r["C"]["c"]), float(r["C"]["sigma"])),
                    RuleConsequent(**{k: float(r["consequent"][k]) for k in "jklz"}),
                )
                for r in data["rules"]
            )
            return cls(
                rules=rules,
                trained_for=data.get("trained_for", "custom"),
                target_classes=frozenset(data.get("target_classes", [])),
                training=data.get("training", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed ANFIS model: {exc}") from exc

    def save(self, path) -> None:
        # repr-exact floats keep the JSON round trip bit-identical
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AnfisModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LabeledSample:
    rgb: tuple[int, int, int]
    category: StainCategory

    def __post_init__(self):
        lo, hi = _LO[self.category], _HI[self.category]
        if not np.all((np.asarray(self.rgb) >= lo) & (np.asarray(self.rgb) <= hi)):
            raise ConfigError(f"{self.rgb} lies outside the {self.category.name} box")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _as_pixels(rgb) -> tuple[np.ndarray, bool]:
    x = np.asarray(rgb, dtype=float)
    single = x.ndim == 1
    return x.reshape(-1, 3), single


def _raw_strengths(centers, sigmas, x):
    # (N, rules)
    d = (x[:, None, :] - centers[None, :, :]) / sigmas[None, :, :]
    return np.exp(-0.5 * np.sum(d * d, axis=2))


def _normalize(w):
    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] <= 0.0
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} input(s) fired no rule; using uniform weights",
            DegenerateFiringWarning,
            stacklevel=3,
        )
        w = w.copy()
        w[degenerate] = 1.0
        total = w.sum(axis=1, keepdims=True)
    return w / total


def firing_strengths(model: AnfisModel, rgb) -> np.ndarray:
    """Normalized rule weights for one pixel ``(3,)`` or many ``(N, 3)``."""
    x, single = _as_pixels(rgb)
    wn = _normalize(_raw_strengths(model.centers, model.sigmas, x))
    return wn[0] if single else wn


def _rule_outputs(consequents, x):
    return x @ consequents[:, :3].T + consequents[:, 3][None, :]


def infer(model: AnfisModel, rgb):
    """Unclamped Sugeno output; scalar for one pixel, ``(N,)`` for many."""
    x, single = _as_pixels(rgb)
    wn = _normalize(_raw_strengths(model.centers, model.sigmas, x))
    o = np.sum(wn * _rule_outputs(model.consequents, x), axis=1)
    return float(o[0]) if single else o


def decode_category(o) -> StainCategory | np.ndarray:
    """Nearest target gray level; ties go to the lower index.

    Scalar input gives a :class:`StainCategory`, array input an int array.
    """
    arr = np.asarray(o, dtype=float)
    # argmin returns the first minimum, which is the lower index on ties
    idx = np.argmin(np.abs(arr[..., None] - _TARGETS), axis=-1)
    if arr.ndim == 0:
        return StainCategory(int(idx))
    return idx


def classify_range(rgb) -> StainCategory | None | np.ndarray:
    """Crisp table lookup.

    Among all boxes containing the pixel, the one with the nearest midpoint
    wins (lower index on ties). Returns ``None`` for a single pixel with no
    match; for ``(N, 3)`` input returns an int array with ``-1`` for no match.
    """
    x, single = _as_pixels(rgb)
    inside = np.all((x[:, None, :] >= _LO) & (x[:, None, :] <= _HI), axis=2)
    dist = np.sum((x[:, None, :] - _MID[None]) ** 2, axis=2)
    dist = np.where(inside, dist, np.inf)
    idx = np.argmin(dist, axis=1)
    idx = np.where(inside.any(axis=1), idx, -1)
    if single:
        return None if idx[0] < 0 else StainCategory(int(idx[0]))
    return idx


# ---------------------------------------------------------------------------
# sampling from the range table
# ---------------------------------------------------------------------------


def sample_category_pixels(
    category: StainCategory, n: int, rng: np.random.Generator, spread: float = 1.0
) -> np.ndarray:
    """Draw ``n`` integer RGB pixels uniformly from a category's box.

    Draws are rejected unless :func:`classify_range` maps them back to the
    same category, so labels are consistent with the crisp lookup. ``spread``
    shrinks the box about its midpoint (1.0 = full box).
    """
    category = StainCategory(category)
    if not 0 < spread <= 1:
        raise ConfigError(f"spread must be in (0, 1], got {spread}")
    mid, half = _MID[category], (_HI[category] - _LO[category]) / 2.0 * spread
    lo = np.ceil(mid - half)
    hi = np.floor(mid + half)
    out = np.empty((0, 3), dtype=np.int64)
    while len(out) < n:
        need = max(64, 2 * (n - len(out)))
        cand = rng.integers(lo, hi + 1, size=(need, 3))
        cand = cand[classify_range(cand) == int(category)]
        out = np.concatenate([out, cand])
    return out[:n]


def sample_table(
    per_class: int, rng: np.random.Generator, spread: float = 1.0
) -> list[LabeledSample]:
    samples = []
    for cat in StainCategory:
        for rgb in sample_category_pixels(cat, per_class, rng, spread):
            samples.append(LabeledSample(tuple(int(v) for v in rgb), cat))
    return samples


def split_samples(
    samples: Sequence[LabeledSample], n_train: int, rng: np.random.Generator
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Per-class random split: ``n_train`` per class to train, rest held out."""
    train, test = [], []
    for cat in StainCategory:
        group = [s for s in samples if s.category == cat]
        order = rng.permutation(len(group))
        train += [group[i] for i in order[:n_train]]
        test += [group[i] for i in order[n_train:]]
    return train, test


def samples_to_arrays(samples: Iterable[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    x = np.array([s.rgb for s in samples], dtype=float).reshape(-1, 3)
    y = np.array([s.category.target for s in samples], dtype=float)
    return x, y


# ---------------------------------------------------------------------------
# hybrid training
# ---------------------------------------------------------------------------


def squared_error(model: AnfisModel, x, y) -> float:
    """Sum of squared residuals over the training set."""
    r = infer(model, np.asarray(x, dtype=float).reshape(-1, 3)) - np.asarray(y, dtype=float)
    return float(r @ r)


def premise_gradient(model: AnfisModel, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`squared_error` w.r.t. centers and widths."""
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=float)
    c, s = model.centers, model.sigmas
    wn = _normalize(_raw_strengths(c, s, x))
    f = _rule_outputs(model.consequents, x)
    o = np.sum(wn * f, axis=1)
    # dE/dlog(w_i) per sample and rule
    g = 2.0 * (o - y)[:, None] * (f - o[:, None]) * wn
    diff = x[:, None, :] - c[None]
    grad_c = np.einsum("nr,nrd->rd", g, diff) / s**2
    grad_s = np.einsum("nr,nrd->rd", g, diff**2) / s**3
    if not (np.all(np.isfinite(grad_c)) and np.all(np.isfinite(grad_s))):
        raise NonFiniteGradient("premise gradient contains non-finite values")
    return grad_c, grad_s


def solve_consequents(centers, sigmas, x, y) -> np.ndarray:
    """Least-squares consequents for fixed premises, shape ``(rules, 4)``."""
    wn = _normalize(_raw_strengths(centers, sigmas, x))
    xa = np.hstack([x, np.ones((len(x), 1))])
    design = (wn[:, :, None] * xa[:, None, :]).reshape(len(x), -1)
    sol, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        log.debug("rank-deficient consequent system (%d < %d); using ridge", rank, design.shape[1])
        gram = design.T @ design + RIDGE_LAMBDA * np.eye(design.shape[1])
        try:
            sol = np.linalg.solve(gram, design.T @ y)
        except np.linalg.LinAlgError as exc:
            raise SingularLSE(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularLSE("consequent solution is not finite")
    return sol.reshape(N_RULES, 4)


def initial_premises(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centers at the 10/50/90th percentiles of each channel."""
    centers = np.percentile(x, [10, 50, 90], axis=0)
    gap = (centers[2] - centers[0]) / 2.0
    sigmas = np.broadcast_to(np.maximum(gap / 2.0, MIN_SIGMA), centers.shape).copy()
    return centers, sigmas


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    seed: int = 42


_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def train_hybrid(
    samples: Sequence[LabeledSample] | tuple[np.ndarray, np.ndarray],
    config: TrainConfig | None = None,
    trained_for: str = "custom",
    target_classes: Iterable[int] | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> AnfisModel:
    """Fit a three-rule model by alternating least squares and gradient steps.

    ``samples`` may be labeled samples or an ``(x, y)`` pair of arrays.
    Each epoch solves the consequents exactly, then takes one full-batch
    gradient step on the premises. The step uses Adam moment estimates of
    the mean squared-error gradient; ``learning_rate`` is measured in
    normalized input units (centers move by at most about
    ``learning_rate * 255`` per epoch, widths by a factor ``exp(lr)``).

    ``on_epoch(epoch, sse_before_lse, sse_after_lse)`` is called after each
    least-squares solve. Per-epoch train RMSE is kept in ``model.training``.
    """
    config = config or TrainConfig()
    if config.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if isinstance(samples, tuple):
        x, y = (np.asarray(a, dtype=float) for a in samples)
        x = x.reshape(-1, 3)
    else:
        if not samples:
            raise InsufficientSamples("no training samples")
        x, y = samples_to_arrays(samples)
    if len(x) == 0:
        raise InsufficientSamples("no training samples")
    if target_classes is None:
        target_classes = DEFAULT_TARGETS.get(trained_for, CD30_TARGETS)

    n = len(x)
    centers, sigmas = initial_premises(x)
    consequents = np.zeros((N_RULES, 4))
    m1 = np.zeros(2 * centers.size)
    m2 = np.zeros(2 * centers.size)
    rmse_curve = []
    for epoch in range(1, config.epochs + 1):
        before = squared_error(AnfisModel.from_arrays(centers, sigmas, consequents), x, y)
        consequents = solve_consequents(centers, sigmas, x, y)
        model = AnfisModel.from_arrays(centers, sigmas, consequents)
        after = squared_error(model, x, y)
        rmse_curve.append(float(np.sqrt(after / n)))
        if on_epoch is not None:
            on_epoch(epoch, before, after)
        if config.learning_rate == 0:
            continue
        grad_c, grad_s = premise_gradient(model, x, y)
        # widths are stepped in log space
        g = np.concatenate([grad_c.ravel(), (grad_s * sigmas).ravel()]) / n
        m1 = _ADAM_B1 * m1 + (1 - _ADAM_B1) * g
        m2 = _ADAM_B2 * m2 + (1 - _ADAM_B2) * g * g
        step = (m1 / (1 - _ADAM_B1**epoch)) / (
            np.sqrt(m2 / (1 - _ADAM_B2**epoch)) + _ADAM_EPS
        )
        step = step.reshape(2, *centers.shape)
        centers = np.clip(centers - config.learning_rate * 255.0 * step[0], *_CENTER_LIMITS)
        sigmas = np.maximum(sigmas * np.exp(-config.learning_rate * step[1]), _SIGMA_FLOOR)
    if config.learning_rate != 0:
        # final consequents match the final premises
        consequents = solve_consequents(centers, sigmas, x, y)
        model = AnfisModel.from_arrays(centers, sigmas, consequents)
    return model.replace(
        trained_for=trained_for,
        target_classes=frozenset(target_classes),
        training={
            "seed": config.seed,
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "rmse_curve": rmse_curve,
        },
    )


def accuracy(model: AnfisModel, samples: Sequence[LabeledSample]) -> float:
    x, _ = samples_to_arrays(samples)
    pred = decode_category(infer(model, x))
    truth = np.array([int(s.category) for s in samples])
    return float(np.mean(pred == truth))


def train_reference(
    trained_for: str = "CD30",
    seed: int = 42,
    per_class: int = 30,
    n_train: int = 25,
    config: TrainConfig | None = None,
) -> tuple[AnfisModel, list[LabeledSample], list[LabeledSample]]:
    """Sample the range table, split per class, and train one model.

    Returns ``(model, train, test)``.
    """
    rng = np.random.default_rng(seed)
    samples = sample_table(per_class, rng)
    train, test = split_samples(samples, n_train, rng)
    config = config or TrainConfig(seed=seed)
    return train_hybrid(train, config, trained_for=trained_for), train, test


# ---------------------------------------------------------------------------
# slide filtering
# ---------------------------------------------------------------------------

_FILTER_CHUNK = 1 << 18


def filter_pixels(model: AnfisModel, pixels: np.ndarray) -> np.ndarray:
    """Gray relevance image for an ``(H, W, 3)`` uint8 array.

    A pixel keeps ``clamp(round(o), 0, 255)`` when its decoded category is
    one of the model's target classes, and 0 otherwise.
    """
    pixels = np.asarray(pixels, dtype=np.uint8)
    flat = pixels.reshape(-1, 3)
    v = np.arange(256, dtype=float)
    c, s, q = model.centers, model.sigmas, model.consequents
    # membership lookup tables, (rules, channels, 256)
    lut = np.exp(-0.5 * ((v[None, None, :] - c[:, :, None]) / s[:, :, None]) ** 2)
    keep = np.zeros(len(_TARGETS), dtype=bool)
    keep[[int(t) for t in model.target_classes]] = True
    out = np.empty(len(flat), dtype=np.uint8)
    for start in range(0, len(flat), _FILTER_CHUNK):
        px = flat[start : start + _FILTER_CHUNK]
        w = lut[:, 0, px[:, 0]] * lut[:, 1, px[:, 1]] * lut[:, 2, px[:, 2]]
        wn = _normalize(w.T)
        x = px.astype(float)
        o = np.sum(wn * _rule_outputs(q, x), axis=1)
        gray = np.clip(np.floor(o + 0.5), 0, 255)
        out[start : start + len(px)] = np.where(keep[decode_category(o)], gray, 0)
    return out.reshape(pixels.shape[:2])


def filter_slide(model: AnfisModel, slide, magnification=None) -> np.ndarray:
    return filter_pixels(model, slide.read(magnification))
