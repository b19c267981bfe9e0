"""Patch embeddings and per-slide signatures.

Every backend returns 1024-d float32 vectors. The built-in backend is a
deterministic hand-crafted descriptor so the whole pipeline runs without a
pretrained network; an external model can be plugged in through a
file-spool protocol (see :class:`SpoolBackend`).
"""

from __future__ import annotations

import json
import logging
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from filelock import FileLock, Timeout as LockTimeout
from PIL import Image

from .attention import PATCH_SIDE, PatchSpec
from .errors import (
    BackendProtocol,
    BackendTimeout,
    BackendUnavailable,
    BadPatchSize,
    LengthMismatch,
    NonFiniteVector,
)
from .raster import SlideRaster, luminance

log = logging.getLogger(__name__)

DIM = 1024
BUILTIN_ID = "builtin-baseline-v1"

# descriptor layout
N_COLOR = 512
N_COOC = 256
N_ORIENT, N_RINGS = 36, 7
N_GRAD = N_ORIENT * N_RINGS
N_STATS = 4
COOC_OFFSETS = ((1, 0), (0, 1), (1, 1), (1, -1))  # (dx, dy)
COOC_BINS = 64


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    patch: PatchSpec
    backend_id: str


@dataclass(frozen=True)
class WsiSignature:
    """Bag of patch embeddings for one slide, stored as an ``(n, d)`` float32 matrix."""

    slide_id: str
    patient_id: str
    label: str
    vectors: np.ndarray
    backend_id: str
    patches: tuple[PatchSpec, ...] = field(default=(), compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or len(v) == 0:
            raise ValueError(f"{self.slide_id}: signature needs a non-empty (n, d) matrix")
        if not np.all(np.isfinite(v)):
            raise NonFiniteVector(f"{self.slide_id}: signature has non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def embeddings(self) -> list[Embedding]:
        patches = self.patches or (None,) * len(self.vectors)
        return [Embedding(v, p, self.backend_id) for v, p in zip(self.vectors, patches)]

    @property
    def pooled(self) -> np.ndarray:
        """Element-wise median of the patch vectors (diagnostic only)."""
        return np.median(self.vectors.astype(np.float64), axis=0)

    @classmethod
    def from_embeddings(cls, slide_id, patient_id, label, embeddings: Sequence[Embedding]) -> "WsiSignature":
        if not embeddings:
            raise ValueError(f"{slide_id}: no embeddings")
        ids = {e.backend_id for e in embeddings}
        if len(ids) != 1:
            raise ValueError(f"{slide_id}: embeddings from several backends {sorted(ids)}")
        return cls(
            slide_id, patient_id, label,
            np.stack([e.vector for e in embeddings]),
            ids.pop(),
            tuple(e.patch for e in embeddings),
        )


# ---------------------------------------------------------------------------
# built-in descriptor
# ---------------------------------------------------------------------------


def _color_histogram(rgb: np.ndarray) -> np.ndarray:
    q = (rgb >> 5).astype(np.int64)
    idx = (q[..., 0] * 64 + q[..., 1] * 8 + q[..., 2]).ravel()
    hist = np.bincount(idx, minlength=N_COLOR).astype(np.float64)
    return hist / hist.sum()


def _cooccurrence(gray: np.ndarray) -> np.ndarray:
    """Distributions of |g(p) - g(p + offset)| per offset, 64 bins each."""
    g = gray.astype(np.int64)
    h, w = g.shape
    out = []
    for dx, dy in COOC_OFFSETS:
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(0, w - dx)
        ys2 = slice(max(0, dy), h - max(0, -dy))
        xs2 = slice(dx, w)
        diff = np.abs(g[ys, xs] - g[ys2, xs2])
        hist = np.bincount((diff * COOC_BINS // 256).ravel(), minlength=COOC_BINS).astype(np.float64)
        out.append(hist / max(hist.sum(), 1.0))
    return np.concatenate(out)


def _orientation_rings(lum: np.ndarray) -> np.ndarray:
    """Magnitude-weighted gradient orientation histogram per radial ring.

    Orientation bins are 10 degrees wide starting at 0 (gradient pointing
    to +x); rings split the center-to-corner radius into equal bands.
    """
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    total = mag.sum()
    if total == 0:
        return np.zeros(N_GRAD)
    angle = np.degrees(np.arctan2(gy, gx)) % 360.0
    ori = np.minimum((angle // (360.0 / N_ORIENT)).astype(np.int64), N_ORIENT - 1)
    h, w = lum.shape
    ys, xs = np.mgrid[0:h, 0:w]
    r = np.hypot(ys - (h - 1) / 2.0, xs - (w - 1) / 2.0)
    ring = np.minimum((r / r.max() * N_RINGS).astype(np.int64), N_RINGS - 1)
    hist = np.bincount((ring * N_ORIENT + ori).ravel(), weights=mag.ravel(), minlength=N_GRAD)
    return hist / total


def builtin_baseline(patch: np.ndarray) -> np.ndarray:
    """Deterministic 1024-d descriptor of a ``300 x 300`` RGB patch.

    Layout: 512 joint RGB histogram bins (8 levels per channel), 256
    contrast-distribution bins (4 neighbor offsets x 64), 252 gradient
    orientation bins (36 orientations x 7 rings), then mean, std, min and
    max of luminance scaled to [0, 1].
    """
    patch = np.asarray(patch)
    if patch.shape != (PATCH_SIDE, PATCH_SIDE, 3):
        raise BadPatchSize(f"expected ({PATCH_SIDE}, {PATCH_SIDE}, 3), got {patch.shape}")
    patch = patch.astype(np.uint8, copy=False)
    lum = luminance(patch)
    gray = np.floor(lum + 0.5)
    stats = np.array([lum.mean(), lum.std(), lum.min(), lum.max()]) / 255.0
    # float64 so every block keeps its exact normalization; signatures store float32
    return np.concatenate([_color_histogram(patch), _cooccurrence(gray), _orientation_rings(lum), stats])


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


class EmbeddingBackend(Protocol):
    backend_id: str

    def embed(self, patches: Sequence[np.ndarray]) -> np.ndarray:
        """Return an ``(len(patches), 1024)`` array."""


class BuiltinBackend:
    backend_id = BUILTIN_ID

    def embed(self, patches: Sequence[np.ndarray]) -> np.ndarray:
        if len(patches) == 0:
            return np.zeros((0, DIM))
        return np.stack([builtin_baseline(p) for p in patches])


@dataclass
class SpoolConfig:
    spool_dir: str
    timeout: float = 120.0
    poll_interval: float = 0.05
    backend_id: str = "external"
    cleanup: bool = True


class SpoolBackend:
    """Exchange patches with an external model through a spool directory.

    A request is a ``batch_{uuid}`` directory holding the patch PNGs and a
    ``manifest.json`` listing them in order. The responder writes
    ``vectors.f32`` (little-endian float32, ``n x 1024`` row-major) and then
    an empty ``done`` marker. One batch is in flight per spool directory.
    """

    def __init__(self, config: SpoolConfig):
        self.config = config
        self.backend_id = config.backend_id
        self.spool = Path(config.spool_dir)
        if not self.spool.is_dir():
            raise BackendUnavailable(f"spool directory {self.spool} does not exist")
        self._lock = FileLock(str(self.spool / ".inflight.lock"))

    def embed(self, patches: Sequence[np.ndarray]) -> np.ndarray:
        if len(patches) == 0:
            return np.zeros((0, DIM), dtype=np.float32)
        try:
            with self._lock.acquire(timeout=self.config.timeout):
                return self._round_trip(patches)
        except LockTimeout as exc:
            raise BackendTimeout(f"spool {self.spool} busy for {self.config.timeout}s") from exc

    def _round_trip(self, patches):
        batch = self.spool / f"batch_{uuid.uuid4().hex}"
        try:
            batch.mkdir()
        except OSError as exc:
            raise BackendUnavailable(f"cannot write to spool {self.spool}: {exc}") from exc
        names = []
        for i, patch in enumerate(patches):
            name = f"patch_{i:05d}.png"
            Image.fromarray(np.ascontiguousarray(patch, dtype=np.uint8), "RGB").save(batch / name)
            names.append(name)
        # manifest appears atomically so responders never see a partial batch
        tmp = batch / "manifest.json.tmp"
        tmp.write_text(json.dumps({"patches": names, "dim": DIM}), encoding="utf-8")
        tmp.replace(batch / "manifest.json")

        deadline = time.monotonic() + self.config.timeout
        done = batch / "done"
        while not done.exists():
            if time.monotonic() > deadline:
                raise BackendTimeout(f"no response for {batch.name} within {self.config.timeout}s")
            time.sleep(self.config.poll_interval)
        vec_path = batch / "vectors.f32"
        if not vec_path.is_file():
            raise BackendProtocol(f"{batch.name}: done marker without vectors.f32")
        raw = np.fromfile(vec_path, dtype="<f4")
        if raw.size != len(patches) * DIM:
            dim = raw.size / len(patches)
            raise LengthMismatch(f"{batch.name}: expected {len(patches)}x{DIM} floats, got {raw.size} ({dim:g} per patch)")
        vectors = raw.reshape(len(patches), DIM).astype(np.float32)
        if self.config.cleanup:
            for path in batch.iterdir():
                path.unlink()
            batch.rmdir()
        return vectors


def external_backend(endpoint_config: SpoolConfig | dict) -> SpoolBackend:
    if isinstance(endpoint_config, dict):
        endpoint_config = SpoolConfig(**endpoint_config)
    return SpoolBackend(endpoint_config)


def embed_patches(
    slide: SlideRaster, patches: Sequence[PatchSpec], backend: EmbeddingBackend
) -> list[Embedding]:
    """One embedding per patch, in input order."""
    if not patches:
        return []
    pixels = [slide.read_region(p.x, p.y, p.side, p.side, p.magnification) for p in patches]
    vectors = np.asarray(backend.embed(pixels))
    if vectors.ndim != 2 or vectors.shape[0] != len(patches):
        raise BackendProtocol(f"backend returned shape {vectors.shape} for {len(patches)} patches")
    if vectors.shape[1] != DIM:
        raise LengthMismatch(f"backend returned {vectors.shape[1]}-d vectors, expected {DIM}")
    if not np.all(np.isfinite(vectors)):
        raise NonFiniteVector("backend returned non-finite values")
    return [Embedding(v, p, backend.backend_id) for v, p in zip(vectors, patches)]
