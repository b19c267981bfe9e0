"""Exact slide search over bags of patch embeddings.

Slides are compared with the median-of-minimums distance: for every query
patch take the Euclidean distance to its nearest patch in the candidate
slide, then take the median of those minima. The distance is directional.

Index file layout (all integers little-endian)::

    b"IHCX" | version u32 | count u32 | dim u32
    | backend_id: u32 length + UTF-8 bytes
    | metadata: u32 length + UTF-8 JSON (one object per entry)
    | vectors: float32, row-major, entries in order
    | CRC32 u32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .attention import PatchSpec
from .embed import WsiSignature
from .errors import BackendMismatch, CorruptIndex, EmptyIndexAfterExclusion, VersionMismatch

MAGIC = b"IHCX"
VERSION = 1
RANKINGS = ("median_of_min", "pooled")


def patch_distances(q: WsiSignature, t: WsiSignature) -> np.ndarray:
    return cdist(q.vectors.astype(np.float64), t.vectors.astype(np.float64))


def wsi_distance(q: WsiSignature, t: WsiSignature) -> float:
    """Median over q's patches of the distance to the closest patch of t."""
    if q.backend_id != t.backend_id:
        raise BackendMismatch(f"{q.backend_id!r} vs {t.backend_id!r}")
    # np.median averages the two middle values for even counts
    return float(np.median(patch_distances(q, t).min(axis=1)))


def pooled_distance(q: WsiSignature, t: WsiSignature) -> float:
    if q.backend_id != t.backend_id:
        raise BackendMismatch(f"{q.backend_id!r} vs {t.backend_id!r}")
    return float(np.linalg.norm(q.pooled - t.pooled))


@dataclass(frozen=True)
class Hit:
    slide_id: str
    patient_id: str
    label: str
    distance: float


@dataclass(frozen=True)
class QueryResult:
    query_slide_id: str
    hits: tuple[Hit, ...]

    @property
    def labels(self) -> list[str]:
        return [h.label for h in self.hits]

    def to_dict(self) -> dict:
        return {
            "query_slide_id": self.query_slide_id,
            "hits": [h.__dict__ for h in self.hits],
        }


@dataclass
class SignatureIndex:
    entries: list[WsiSignature] = field(default_factory=list)
    backend_id: str | None = None
    metric: str = "euclidean"
    version: int = VERSION

    def __post_init__(self):
        entries, self.entries = list(self.entries), []
        for e in entries:
            self.add(e)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, signature: WsiSignature) -> None:
        if self.backend_id is None:
            self.backend_id = signature.backend_id
        if signature.backend_id != self.backend_id:
            raise BackendMismatch(f"index holds {self.backend_id!r}, got {signature.backend_id!r}")
        if any(e.slide_id == signature.slide_id for e in self.entries):
            raise ValueError(f"duplicate slide_id {signature.slide_id!r}")
        if self.entries and signature.dim != self.entries[0].dim:
            raise ValueError(f"dimension {signature.dim} != index dimension {self.entries[0].dim}")
        self.entries.append(signature)

    @property
    def dim(self) -> int:
        return self.entries[0].dim if self.entries else 0

    @property
    def n_vectors(self) -> int:
        return sum(len(e.vectors) for e in self.entries)

    def get(self, slide_id: str) -> WsiSignature:
        for e in self.entries:
            if e.slide_id == slide_id:
                return e
        raise KeyError(slide_id)


def knn_query(
    index: SignatureIndex,
    q: WsiSignature,
    k: int,
    exclude_patient: str | None = None,
    ranking: str = "median_of_min",
) -> QueryResult:
    """Exhaustive k-NN; the query slide and ``exclude_patient`` never appear.

    Equal distances are ordered by slide_id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if ranking not in RANKINGS:
        raise ValueError(f"unknown ranking {ranking!r}")
    dist = wsi_distance if ranking == "median_of_min" else pooled_distance
    candidates = [
        e for e in index.entries
        if e.slide_id != q.slide_id and (exclude_patient is None or e.patient_id != exclude_patient)
    ]
    if not candidates:
        raise EmptyIndexAfterExclusion(f"no candidates left for query {q.slide_id}")
    scored = sorted(((dist(q, e), e.slide_id, e) for e in candidates), key=lambda t: (t[0], t[1]))
    hits = tuple(Hit(e.slide_id, e.patient_id, e.label, d) for d, _, e in scored[:k])
    return QueryResult(q.slide_id, hits)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _metadata(index: SignatureIndex) -> bytes:
    meta = [
        {
            "slide_id": e.slide_id,
            "patient_id": e.patient_id,
            "label": e.label,
            "n_vectors": len(e.vectors),
            "patches": [json.loads(p.to_json()) for p in e.patches],
        }
        for e in index.entries
    ]
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_index(index: SignatureIndex) -> bytes:
    backend = (index.backend_id or "").encode("utf-8")
    meta = _metadata(index)
    parts = [
        MAGIC,
        struct.pack("<III", index.version, len(index.entries), index.dim),
        struct.pack("<I", len(backend)),
        backend,
        struct.pack("<I", len(meta)),
        meta,
    ]
    parts += [e.vectors.astype("<f4").tobytes() for e in index.entries]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_index(index: SignatureIndex, path) -> None:
    Path(path).write_bytes(serialize_index(index))


def deserialize_index(data: bytes) -> SignatureIndex:
    if len(data) < 24 or data[:4] != MAGIC:
        raise CorruptIndex("not an index file (bad magic or too short)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptIndex("checksum mismatch")
    version, count, dim = struct.unpack_from("<III", body, 4)
    if version != VERSION:
        raise VersionMismatch(f"index version {version}, expected {VERSION}")
    pos = 16
    try:
        (n,) = struct.unpack_from("<I", body, pos)
        backend_id = body[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (n,) = struct.unpack_from("<I", body, pos)
        meta = json.loads(body[pos + 4 : pos + 4 + n].decode("utf-8"))
        pos += 4 + n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptIndex(f"bad header: {exc}") from exc
    if len(meta) != count:
        raise CorruptIndex(f"header count {count} != metadata entries {len(meta)}")
    total = sum(m["n_vectors"] for m in meta)
    blob = np.frombuffer(body, dtype="<f4", offset=pos)
    if blob.size != total * dim:
        raise CorruptIndex(f"vector blob holds {blob.size} floats, expected {total * dim}")
    blob = blob.reshape(total, dim) if dim else blob.reshape(total, 0)
    entries, row = [], 0
    for m in meta:
        n = m["n_vectors"]
        entries.append(
            WsiSignature(
                m["slide_id"], m["patient_id"], m["label"],
                blob[row : row + n].astype(np.float32),
                backend_id,
                tuple(PatchSpec(**p) for p in m["patches"]),
            )
        )
        row += n
    return SignatureIndex(entries, backend_id=backend_id or None, version=version)


def load_index(path) -> SignatureIndex:
    return deserialize_index(Path(path).read_bytes())


def predicted_file_size(backend_id: str, metadata_bytes: int, n_vectors: int, dim: int) -> int:
    header = len(MAGIC) + 3 * 4 + 4 + len(backend_id.encode("utf-8"))
    return header + 4 + metadata_bytes + n_vectors * dim * 4 + 4


def build_index(signatures: Sequence[WsiSignature]) -> SignatureIndex:
    return SignatureIndex(list(signatures))
