"""Shared test data and brute-force oracles."""

import numpy as np

from ihcsearch.embed import WsiSignature

N_CHL, N_NLPHL = 15, 8

# (mode, label, n, tp, fp, fn, precision %, recall %, f1 %); the counts are
# the unique integer solutions consistent with 15 CHL / 8 NLPHL queries
PRF_TABLE = [
    ("targeted", "CHL", 1, 11, 2, 4, 84.62, 73.33, 78.57),
    ("targeted", "CHL", 3, 13, 2, 2, 86.67, 86.67, 86.67),
    ("targeted", "CHL", 5, 12, 0, 3, 100.0, 80.00, 88.89),
    ("targeted", "CHL", 7, 12, 0, 3, 100.0, 80.00, 88.89),
    ("targeted", "NLPHL", 1, 6, 4, 2, 60.00, 75.00, 66.67),
    ("targeted", "NLPHL", 3, 6, 2, 2, 75.00, 75.00, 75.00),
    ("targeted", "NLPHL", 5, 8, 3, 0, 72.73, 100.0, 84.21),
    ("targeted", "NLPHL", 7, 8, 3, 0, 72.73, 100.0, 84.21),
    ("normal", "CHL", 1, 12, 4, 3, 75.00, 80.00, 77.42),
    ("normal", "CHL", 3, 11, 2, 4, 84.62, 73.33, 78.57),
    ("normal", "CHL", 5, 10, 2, 5, 83.33, 66.67, 74.07),
    ("normal", "CHL", 7, 11, 1, 4, 91.67, 73.33, 81.48),
    ("normal", "NLPHL", 1, 4, 3, 4, 57.14, 50.00, 53.33),
    ("normal", "NLPHL", 3, 6, 4, 2, 60.00, 75.00, 66.67),
    ("normal", "NLPHL", 5, 6, 5, 2, 54.55, 75.00, 63.16),
    ("normal", "NLPHL", 7, 7, 4, 1, 63.64, 87.50, 73.68),
]


def sig(slide_id, vectors, patient_id=None, label="CHL", backend="b"):
    return WsiSignature(slide_id, patient_id or slide_id, label, np.asarray(vectors, dtype=np.float32), backend)


def brute_distance(q, t):
    """Median-of-minimums from explicit all-pairs differences."""
    a, b = q.vectors.astype(np.float64), t.vectors.astype(np.float64)
    pair = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    mins = sorted(float(row.min()) for row in pair)
    m = len(mins)
    return mins[m // 2] if m % 2 else (mins[m // 2 - 1] + mins[m // 2]) / 2


def brute_ranking(entries, q, k, exclude_patient=None, dist=None):
    dist = dist or brute_distance
    scored = []
    for e in entries:
        if e.slide_id == q.slide_id or e.patient_id == exclude_patient:
            continue
        scored.append((dist(q, e), e.slide_id))
    scored.sort()
    return scored[:k]


def random_index(rng, max_slides=20, max_patches=10, dim=None, backend="b"):
    dim = dim or int(rng.integers(4, 1025))
    n_slides = int(rng.integers(1, max_slides + 1))
    n_patients = int(rng.integers(1, n_slides + 1))
    sigs = []
    for i in range(n_slides):
        n = int(rng.integers(1, max_patches + 1))
        # coarse values make exact ties likely enough to exercise tie-breaking
        v = rng.integers(0, 3, (n, dim)).astype(np.float32) if rng.random() < 0.3 else rng.normal(size=(n, dim))
        sigs.append(sig(f"S{i:02d}", v, f"P{int(rng.integers(n_patients))}", backend=backend))
    return sigs
