import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from reference import brute_distance, brute_ranking, random_index, sig

from ihcsearch.attention import PatchSpec
from ihcsearch.embed import DIM, WsiSignature
from ihcsearch.errors import BackendMismatch, CorruptIndex, EmptyIndexAfterExclusion, VersionMismatch
from ihcsearch.index import (
    SignatureIndex,
    _metadata,
    build_index,
    deserialize_index,
    knn_query,
    load_index,
    pooled_distance,
    predicted_file_size,
    save_index,
    serialize_index,
    wsi_distance,
)


def unit(i, dim=4):
    v = np.zeros(dim)
    v[i] = 1
    return v


# -- distance -----------------------------------------------------------------


def test_hand_cases():
    z = np.zeros(4)
    assert wsi_distance(sig("a", [unit(0)]), sig("a", [unit(0)])) == 0.0
    assert wsi_distance(sig("q", [unit(0)]), sig("t", [z])) == 1.0
    assert wsi_distance(sig("q", [z, [3, 4, 0, 0]]), sig("t", [z])) == 2.5


def test_asymmetry_witness():
    q = sig("q", [np.zeros(2)])
    t = sig("t", [np.zeros(2), [10, 0], [20, 0]])
    assert wsi_distance(q, t) == 0.0
    assert wsi_distance(t, q) == 10.0


@given(st.integers(0, 2**32 - 1))
def test_self_distance_zero(seed):
    r = np.random.default_rng(seed)
    s = sig("s", r.normal(size=(int(r.integers(1, 8)), int(r.integers(1, 64)))) * 1e3)
    assert wsi_distance(s, s) == 0.0


def test_backend_mismatch():
    with pytest.raises(BackendMismatch):
        wsi_distance(sig("a", [unit(0)]), sig("b", [unit(0)], backend="other"))
    with pytest.raises(BackendMismatch):
        build_index([sig("a", [unit(0)]), sig("b", [unit(0)], backend="other")])


def test_matches_loop_oracle(rng):
    for _ in range(10):
        q = sig("q", rng.normal(size=(int(rng.integers(1, 7)), 5)))
        t = sig("t", rng.normal(size=(int(rng.integers(1, 7)), 5)))
        assert wsi_distance(q, t) == pytest.approx(brute_distance(q, t), rel=1e-12)


# -- k-NN ---------------------------------------------------------------------


def test_self_excluded():
    index = build_index([sig("a", [unit(0)]), sig("b", [unit(1)]), sig("c", [unit(0) * 3])])
    result = knn_query(index, index.get("a"), 1)
    assert [h.slide_id for h in result.hits] == ["b"]
    assert result.hits[0].distance == pytest.approx(np.sqrt(2))


def test_k_larger_than_index():
    index = build_index([sig(s, [unit(i)]) for i, s in enumerate("abc")])
    q = sig("q", [np.zeros(4)])
    result = knn_query(index, q, 5)
    assert len(result.hits) == 3
    assert [h.slide_id for h in result.hits] == ["a", "b", "c"]  # all at distance 1, tie by id


def test_excluded_patient_absent():
    index = build_index([sig("a", [unit(0)], "P1"), sig("b", [unit(1)], "P1"), sig("c", [unit(2)], "P2")])
    result = knn_query(index, sig("q", [unit(0)]), 3, exclude_patient="P1")
    assert [h.slide_id for h in result.hits] == ["c"]
    with pytest.raises(EmptyIndexAfterExclusion):
        knn_query(index, index.get("c"), 1, exclude_patient="P1")
    with pytest.raises(ValueError):
        knn_query(index, index.get("c"), 0)


def test_scalarized_four_entry_index():
    values = {"w": [[0.0], [5.0]], "x": [[1.0]], "y": [[-2.0], [2.5]], "z": [[4.0], [4.5], [9.0]]}
    index = build_index([sig(k, v) for k, v in values.items()])
    q = sig("q", [[0.5], [3.0]])
    got = [(h.distance, h.slide_id) for h in knn_query(index, q, 4).hits]
    # mins w {0.5, 2}, x {0.5, 2}, y {2, 0.5}: a three-way tie at 1.25; z {3.5, 1} -> 2.25
    assert got == brute_ranking(index.entries, q, 4)
    assert [s for _, s in got] == ["w", "x", "y", "z"]


def test_random_indices_match_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(25):
        entries = random_index(rng, dim=int(rng.integers(4, 40)))
        index = build_index(entries)
        q = entries[int(rng.integers(len(entries)))]
        k = int(rng.integers(1, 25))
        try:
            got = knn_query(index, q, k, exclude_patient=q.patient_id)
        except EmptyIndexAfterExclusion:
            assert not brute_ranking(entries, q, k, q.patient_id)
            continue
        want = brute_ranking(entries, q, k, q.patient_id)
        assert [h.slide_id for h in got.hits] == [s for _, s in want]
        assert [h.distance for h in got.hits] == pytest.approx([d for d, _ in want], rel=1e-9)


def test_distances_non_decreasing(rng):
    index = build_index(random_index(rng, dim=8))
    d = [h.distance for h in knn_query(index, sig("q", rng.normal(size=(3, 8))), 50).hits]
    assert d == sorted(d)


def test_append_only_inserts(rng):
    entries = random_index(rng, dim=6)
    q = sig("q", rng.normal(size=(4, 6)))
    before = [h.slide_id for h in knn_query(build_index(entries), q, 100).hits]
    extra = sig("new", rng.normal(size=(2, 6)))
    after = [h.slide_id for h in knn_query(build_index(entries + [extra]), q, 100).hits]
    assert [s for s in after if s != "new"] == before


def test_pooled_ranking():
    a = sig("a", [[0.0, 0.0], [2.0, 2.0], [10.0, 10.0]])
    b = sig("b", [[1.0, 1.0]])
    assert np.array_equal(a.pooled, [2.0, 2.0])
    assert pooled_distance(a, b) == pytest.approx(np.sqrt(2))
    index = build_index([a, b, sig("c", [[2.0, 2.0]])])
    hits = knn_query(index, b, 2, ranking="pooled").hits
    assert [h.slide_id for h in hits] == ["a", "c"]  # tie at sqrt(2), broken by id


def test_duplicate_slide_rejected():
    with pytest.raises(ValueError):
        build_index([sig("a", [unit(0)]), sig("a", [unit(1)])])


# -- persistence --------------------------------------------------------------


def patched_signatures(rng, n=3, dim=16):
    out = []
    for i in range(n):
        m = int(rng.integers(1, 5))
        patches = tuple(PatchSpec(f"S{i}", 300 * j, 0, coverage=0.5 + 0.1 * j) for j in range(m))
        out.append(WsiSignature(f"S{i}", f"P{i}", ["CHL", "NLPHL"][i % 2], rng.normal(size=(m, dim)), "b", patches))
    return out


def test_save_load_bit_exact(tmp_path, rng):
    index = build_index(patched_signatures(rng))
    save_index(index, tmp_path / "i.ihcx")
    back = load_index(tmp_path / "i.ihcx")
    assert back.backend_id == "b" and len(back) == 3
    for a, b in zip(index.entries, back.entries):
        assert a.vectors.tobytes() == b.vectors.tobytes()
        assert (a.slide_id, a.patient_id, a.label, a.patches) == (b.slide_id, b.patient_id, b.label, b.patches)
    assert serialize_index(back) == serialize_index(index)


def test_empty_index_roundtrip():
    back = deserialize_index(serialize_index(SignatureIndex()))
    assert len(back) == 0 and back.backend_id is None


def test_truncated_or_flipped_file(rng):
    data = serialize_index(build_index(patched_signatures(rng)))
    with pytest.raises(CorruptIndex):
        deserialize_index(data[:-10])
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(CorruptIndex):
        deserialize_index(bytes(flipped))
    with pytest.raises(CorruptIndex):
        deserialize_index(b"JUNK" + data[4:])


def test_version_mismatch(rng):
    body = bytearray(serialize_index(build_index(patched_signatures(rng)))[:-4])
    body[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatch):
        deserialize_index(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def test_predicted_size_small(rng):
    index = build_index(patched_signatures(rng))
    meta = len(serialize_index(index)) - predicted_file_size("b", 0, index.n_vectors, index.dim)
    # the only unknown is the metadata block, and it is the exact JSON length
    assert meta == len(_metadata(index))


def test_full_cohort_sized_index(tmp_path):
    # 69 slides sharing 9296 patch vectors of length 1024
    counts = [135] * 68 + [9296 - 135 * 68]
    sigs = [
        WsiSignature(f"S{i:02d}", f"P{i // 3:02d}", "CHL", np.full((n, DIM), i, np.float32), "builtin-baseline-v1")
        for i, n in enumerate(counts)
    ]
    index = build_index(sigs)
    assert index.n_vectors == 9296
    path = tmp_path / "big.ihcx"
    save_index(index, path)
    expected = predicted_file_size("builtin-baseline-v1", len(_metadata(index)), 9296, 1024)
    assert path.stat().st_size == expected
    assert expected - len(_metadata(index)) - 9296 * 1024 * 4 == 4 + 12 + 4 + len("builtin-baseline-v1") + 4 + 4
