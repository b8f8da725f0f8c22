import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_rows
from oracles import brute_top_k, closure_components, dense_edges
from pas.errors import FormatError
from pas.index import (MAGIC, SimilarityGraph, StoreError, build_store, connected_components, cosine_similarity,
                       knn_graph, load_store, max_similarity, save_store, top_k, top_k_batch)


def test_build_normalises_rows():
    s = build_store(["a"], [[3.0, 4.0]], "t")
    np.testing.assert_allclose(s.vectors[0], [0.6, 0.8], atol=1e-7)
    assert s.vectors.dtype == np.float32


def test_build_rejects_duplicates_and_zero_rows():
    with pytest.raises(StoreError, match="duplicate"):
        build_store(["a", "a"], np.eye(2))
    with pytest.raises(StoreError, match="'b'"):
        build_store(["a", "b"], [[1.0, 0.0], [0.0, 0.0]])


def test_random_rows_have_unit_norm(rng):
    s = build_store([str(i) for i in range(10_000)], rng.standard_normal((10_000, 128)) * 7)
    norms = np.linalg.norm(s.vectors.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1) <= 1e-4)


def test_store_is_immutable(rng):
    s = build_store(["a", "b"], rng.standard_normal((2, 4)))
    with pytest.raises(ValueError):
        s.vectors[0, 0] = 1.0


@pytest.mark.parametrize("u,v,want", [
    ((1, 0), (0, 1), 0.0),
    ((2, 2), (1, 1), 1.0),
    ((1, 0), (1, 1), 0.70710678),
])
def test_cosine_examples(u, v, want):
    assert cosine_similarity(u, v) == pytest.approx(want, abs=1e-7)


def test_cosine_zero_vector():
    with pytest.raises(ValueError):
        cosine_similarity((0, 0), (1, 0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_symmetry(u, v):
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    a, b = cosine_similarity(u, v), cosine_similarity(v, u)
    assert abs(a - b) <= 1e-12
    assert -1.0 <= a <= 1.0


def test_top_k_singleton():
    s = build_store(["r"], [[0.3, 0.4]])
    nl = top_k(s, [0.3, 0.4], 5)
    assert [i for i, _ in nl.neighbors] == ["r"]
    assert nl.neighbors[0][1] == pytest.approx(1.0)


def test_top_k_saturates_and_matches_full_sort(rng):
    ids = [f"id{i:03d}" for i in range(40)]
    vecs = unit_rows(rng, 40, 8)
    s = build_store(ids, vecs)
    q = rng.standard_normal(8)
    got = [i for i, _ in top_k(s, q, 100).neighbors]
    assert got == brute_top_k(ids, s.vectors, q, 40)


def test_top_k_ties_broken_by_id():
    ids = ["d", "b", "c", "a"]
    s = build_store(ids, [[1, 0], [1, 0], [0, 1], [1, 0]])
    nl = top_k(s, [1, 0], 3)
    assert [i for i, _ in nl.neighbors] == ["a", "b", "d"]


def test_top_k_excludes_self(rng):
    ids = [str(i) for i in range(20)]
    s = build_store(ids, unit_rows(rng, 20, 5))
    nl = top_k(s, s.vector("3"), 5, exclude="3")
    assert "3" not in [i for i, _ in nl.neighbors]
    sims = [x for _, x in nl.neighbors]
    assert sims == sorted(sims, reverse=True)


def test_excluded_rows_never_beat_kth(rng):
    ids = [str(i) for i in range(300)]
    s = build_store(ids, unit_rows(rng, 300, 16))
    for q in rng.standard_normal((10, 16)):
        nl = top_k(s, q, 17)
        kth = nl.neighbors[-1][1]
        chosen = {i for i, _ in nl.neighbors}
        rest = [cosine_similarity(s.vector(i), q) for i in ids if i not in chosen]
        assert max(rest) <= kth + 1e-12


def test_query_dimension_mismatch():
    s = build_store(["a"], [[1.0, 0.0]])
    with pytest.raises(StoreError):
        top_k(s, [1.0, 0.0, 0.0], 1)


def test_empty_store_is_an_error():
    s = build_store([], np.zeros((0, 3)))
    with pytest.raises(StoreError):
        top_k(s, [1, 0, 0], 1)


def test_max_similarity_matches_top1(rng):
    s = build_store([str(i) for i in range(50)], unit_rows(rng, 50, 6))
    qs = rng.standard_normal((7, 6))
    best = [nl.neighbors[0][1] for nl in top_k_batch(s, qs, 1)]
    np.testing.assert_allclose(max_similarity(s, qs), best, atol=1e-12)


def _store_with_sims(ab, bc, ac):
    """Three unit vectors with the requested pairwise cosines (Cholesky of the Gram matrix)."""
    gram = np.array([[1, ab, ac], [ab, 1, bc], [ac, bc, 1]], dtype=np.float64)
    return build_store(["a", "b", "c"], np.linalg.cholesky(gram))


def test_knn_graph_hand_example():
    g = knn_graph(_store_with_sims(0.95, 0.7, 0.5), 2, 0.6)
    assert g.adjacency() == {frozenset("ab"), frozenset("bc")}


def test_knn_graph_unreachable_threshold(rng):
    s = build_store([str(i) for i in range(30)], unit_rows(rng, 30, 4))
    assert knn_graph(s, 8, 1.0).edges == []


def test_knn_graph_invariants(rng):
    base = unit_rows(rng, 50, 8)
    vecs = np.concatenate([base, base + 0.05 * rng.standard_normal((50, 8))])
    ids = [f"n{i:03d}" for i in range(100)]
    g = knn_graph(build_store(ids, vecs), 5, 0.6)
    for a, b, sim in g.edges:
        assert a != b and sim > 0.6
    assert len(g.adjacency()) == len(g.edges)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 65), st.integers(0, 2**32 - 1), st.floats(-0.2, 0.8))
def test_knn_graph_small_n_equals_dense(n, seed, threshold):
    r = np.random.default_rng(seed)
    # a low dimension makes many similarities large enough to matter
    vecs = unit_rows(r, n, 3)
    ids = [f"v{i:02d}" for i in range(n)]
    s = build_store(ids, vecs)
    assert knn_graph(s, 64, threshold).adjacency() == dense_edges(ids, s.vectors, threshold)


def test_components_examples():
    g = SimilarityGraph(("a", "b", "c", "d"), [("a", "b", 0.9), ("b", "c", 0.9)], 0.6, 2)
    assert connected_components(g) == [{"a", "b", "c"}, {"d"}]
    g = SimilarityGraph(("b", "a", "c"), [], 0.6, 2)
    assert connected_components(g) == [{"a"}, {"b"}, {"c"}]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_components_match_closure_oracle(n, seed, density):
    r = np.random.default_rng(seed)
    nodes = [f"x{i:03d}" for i in range(n)]
    m = int(density * n)
    pairs = r.integers(0, n, size=(m, 2))
    edges = [(nodes[a], nodes[b], 1.0) for a, b in pairs if a != b]
    comps = connected_components(SimilarityGraph(tuple(nodes), edges, 0.0, 1))
    assert {frozenset(c) for c in comps} == closure_components(nodes, [frozenset((a, b)) for a, b, _ in edges])
    assert sum(len(c) for c in comps) == n
    assert [min(c) for c in comps] == sorted(min(c) for c in comps)


def test_save_load_round_trip(tmp_path, rng):
    s = build_store([f"id{i}" for i in range(1000)], rng.standard_normal((1000, 64)), "copy")
    save_store(s, tmp_path / "s.emb")
    t = load_store(tmp_path / "s.emb")
    assert t.ids == s.ids and t.model_tag == "copy"
    assert t.vectors.tobytes() == s.vectors.tobytes()


def test_file_layout_is_bit_exact(tmp_path):
    s = build_store(["a", "b"], [[1.0, 0.0], [0.0, 2.0]])
    save_store(s, tmp_path / "s.emb")
    data = (tmp_path / "s.emb").read_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack("<IQ", data[8:20]) == (2, 2)
    assert np.frombuffer(data[20:], dtype="<f4").tolist() == [1.0, 0.0, 0.0, 1.0]
    assert (tmp_path / "s.emb.ids").read_text() == "a\nb\n"


def test_bad_magic(tmp_path, rng):
    save_store(build_store(["a"], [[1.0, 2.0]]), tmp_path / "s.emb")
    p = tmp_path / "s.emb"
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    with pytest.raises(FormatError, match="magic"):
        load_store(p)


def test_truncated_mid_row_names_row(tmp_path, rng):
    save_store(build_store([str(i) for i in range(5)], rng.standard_normal((5, 4))), tmp_path / "s.emb")
    p = tmp_path / "s.emb"
    p.write_bytes(p.read_bytes()[:20 + 3 * 16 + 6])
    with pytest.raises(FormatError, match="row 3"):
        load_store(p)


def test_ids_count_mismatch(tmp_path, rng):
    save_store(build_store(["a", "b"], rng.standard_normal((2, 3))), tmp_path / "s.emb")
    (tmp_path / "s.emb.ids").write_text("a\n")
    with pytest.raises(FormatError):
        load_store(tmp_path / "s.emb")


def test_non_unit_rows_rejected_on_load(tmp_path):
    save_store(build_store(["a"], [[1.0, 0.0]]), tmp_path / "s.emb")
    p = tmp_path / "s.emb"
    p.write_bytes(p.read_bytes()[:20] + np.array([2.0, 0.0], dtype="<f4").tobytes())
    with pytest.raises(FormatError):
        load_store(p)
