"""Exact cosine search over immutable, L2-normalised embedding tables.

Stores keep 32-bit rows; every similarity is accumulated in float64. Ties are
broken by id ascending everywhere so results do not depend on row order or on
the kernel backend.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pas import kernels
from pas.errors import FormatError, PasError
from pas.io import atomic_write

MAGIC = b"PASEMB1\0"
_HEADER = struct.Struct("<8sIQ")
NORM_TOL = 1e-4
# similarity rows computed per block; bounds peak memory at block * n * 8 bytes
_BLOCK_ROWS = 512


class StoreError(PasError):
    """Invalid store contents or an operation a store cannot satisfy."""


@dataclass(frozen=True)
class EmbeddingStore:
    ids: tuple[str, ...]
    vectors: np.ndarray
    model_tag: str = ""
    _row: dict[str, int] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]
    _rank: np.ndarray = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.vectors.setflags(write=False)
        object.__setattr__(self, "_row", {i: n for n, i in enumerate(self.ids)})
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))
        object.__setattr__(self, "_rank", rank)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item: object) -> bool:
        return item in self._row

    def row(self, id_: str) -> int:
        return self._row[id_]

    def vector(self, id_: str) -> np.ndarray:
        return self.vectors[self._row[id_]]

    def id_rank(self) -> np.ndarray:
        """Position of each row's id in ascending id order (the tie-break key)."""
        return self._rank

    def subset(self, ids: Sequence[str]) -> "EmbeddingStore":
        rows = [self._row[i] for i in ids]
        return EmbeddingStore(tuple(ids), np.ascontiguousarray(self.vectors[rows]), self.model_tag)


@dataclass(frozen=True)
class NeighborList:
    query_id: str | None
    neighbors: list[tuple[str, float]]


@dataclass(frozen=True)
class SimilarityGraph:
    nodes: tuple[str, ...]
    edges: list[tuple[str, str, float]]
    threshold: float
    k: int

    def adjacency(self) -> set[frozenset[str]]:
        return {frozenset((a, b)) for a, b, _ in self.edges}


def build_store(ids: Sequence[str], raw_vectors, model_tag: str = "") -> EmbeddingStore:
    ids = tuple(str(i) for i in ids)
    mat = np.asarray(raw_vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise StoreError(f"expected a 2-d matrix, got shape {mat.shape}")
    if mat.shape[0] != len(ids):
        raise StoreError(f"{len(ids)} ids but {mat.shape[0]} rows")
    if mat.shape[1] == 0:
        raise StoreError("dimension must be positive")
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise StoreError(f"duplicate id {i!r}")
        seen.add(i)
    norms = np.linalg.norm(mat, axis=1)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise StoreError(f"zero or non-finite vector for id {ids[bad[0]]!r}")
    rows = (mat / norms[:, None]).astype(np.float32)
    return EmbeddingStore(ids, np.ascontiguousarray(rows), model_tag)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    sim = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, sim))


def _unit_queries(queries, dim: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != dim:
        raise StoreError(f"query dimension {q.shape[1]} != store dimension {dim}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise StoreError("zero query vector")
    # storage precision first, so a stored row queried against itself scores exactly like its twin
    return (q / norms[:, None]).astype(np.float32).astype(np.float64)


def _search(store: EmbeddingStore, q: np.ndarray, k: int, exclude_rows: np.ndarray):
    """Yield (row offset, top-k columns, their similarities) per query block."""
    base = store.vectors.astype(np.float64)
    rank = store.id_rank()
    for start in range(0, q.shape[0], _BLOCK_ROWS):
        block = q[start:start + _BLOCK_ROWS]
        sims = np.ascontiguousarray(block @ base.T)
        idx = kernels.select_topk(sims, rank, k, np.ascontiguousarray(exclude_rows[start:start + _BLOCK_ROWS]))
        vals = np.take_along_axis(sims, np.maximum(idx, 0), axis=1)
        yield start, idx, vals


def top_k(store: EmbeddingStore, query, k: int, exclude: str | None = None) -> NeighborList:
    return top_k_batch(store, [query], k, [exclude])[0]


def top_k_batch(store: EmbeddingStore, queries, k: int, exclude: Sequence[str | None] | None = None,
                query_ids: Sequence[str | None] | None = None) -> list[NeighborList]:
    if k < 1:
        raise ValueError("k must be positive")
    if len(store) == 0:
        raise StoreError("empty store")
    q = _unit_queries(queries, store.dim)
    exclude = list(exclude) if exclude is not None else [None] * q.shape[0]
    ex_rows = np.array([store._row.get(e, -1) if e is not None else -1 for e in exclude], dtype=np.int64)
    qids = list(query_ids) if query_ids is not None else exclude
    kk = min(k, len(store))
    out: list[NeighborList] = []
    for start, idx, vals in _search(store, q, kk, ex_rows):
        for r in range(idx.shape[0]):
            neigh = [(store.ids[c], min(1.0, max(-1.0, float(s)))) for c, s in zip(idx[r], vals[r]) if c >= 0]
            out.append(NeighborList(qids[start + r], neigh))
    return out


def max_similarity(store: EmbeddingStore, queries) -> np.ndarray:
    """Best cosine of each query against any stored row."""
    if len(store) == 0:
        raise StoreError("empty store")
    q = _unit_queries(queries, store.dim)
    base = store.vectors.astype(np.float64)
    out = np.empty(q.shape[0])
    for start in range(0, q.shape[0], _BLOCK_ROWS):
        out[start:start + _BLOCK_ROWS] = (q[start:start + _BLOCK_ROWS] @ base.T).max(axis=1)
    return out


def knn_graph(store: EmbeddingStore, k: int, threshold: float) -> SimilarityGraph:
    if len(store) == 0:
        raise StoreError("empty store")
    if k < 1:
        raise ValueError("k must be positive")
    n = len(store)
    q = store.vectors.astype(np.float64)
    kk = min(k, n - 1)
    pairs: dict[tuple[int, int], float] = {}
    if kk > 0:
        for start, idx, vals in _search(store, q, kk, np.arange(n, dtype=np.int64)):
            rows, cols = np.nonzero((vals > threshold) & (idx >= 0))
            for r, c in zip(rows.tolist(), cols.tolist()):
                a, b = start + r, int(idx[r, c])
                key = (a, b) if a < b else (b, a)
                # both endpoints compute the same float64 dot; keep the first
                pairs.setdefault(key, float(vals[r, c]))
    edges = [(store.ids[a], store.ids[b], s) for (a, b), s in sorted(pairs.items())]
    return SimilarityGraph(store.ids, edges, threshold, k)


def connected_components(graph: SimilarityGraph) -> list[set[str]]:
    order = sorted(graph.nodes)
    pos = {i: n for n, i in enumerate(order)}
    src = np.array([pos[a] for a, _, _ in graph.edges], dtype=np.int64)
    dst = np.array([pos[b] for _, b, _ in graph.edges], dtype=np.int64)
    labels = kernels.component_labels(len(order), src, dst)
    groups: dict[int, set[str]] = {}
    for node, lab in zip(order, labels.tolist()):
        groups.setdefault(lab, set()).add(node)
    # labels are the smallest member's position, so this is "sorted by smallest id"
    return [groups[lab] for lab in sorted(groups)]


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def save_store(store: EmbeddingStore, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = _HEADER.pack(MAGIC, store.dim, len(store)) + store.vectors.astype("<f4").tobytes()
    atomic_write(path, body)
    atomic_write(_sidecar(path, ".ids"), "".join(f"{i}\n" for i in store.ids).encode("utf-8"))
    atomic_write(_sidecar(path, ".meta.json"), json.dumps({"model_tag": store.model_tag}).encode("utf-8"))


def load_store(path) -> EmbeddingStore:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    magic, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if dim == 0:
        raise FormatError(f"{path}: zero dimension at offset 8")
    row_bytes = dim * 4
    expected = _HEADER.size + count * row_bytes
    if len(data) < expected:
        row = (len(data) - _HEADER.size) // row_bytes
        raise FormatError(f"{path}: truncated in row {row} (offset {len(data)}, expected {expected} bytes)")
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} trailing bytes at offset {expected}")
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size).reshape(count, dim)
    vectors = np.ascontiguousarray(vectors.astype(np.float32))
    ids_path = _sidecar(path, ".ids")
    ids = ids_path.read_text(encoding="utf-8").split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != count:
        raise FormatError(f"{ids_path}: {len(ids)} ids for {count} rows")
    if len(set(ids)) != len(ids):
        raise FormatError(f"{ids_path}: duplicate ids")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        r = int(bad[0])
        raise FormatError(f"{path}: row {r} not unit norm ({norms[r]:.6f}) at offset {_HEADER.size + r * row_bytes}")
    meta_path = _sidecar(path, ".meta.json")
    tag = json.loads(meta_path.read_text())["model_tag"] if meta_path.exists() else ""
    return EmbeddingStore(tuple(ids), vectors, tag)

