"""Pool curation: near-duplicate removal, leak filtering, OOD scoring and
Pareto-front pruning.

Removal order is expressed as dominance: triple ``a`` dominates ``b`` when
``a`` is at least as out-of-distribution on every metric and strictly more on
one, so ``a`` goes first. Front 0 holds the most removable images.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from pas import kernels
from pas.errors import DomainError, IntegrityError
from pas.index import EmbeddingStore, connected_components, knn_graph, top_k_batch
from pas.io import stable_int
from pas.records import SOURCES, ImageRecord

log = logging.getLogger(__name__)

METRICS = ("ood_primary", "ood_general", "ood_text_delta")
PROB_SUM_TOL = 1e-6


@dataclass(frozen=True)
class DedupConfig:
    lambda_dup: float = 0.6
    k: int = 64
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.lambda_dup < 1.0:
            raise DomainError(f"lambda_dup outside (0,1): {self.lambda_dup}")
        if self.k < 1:
            raise DomainError(f"dedup k must be positive: {self.k}")


@dataclass(frozen=True)
class LeakFilterConfig:
    threshold: float = 0.45
    k: int = 32

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise DomainError(f"leak threshold outside (0,1): {self.threshold}")
        if self.k < 1:
            raise DomainError(f"leak k must be positive: {self.k}")


@dataclass(frozen=True)
class OODTriple:
    image_id: str
    ood_primary: float
    ood_general: float
    ood_text_delta: float

    def values(self) -> tuple[float, float, float]:
        return (self.ood_primary, self.ood_general, self.ood_text_delta)


@dataclass
class ParetoAssignment:
    front_of: dict[str, int]
    fronts: list[list[str]]

    def sizes(self) -> list[int]:
        return [len(f) for f in self.fronts]


class DedupResult(NamedTuple):
    kept: list[ImageRecord]
    removed: list[ImageRecord]
    component_map: dict[str, str]


class LeakResult(NamedTuple):
    kept: list[ImageRecord]
    removed: list[ImageRecord]


@dataclass
class HaltSelection:
    front: int | None
    knees: dict[str, float | None]
    removed_through_front: int = 0
    warning: str | None = None


@dataclass
class CurationReport:
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    duplicate_component_sizes: dict[int, int] = field(default_factory=dict)
    knees: dict[str, float | None] = field(default_factory=dict)
    halt_front: int | None = None
    halt_mode: str = "none"
    n_fronts: int = 0
    warnings: list[str] = field(default_factory=list)

    STAGES = ("raw", "after_dedup", "after_leak", "after_pareto")

    def record(self, stage: str, records: Sequence[ImageRecord]) -> None:
        c = Counter(r.source for r in records)
        self.counts[stage] = {s: c.get(s, 0) for s in SOURCES} | {"total": len(records)}

    def removed(self) -> dict[str, int]:
        t = {s: self.counts[s]["total"] for s in self.STAGES}
        return {
            "dedup": t["raw"] - t["after_dedup"],
            "leak": t["after_dedup"] - t["after_leak"],
            "pareto": t["after_leak"] - t["after_pareto"],
        }

    def telescopes(self) -> bool:
        if any(s not in self.counts for s in self.STAGES):
            return False
        for s in self.STAGES:
            row = self.counts[s]
            if sum(row[src] for src in SOURCES) != row["total"] or row["total"] < 0:
                return False
        rem = self.removed()
        if any(v < 0 for v in rem.values()):
            return False
        raw = self.counts["raw"]["total"]
        return raw - rem["dedup"] - rem["leak"] - rem["pareto"] == self.counts["after_pareto"]["total"]

    def to_json(self) -> dict:
        return {
            "counts": self.counts,
            "removed": self.removed() if all(s in self.counts for s in self.STAGES) else {},
            "duplicate_component_sizes": {str(k): v for k, v in sorted(self.duplicate_component_sizes.items())},
            "knees": self.knees,
            "halt_front": self.halt_front,
            "halt_mode": self.halt_mode,
            "n_fronts": self.n_fronts,
            "warnings": self.warnings,
        }

    @classmethod
    def from_json(cls, row: dict) -> "CurationReport":
        return cls(
            counts=row["counts"],
            duplicate_component_sizes={int(k): v for k, v in row["duplicate_component_sizes"].items()},
            knees=row["knees"],
            halt_front=row["halt_front"],
            halt_mode=row["halt_mode"],
            n_fronts=row["n_fronts"],
            warnings=list(row["warnings"]),
        )


# -- deduplication and leak filtering ---------------------------------------

def _require_ids(store: EmbeddingStore, records: Sequence[ImageRecord], what: str) -> None:
    missing = [r.id for r in records if r.id not in store]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise IntegrityError(f"{len(missing)} record(s) missing from the {what} store: {shown}")


def _pick_representative(members: list[str], rng_seed: int) -> str:
    members = sorted(members)
    rng = np.random.default_rng([rng_seed % (1 << 63), stable_int(members[0])])
    return members[int(rng.integers(len(members)))]


def dedup(records: Sequence[ImageRecord], copy_store: EmbeddingStore, config: DedupConfig) -> DedupResult:
    if not records:
        return DedupResult([], [], {})
    _require_ids(copy_store, records, "copy-detection")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate record ids passed to dedup")
    graph = knn_graph(copy_store.subset(ids), config.k, config.lambda_dup)
    component_map: dict[str, str] = {}
    for comp in connected_components(graph):
        rep = next(iter(comp)) if len(comp) == 1 else _pick_representative(list(comp), config.rng_seed)
        for member in comp:
            component_map[member] = rep
    kept = [r for r in records if component_map[r.id] == r.id]
    removed = [r for r in records if component_map[r.id] != r.id]
    return DedupResult(kept, removed, component_map)


def component_size_histogram(component_map: Mapping[str, str]) -> dict[int, int]:
    sizes = Counter(component_map.values())
    return dict(sorted(Counter(s for s in sizes.values() if s > 1).items()))


def leak_filter(records: Sequence[ImageRecord], copy_store: EmbeddingStore,
                protected_store: EmbeddingStore | None, config: LeakFilterConfig) -> LeakResult:
    if protected_store is None or len(protected_store) == 0:
        log.warning("leak filter: empty protected store, nothing removed")
        return LeakResult(list(records), [])
    if not records:
        return LeakResult([], [])
    _require_ids(copy_store, records, "copy-detection")
    queries = np.stack([copy_store.vector(r.id) for r in records])
    hits = top_k_batch(protected_store, queries, min(config.k, len(protected_store)),
                       query_ids=[r.id for r in records])
    kept, removed = [], []
    for rec, nl in zip(records, hits):
        (removed if nl.neighbors[0][1] > config.threshold else kept).append(rec)
    return LeakResult(kept, removed)


# -- OOD scoring ------------------------------------------------------------

def _check_row(p: np.ndarray, p_no: np.ndarray) -> None:
    if p.shape != p_no.shape or p.ndim != 1:
        raise DomainError(f"probability vectors differ in shape: {p.shape} vs {p_no.shape}")
    if p.size == 0:
        raise DomainError("empty probability vector")
    for name, v in (("p", p), ("p_no", p_no)):
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise DomainError(f"{name} has entries outside [0,1]")
    if abs(float(p.sum()) - 1.0) > PROB_SUM_TOL:
        raise DomainError(f"p sums to {float(p.sum())!r}, not 1")


def ood_score(p, p_no) -> float:
    p = np.asarray(p, dtype=np.float64)
    p_no = np.asarray(p_no, dtype=np.float64)
    _check_row(p, p_no)
    score = 1.0 - float(np.dot(1.0 - p_no, p))
    # excursions this small come from the allowed normalisation slack
    return min(1.0, max(0.0, score))


def ood_triple(image_id: str, bank_probs, general_probs, blurred_bank_probs=None) -> OODTriple:
    """Combine probability rows into the three removal metrics for one image.

    Rows are anything with ``p`` and ``p_no`` attributes. ``blurred_bank_probs``
    is given only when text was detected in the image.
    """
    try:
        primary = ood_score(bank_probs.p, bank_probs.p_no)
        general = ood_score(general_probs.p, general_probs.p_no)
        delta = 0.0
        if blurred_bank_probs is not None:
            delta = ood_score(blurred_bank_probs.p, blurred_bank_probs.p_no) - primary
    except DomainError as exc:
        raise DomainError(f"image {image_id}: {exc}") from exc
    return OODTriple(image_id, primary, general, delta)


# -- Pareto fronts ----------------------------------------------------------

def pareto_dominates(a: OODTriple, b: OODTriple) -> bool:
    av, bv = a.values(), b.values()
    return all(x >= y for x, y in zip(av, bv)) and any(x > y for x, y in zip(av, bv))


def _front_index(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(values)):
        raise DomainError("non-finite metric value")
    # lexicographically descending: every dominator precedes what it dominates
    order = np.lexsort(tuple(-values[:, j] for j in reversed(range(values.shape[1]))))
    return kernels.front_ranks(values, np.ascontiguousarray(order, dtype=np.int64))


def peel_fronts(triples: Sequence[OODTriple]) -> ParetoAssignment:
    ids = [t.image_id for t in triples]
    if len(set(ids)) != len(ids):
        raise DomainError("duplicate image ids among triples")
    ranks = _front_index(np.array([t.values() for t in triples], dtype=np.float64).reshape(len(triples), 3))
    nfronts = int(ranks.max()) + 1 if len(triples) else 0
    fronts: list[list[str]] = [[] for _ in range(nfronts)]
    for i, r in zip(ids, ranks.tolist()):
        fronts[r].append(i)
    for f in fronts:
        f.sort()
    return ParetoAssignment(dict(zip(ids, ranks.tolist())), fronts)


# -- knee detection and halting ----------------------------------------------

_PLATEAU_TOL = 1e-12


def _local_maxima(d: np.ndarray) -> list[tuple[int, int]]:
    """Interior runs of (near-)equal values that rise into and fall out of."""
    runs, n, s = [], len(d), 0
    while s < n:
        e = s
        while e + 1 < n and abs(d[e + 1] - d[s]) <= _PLATEAU_TOL:
            e += 1
        if 0 < s and e < n - 1 and d[s - 1] < d[s] and d[e + 1] < d[e]:
            runs.append((s, e))
        s = e + 1
    return runs


def kneedle_index(xs, ys, sensitivity: float = 1.0) -> int | None:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError("xs and ys must be 1-d and equally long")
    if len(x) < 3:
        raise DomainError("kneedle needs at least 3 points")
    if not np.all(np.diff(x) > 0):
        raise DomainError("xs must be strictly increasing")
    if not (np.all(np.isfinite(y)) and sensitivity > 0):
        raise DomainError("non-finite ys or non-positive sensitivity")
    if y.max() == y.min():
        return None
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / (y.max() - y.min())
    increasing = yn[-1] >= yn[0]
    chord = yn[0] + (yn[-1] - yn[0]) * xn
    concave = float(np.mean(yn - chord)) >= 0.0
    # map every shape onto "concave increasing", scanning in transformed x order
    idx = np.arange(len(x))
    if increasing and concave:
        xt, yt = xn, yn
    elif not increasing and not concave:
        xt, yt = xn, 1.0 - yn
    elif not increasing and concave:
        idx = idx[::-1]
        xt, yt = 1.0 - xn[::-1], yn[::-1]
    else:
        idx = idx[::-1]
        xt, yt = 1.0 - xn[::-1], 1.0 - yn[::-1]
    d = yt - xt
    maxima = _local_maxima(d)
    step = float(np.mean(np.diff(xt)))
    for n, (s, e) in enumerate(maxima):
        threshold = d[s] - sensitivity * step
        stop = maxima[n + 1][0] if n + 1 < len(maxima) else len(d)
        if np.any(d[e + 1:stop] < threshold):
            return int(idx[s])
    return None


def kneedle(xs, ys, sensitivity: float = 1.0) -> float | None:
    i = kneedle_index(xs, ys, sensitivity)
    return None if i is None else float(np.asarray(xs, dtype=np.float64)[i])


def front_curves(assignment: ParetoAssignment, triples: Mapping[str, OODTriple]):
    """Cumulative removal counts and per-front metric means, one curve per metric."""
    sizes = np.array(assignment.sizes(), dtype=np.int64)
    xs = np.cumsum(sizes).astype(np.float64)
    curves = {}
    for m in METRICS:
        curves[m] = np.array([np.mean([getattr(triples[i], m) for i in f]) for f in assignment.fronts])
    return xs, curves


def select_halt(assignment: ParetoAssignment, triples: Mapping[str, OODTriple],
                sensitivity: float = 1.0) -> HaltSelection:
    knees: dict[str, float | None] = {m: None for m in METRICS}
    if len(assignment.fronts) < 3:
        return HaltSelection(None, knees, 0, f"only {len(assignment.fronts)} front(s); no pruning")
    xs, curves = front_curves(assignment, triples)
    for m in METRICS:
        knees[m] = kneedle(xs, curves[m], sensitivity)
    found = [k for k in knees.values() if k is not None]
    if not found:
        return HaltSelection(None, knees, 0, "no knee on any metric; no pruning")
    halt_x = max(found)
    front = int(np.searchsorted(xs, halt_x, side="right")) - 1
    if front < 0:
        return HaltSelection(None, knees, 0, "knee precedes the first front; no pruning")
    return HaltSelection(front, knees, int(xs[front]))


def removal_order(assignment: ParetoAssignment, triples: Mapping[str, OODTriple]) -> list[str]:
    """All scored ids in the order pruning removes them."""
    out: list[str] = []
    for f in assignment.fronts:
        out.extend(sorted(f, key=lambda i: (-triples[i].ood_primary, i)))
    return out


def prune_to_size(assignment: ParetoAssignment, records: Sequence[ImageRecord], target: int,
                  triples: Mapping[str, OODTriple]) -> list[ImageRecord]:
    if target < 1:
        raise DomainError("target size must be positive")
    if target > len(records):
        raise DomainError(f"target {target} exceeds the {len(records)} available records")
    missing = [r.id for r in records if r.id not in assignment.front_of]
    if missing:
        raise IntegrityError(f"{len(missing)} record(s) have no front assignment, e.g. {missing[0]}")
    n_drop = len(records) - target
    dropped = set(removal_order(assignment, triples)[:n_drop])
    return [r for r in records if r.id not in dropped]


def prune_through_front(assignment: ParetoAssignment, records: Sequence[ImageRecord],
                        halt_front: int | None) -> list[ImageRecord]:
    if halt_front is None:
        return list(records)
    return [r for r in records if assignment.front_of[r.id] > halt_front]
