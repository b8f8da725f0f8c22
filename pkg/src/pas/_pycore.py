"""Pure-Python/numpy twins of the compiled kernels in ``_core.pyx``."""
from __future__ import annotations

import numpy as np


def front_ranks(values: np.ndarray, order: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    rank = np.zeros(n, dtype=np.int64)
    if n == 0:
        return rank
    # dense dominance matrix, built in row blocks
    dom = np.zeros((n, n), dtype=bool)
    block = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n, block):
        a = values[start:start + block, None, :]
        ge = (a >= values[None, :, :]).all(axis=2)
        gt = (a > values[None, :, :]).any(axis=2)
        dom[start:start + block] = ge & gt
    counts = dom.sum(axis=0)
    alive = np.ones(n, dtype=bool)
    front = 0
    while alive.any():
        current = np.flatnonzero(alive & (counts == 0))
        rank[current] = front
        alive[current] = False
        counts -= dom[current].sum(axis=0)
        front += 1
    return rank


def component_labels(n: int, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    parent = list(range(n))

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b in zip(src.tolist(), dst.tolist()):
        ra, rb = find(a), find(b)
        if ra < rb:
            parent[rb] = ra
        elif rb < ra:
            parent[ra] = rb
    return np.array([find(x) for x in range(n)], dtype=np.int64)


def select_topk(sims: np.ndarray, rank: np.ndarray, k: int, exclude: np.ndarray) -> np.ndarray:
    b, n = sims.shape
    out = np.full((b, k), -1, dtype=np.int64)
    if k == 0:
        return out
    for row in range(b):
        s = sims[row]
        cols = np.arange(n)
        if exclude[row] >= 0:
            cols = cols[cols != exclude[row]]
            s = s[cols]
        take = min(k, cols.size)
        if take == 0:
            continue
        if take < cols.size:
            # everything strictly above the k-th value, plus boundary ties by rank
            kth = np.partition(s, cols.size - take)[cols.size - take]
            cand = np.flatnonzero(s >= kth)
            cols, s = cols[cand], s[cand]
        picked = np.lexsort((rank[cols], -s))[:take]
        out[row, :take] = cols[picked]
    return out
