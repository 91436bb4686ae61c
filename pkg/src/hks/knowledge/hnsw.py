"""Approximate nearest-neighbor search over sample hashes.

A layered navigable-small-world graph: every node lives at layer 0, a
geometrically thinning subset at higher layers. Search greedily descends the
layers, then runs a best-first scan with an ef-sized candidate pool at the
bottom. exact_knn is the exhaustive oracle the index is validated against.
"""
from __future__ import annotations

import heapq
import math
from typing import Callable, Sequence

import numpy as np

from ..errors import InvalidInputError
from .cache import KnowledgeCache, SampleId
from .hashing import HashVector

Array = np.ndarray
Predicate = Callable[[SampleId], bool]


class HnswIndex:
    """Layered proximity graph with seeded level assignment.

    Degree is capped at m on upper layers and 2m at layer 0. Level draws
    follow the geometric distribution with factor 1/ln(m), consumed in
    insertion order, so a fixed insertion sequence rebuilds identically.
    """

    def __init__(
        self,
        dim: int,
        m: int = 16,
        ef_construction: int = 200,
        ef_search: int = 64,
        seed: int = 0,
    ):
        if m < 2:
            raise InvalidInputError("m must be >= 2")
        self.dim = dim
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self._level_factor = 1.0 / math.log(m)
        self._rng = np.random.default_rng([seed, 40991])
        self.ids: list[SampleId] = []
        self._id_to_node: dict[SampleId, int] = {}
        self.levels: list[int] = []
        self.neighbors: list[list[list[int]]] = []  # node -> layer -> neighbor nodes
        self.entry_point: int | None = None
        self.top_level: int = -1
        self._vectors = np.empty((256, dim), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sid: SampleId) -> bool:
        return sid in self._id_to_node

    def _vec(self, node: int) -> Array:
        return self._vectors[node]

    def _dist_sq(self, q: Array, nodes: Sequence[int]) -> Array:
        diff = self._vectors[nodes] - q
        return np.einsum("ij,ij->i", diff, diff)

    def _draw_level(self) -> int:
        u = self._rng.random()
        while u == 0.0:
            u = self._rng.random()
        return int(-math.log(u) * self._level_factor)

    def _search_layer(
        self, q: Array, entries: list[int], layer: int, ef: int
    ) -> list[tuple[float, int]]:
        """Best-first search; returns up to ef (distance^2, node) ascending."""
        visited = set(entries)
        d = self._dist_sq(q, entries)
        candidates = [(float(di), n) for di, n in zip(d, entries)]
        heapq.heapify(candidates)
        pool = [(-di, n) for di, n in candidates]
        heapq.heapify(pool)
        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(pool) >= ef and dist > -pool[0][0]:
                break
            layer_nbrs = self.neighbors[node]
            if layer >= len(layer_nbrs):
                continue
            fresh = [x for x in layer_nbrs[layer] if x not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            nd = self._dist_sq(q, fresh)
            for di, nn in zip(nd, fresh):
                di = float(di)
                if len(pool) < ef:
                    heapq.heappush(candidates, (di, nn))
                    heapq.heappush(pool, (-di, nn))
                elif di < -pool[0][0]:
                    heapq.heappush(candidates, (di, nn))
                    heapq.heappushpop(pool, (-di, nn))
        return sorted((-negd, n) for negd, n in pool)

    def _select_neighbors(self, candidates: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity-aware selection: keep candidates closer to the query than
        to anything already kept, then fill from the rejects.

        Only the nearest 3m candidates enter the heuristic scan (with their
        pairwise distances computed in one shot); the rest can only serve as
        ascending-distance fill.
        """
        if len(candidates) <= m:
            return [n for _, n in candidates]
        scan = min(len(candidates), 3 * m)
        nodes = [n for _, n in candidates[:scan]]
        V = self._vectors[nodes]
        sq = np.einsum("ij,ij->i", V, V)
        between = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (V @ V.T), 0.0)
        selected = [0]
        rejected: list[int] = []
        for idx in range(1, scan):
            if len(selected) == m:
                break
            if candidates[idx][0] < float(between[idx, selected].min()):
                selected.append(idx)
            else:
                rejected.append(idx)
        out = [nodes[i] for i in selected]
        for idx in rejected:
            if len(out) == m:
                break
            out.append(nodes[idx])
        for _, node in candidates[scan:]:
            if len(out) == m:
                break
            out.append(node)
        return out

    def insert(self, hv: HashVector) -> None:
        sid = hv.id
        if sid in self._id_to_node:
            raise InvalidInputError(f"sample {sid} already indexed")
        h = np.asarray(hv.h, dtype=np.float64)
        node = len(self.ids)
        if node == self._vectors.shape[0]:
            grown = np.empty((2 * self._vectors.shape[0], self.dim), dtype=np.float64)
            grown[:node] = self._vectors
            self._vectors = grown
        self._vectors[node] = h
        self.ids.append(sid)
        self._id_to_node[sid] = node
        level = self._draw_level()
        self.levels.append(level)
        self.neighbors.append([[] for _ in range(level + 1)])

        if self.entry_point is None:
            self.entry_point = node
            self.top_level = level
            return

        entries = [self.entry_point]
        for layer in range(self.top_level, level, -1):
            found = self._search_layer(h, entries, layer, 1)
            entries = [found[0][1]]
        for layer in range(min(level, self.top_level), -1, -1):
            candidates = self._search_layer(h, entries, layer, self.ef_construction)
            cap = self.m0 if layer == 0 else self.m
            chosen = self._select_neighbors(candidates, self.m)
            for nb in chosen:
                self.neighbors[node][layer].append(nb)
                self.neighbors[nb][layer].append(node)
                if len(self.neighbors[nb][layer]) > cap:
                    # overflow prune keeps the cap nearest links
                    others = self.neighbors[nb][layer]
                    dists = self._dist_sq(self._vec(nb), others)
                    ranked = sorted((float(di), o) for di, o in zip(dists, others))
                    self.neighbors[nb][layer] = [o for _, o in ranked[:cap]]
            entries = [n for _, n in candidates]
        if level > self.top_level:
            self.entry_point = node
            self.top_level = level

    def query(self, h: Array, k: int, predicate: Predicate | None = None) -> list[SampleId]:
        """Up to k ids passing the filter, ascending Euclidean distance."""
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        if not self.ids:
            return []
        h = np.asarray(h, dtype=np.float64)
        entries = [self.entry_point]
        for layer in range(self.top_level, 0, -1):
            found = self._search_layer(h, entries, layer, 1)
            entries = [found[0][1]]
        pool = self._search_layer(h, entries, 0, max(self.ef_search, k))
        hits = []
        for dist, node in pool:
            sid = self.ids[node]
            if predicate is None or predicate(sid):
                hits.append((dist, sid))
        hits.sort()
        return [sid for _, sid in hits[:k]]


def exact_knn(
    store: KnowledgeCache, h: Array, k: int, predicate: Predicate | None = None
) -> list[SampleId]:
    """Exhaustive scan over all registered hashes; ties break by SampleId order."""
    ids, matrix = store.hash_table()
    if not ids:
        return []
    h = np.asarray(h, dtype=np.float64)
    diff = matrix - h
    d2 = np.einsum("ij,ij->i", diff, diff)
    out: list[SampleId] = []
    for i in np.argsort(d2, kind="stable"):
        sid = ids[i]
        if predicate is None or predicate(sid):
            out.append(sid)
            if len(out) == k:
                break
    return out
