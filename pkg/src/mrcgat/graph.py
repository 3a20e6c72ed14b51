"""Directed KNN relational graphs with distance gating."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from mrcgat.errors import ConfigError, GraphError


@dataclass(frozen=True)
class RelationalGraph:
    """Directed edges ``src -> dst`` grouped by destination.

    Edges are sorted by ``(dst, src)`` so each node's in-edges form one
    contiguous segment starting at ``offsets[dst]``.
    """

    relation: str
    n_nodes: int
    k: int
    tau: float
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    fallback: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    @property
    def offsets(self) -> np.ndarray:
        deg = self.in_degree
        if np.any(deg == 0):
            raise GraphError(f"relation {self.relation}: node without in-edges")
        return np.concatenate([[0], np.cumsum(deg)[:-1]])

    def edge_set(self, include_fallback: bool = False) -> set[tuple[int, int]]:
        keep = np.ones(self.n_edges, bool) if include_fallback else ~self.fallback
        return set(zip(self.src[keep].tolist(), self.dst[keep].tolist()))

    def stats(self) -> dict:
        deg = self.in_degree
        return {"relation": self.relation, "edges": self.n_edges,
                "fallback_edges": int(self.fallback.sum()),
                "min_in_degree": int(deg.min()), "max_in_degree": int(deg.max())}

    def to_lines(self) -> list[str]:
        return [f"{self.relation} {s} {d} {w:.6f} {int(f)}"
                for s, d, w, f in zip(self.src, self.dst, self.weight, self.fallback)]


def dense_weights(d: np.ndarray) -> np.ndarray:
    """Similarity ``1 / (1 + D_ij)`` off the diagonal, zero on it."""
    w = 1.0 / (1.0 + np.asarray(d, dtype=np.float64))
    np.fill_diagonal(w, 0.0)
    return w


def knn_select(d: np.ndarray, k: int) -> np.ndarray:
    """Row ``i`` lists the ``k`` nodes closest to ``i`` (excluding ``i``).

    Equal distances are ordered by node index, lowest first.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if not 1 <= k <= n - 1:
        raise ConfigError(f"k must satisfy 1 <= k <= N - 1 = {n - 1}, got {k}")
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    return np.argsort(masked, axis=1, kind="stable")[:, :k]


def _assemble(relation, n, k, tau, src, dst, d, fallback) -> RelationalGraph:
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    fallback = np.asarray(fallback, dtype=bool)
    order = np.lexsort((src, dst))
    src, dst, fallback = src[order], dst[order], fallback[order]
    weight = 1.0 / (1.0 + d[dst, src])
    return RelationalGraph(relation, n, k, float(tau), src, dst, weight, fallback)


def threshold_gate(neighbors: np.ndarray, d: np.ndarray, tau: float, relation: str = "",
                   fallback: str = "on") -> RelationalGraph:
    """Drop KNN edges with ``D_ij > tau``.

    A node left without in-edges gets back its single nearest neighbour as a
    flagged fallback edge (``fallback="on"``) or raises (``"error"``).
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if fallback not in ("on", "error"):
        raise ConfigError(f"fallback must be 'on' or 'error', got {fallback!r}")
    d = np.asarray(d, dtype=np.float64)
    n, k = neighbors.shape
    dst = np.repeat(np.arange(n), k)
    src = neighbors.reshape(-1)
    keep = d[dst, src] <= tau
    src, dst = src[keep], dst[keep]
    flags = np.zeros(src.size, bool)
    isolated = np.setdiff1d(np.arange(n), dst)
    if isolated.size:
        if fallback == "error":
            raise GraphError(f"relation {relation}: tau={tau} isolates nodes {isolated.tolist()}")
        src = np.concatenate([src, neighbors[isolated, 0]])
        dst = np.concatenate([dst, isolated])
        flags = np.concatenate([flags, np.ones(isolated.size, bool)])
    return _assemble(relation, n, k, tau, src, dst, d, flags)


def build_relational_graphs(distances: Mapping[str, np.ndarray], k: int, tau: float,
                            fallback: str = "on") -> dict[str, RelationalGraph]:
    return {g: threshold_gate(knn_select(d, k), d, tau, g, fallback) for g, d in distances.items()}


def write_edge_list(graphs: Mapping[str, RelationalGraph], path) -> None:
    """Debug dump: one ``relation src dst weight fallback_flag`` line per edge."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs.values():
            for line in g.to_lines():
                fh.write(line + "\n")
