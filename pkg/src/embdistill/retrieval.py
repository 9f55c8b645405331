"""Brute-force retrieval: pairwise distances, MAP / MR1, and the latency benchmark."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EmbeddingSet
from .errors import ConfigError, DimensionError, EvaluationError
from .tensor import as_matrix

METRICS = ("eq2", "cosine")


def pairwise_distances(Q, R, metric: str = "eq2") -> np.ndarray:
    """|Q| x |R| distance matrix in float64.

    ``eq2`` is the squared Euclidean distance divided by the dimensionality;
    ``cosine`` is one minus the cosine similarity.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    Q = as_matrix(Q, "Q")
    R = as_matrix(R, "R")
    if Q.shape[1] != R.shape[1]:
        raise DimensionError(f"Q has {Q.shape[1]} columns, R has {R.shape[1]}")
    if metric == "cosine":
        qn = np.linalg.norm(Q, axis=1, keepdims=True)
        rn = np.linalg.norm(R, axis=1, keepdims=True)
        if np.any(qn == 0) or np.any(rn == 0):
            raise EvaluationError("cosine distance undefined for zero vectors")
        return 1.0 - (Q / qn) @ (R / rn).T
    sq = (np.einsum("ij,ij->i", Q, Q)[:, None] + np.einsum("ij,ij->i", R, R)[None, :]
          - 2.0 * (Q @ R.T))
    return np.maximum(sq, 0.0) / Q.shape[1]


@dataclass
class RetrievalReport:
    map: float
    mr1: float
    per_query_ap: np.ndarray
    query_ids: list[str]
    first_relevant_rank: np.ndarray
    excluded_queries: int
    metric: str
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self, per_query: bool = False, timing: bool = True) -> dict:
        out = {
            "map": self.map,
            "mr1": self.mr1,
            "num_queries": len(self.query_ids),
            "excluded_queries": self.excluded_queries,
            "metric": self.metric,
        }
        if timing:
            out["timing"] = dict(self.timing)
        if per_query:
            out["per_query_ap"] = {q: float(a) for q, a in zip(self.query_ids, self.per_query_ap)}
        return out

    def to_json(self, path, **kw) -> None:
        Path(path).write_text(json.dumps(self.to_dict(**kw), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query_id", "average_precision", "first_relevant_rank"])
            for q, a, r in zip(self.query_ids, self.per_query_ap, self.first_relevant_rank):
                w.writerow([q, repr(float(a)), int(r)])

    def table(self) -> str:
        t = self.timing
        lines = [
            f"queries       {len(self.query_ids)} (excluded {self.excluded_queries})",
            f"metric        {self.metric}",
            f"MAP           {self.map:.4f}",
            f"MR1           {self.mr1:.2f}",
        ]
        if t:
            lines.append(f"time          distance {t.get('distance', 0):.3f}s  "
                         f"sort {t.get('sort', 0):.3f}s  total {t.get('total', 0):.3f}s")
        return "\n".join(lines)


def average_precision(relevance) -> float:
    """AP of one ranked list given its 0/1 relevance pattern."""
    rel = np.asarray(relevance, dtype=bool)
    if not rel.any():
        raise EvaluationError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / rel.sum())


def evaluate(es: EmbeddingSet, metric: str = "eq2", block: int = 512) -> RetrievalReport:
    """Leave-one-out retrieval over the whole set.

    Every labeled item queries all other items (noise items included as
    candidates). Relevant = same clique. Distance ties are broken by
    candidate index; ranks are 1-based. Queries whose clique has no other
    member are excluded and counted.
    """
    t_start = time.perf_counter()
    labels = es.labels
    sizes = {c: len(m) for c, m in es.clique_members.items()}
    queries = np.array([i for i, c in enumerate(es.cliques) if c is not None and sizes[c] >= 2],
                       dtype=np.int64)
    excluded = sum(1 for c in es.cliques if c is not None) - queries.size
    if queries.size == 0:
        raise EvaluationError("no valid queries: need a clique with at least two members")
    X = np.asarray(es.vectors, dtype=np.float64)
    n = X.shape[0]
    ranks = np.arange(1, n, dtype=np.float64)
    ap = np.empty(queries.size)
    first = np.empty(queries.size, dtype=np.int64)
    t_dist = t_sort = 0.0
    for s in range(0, queries.size, block):
        q = queries[s:s + block]
        t0 = time.perf_counter()
        D = pairwise_distances(X[q], X, metric)
        D[np.arange(q.size), q] = np.inf
        t1 = time.perf_counter()
        order = np.argsort(D, axis=1, kind="stable")[:, :-1]   # self sorts last
        t2 = time.perf_counter()
        t_dist += t1 - t0
        t_sort += t2 - t1
        rel = labels[order] == labels[q][:, None]
        hits = np.cumsum(rel, axis=1)
        ap[s:s + q.size] = np.sum(np.where(rel, hits / ranks, 0.0), axis=1) / rel.sum(axis=1)
        first[s:s + q.size] = np.argmax(rel, axis=1) + 1
    return RetrievalReport(
        map=float(ap.mean()),
        mr1=float(first.mean()),
        per_query_ap=ap,
        query_ids=[es.ids[i] for i in queries],
        first_relevant_rank=first,
        excluded_queries=int(excluded),
        metric=metric,
        timing={"distance": t_dist, "sort": t_sort, "total": time.perf_counter() - t_start},
    )


# --- latency benchmark ----------------------------------------------------------

# rows per block are chosen so every block holds about this many float32 values
BLOCK_ELEMENTS = 1 << 22


def brute_force_distances(query: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from one query to every reference row,
    streaming the reference matrix in fixed-size blocks."""
    n, d = refs.shape
    rows = max(1, BLOCK_ELEMENTS // d)
    out = np.empty(n, dtype=refs.dtype)
    for s in range(0, n, rows):
        diff = refs[s:s + rows] - query
        out[s:s + rows] = np.einsum("ij,ij->i", diff, diff)
    return out


@dataclass
class BenchRow:
    dim: int
    median_seconds: float
    ratio: float
    times: list[float]


def bench_retrieval(n_refs: int, dims, repeats: int = 5, seed: int = 0,
                    keep_distances: bool = False):
    """Median wall-clock time of one query against ``n_refs`` random
    references, per dimensionality. ``ratio`` is relative to the smallest d.

    Returns ``(rows, distances)``; ``distances`` maps d to the last computed
    distance vector when ``keep_distances`` is set, else it is empty.
    """
    if n_refs < 1 or repeats < 1:
        raise ConfigError("n_refs and repeats must be >= 1")
    dims = sorted(int(d) for d in dims)
    rows, dists = [], {}
    for d in dims:
        rng = np.random.default_rng([seed, d])
        refs = rng.standard_normal((n_refs, d), dtype=np.float32)
        query = rng.standard_normal(d, dtype=np.float32)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = brute_force_distances(query, refs)
            times.append(time.perf_counter() - t0)
        if keep_distances:
            dists[d] = out
        rows.append(BenchRow(d, float(np.median(times)), 0.0, times))
        del refs
    base = rows[0].median_seconds
    for r in rows:
        r.ratio = r.median_seconds / base
    return rows, dists


def bench_table(rows) -> str:
    lines = [f"{'d':>8} {'median (s)':>12} {'ratio':>8}"]
    lines += [f"{r.dim:>8} {r.median_seconds:>12.4f} {r.ratio:>8.2f}" for r in rows]
    return "\n".join(lines)
