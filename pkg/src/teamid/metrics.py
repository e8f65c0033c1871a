"""Ranking and clustering evaluation: NMI, k-means, Recall@k, mAP, CMC.

All kernels are deterministic: distances tie-break by ascending gallery index
and k-means is seeded. Retrieval distance is Euclidean on L2-normalized
embeddings unless normalization is switched off.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

PROTOCOLS = ("cars196_zsl", "veri776")


@dataclass
class ClusterAssignment:
    predicted: np.ndarray  # cluster label per sample
    truth: np.ndarray

    def validate(self) -> None:
        p, t = np.asarray(self.predicted), np.asarray(self.truth)
        if p.size == 0 or t.size == 0:
            raise ValueError("empty partition")
        if p.shape != t.shape:
            raise ValueError("partitions cover different index sets")


@dataclass
class RankingResult:
    query_index: int
    gallery_order: np.ndarray  # gallery indices by ascending distance
    distances: np.ndarray      # aligned with gallery_order
    relevance: np.ndarray      # aligned boolean


@dataclass
class EvaluationReport:
    protocol: str
    nmi: float | None = None
    recall_at: dict[int, float] = field(default_factory=dict)
    map_score: float | None = None
    cmc: list[float] = field(default_factory=list)
    excluded_queries: int = 0

    def to_json(self) -> str:
        out: dict = {"protocol": self.protocol}
        if self.nmi is not None:
            out["nmi"] = self.nmi
        if self.recall_at:
            out["recall_at"] = {str(k): v for k, v in sorted(self.recall_at.items())}
        if self.map_score is not None:
            out["map"] = self.map_score
        if self.cmc:
            out["cmc"] = list(self.cmc)
        out["excluded_queries"] = self.excluded_queries
        return json.dumps(out, indent=2, sort_keys=True)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assign: ClusterAssignment) -> float:
    """2*I(P,T) / (H(P)+H(T)), natural-log entropies, label-permutation invariant."""
    assign.validate()
    pred = np.asarray(assign.predicted)
    truth = np.asarray(assign.truth)
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(table, (pi, ti), 1)
    n = table.sum()
    hp = _entropy(table.sum(axis=1))
    ht = _entropy(table.sum(axis=0))
    if hp + ht == 0.0:
        # both single-cluster: identical partitions by construction
        return 1.0
    pr = table.sum(axis=1, keepdims=True) / n
    pc = table.sum(axis=0, keepdims=True) / n
    joint = table / n
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = joint * np.log(joint / (pr * pc))
    mi = float(np.nansum(terms))
    return 2.0 * mi / (hp + ht)


def kmeans_cluster(embeddings: np.ndarray, k: int, restarts: int = 10,
                   seed: int = 0) -> np.ndarray:
    """Best-of-restarts Lloyd's algorithm; returns a predicted label array."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if k > embeddings.shape[0]:
        raise ValueError(f"k={k} exceeds number of samples {embeddings.shape[0]}")
    km = KMeans(n_clusters=k, n_init=restarts, max_iter=300,
                random_state=seed, algorithm="lloyd")
    return km.fit_predict(embeddings)


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray,
                ks: list[int], normalize: bool = True) -> dict[int, float]:
    """Leave-one-out retrieval success rate at each k."""
    labels = np.asarray(labels)
    if labels.size < 2:
        raise ValueError("need at least 2 samples")
    x = _normalize(embeddings) if normalize else np.asarray(embeddings, float)
    d = np.sqrt(np.maximum(
        (x ** 2).sum(1)[:, None] + (x ** 2).sum(1)[None, :] - 2 * x @ x.T, 0))
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    hits = labels[order] == labels[:, None]
    out = {}
    for k in ks:
        out[k] = float(hits[:, :k].any(axis=1).mean())
    return out


@dataclass
class MapCmcResult:
    map_score: float
    cmc: np.ndarray
    rankings: list[RankingResult]
    excluded_queries: int


def map_cmc(query_embeddings: np.ndarray, gallery_embeddings: np.ndarray,
            query_ids: np.ndarray, gallery_ids: np.ndarray,
            query_cams: np.ndarray | None = None,
            gallery_cams: np.ndarray | None = None,
            protocol: str = "cars196_zsl",
            normalize: bool = True,
            max_rank: int | None = None,
            distances: np.ndarray | None = None) -> MapCmcResult:
    """Mean average precision and CMC curve over a query/gallery split.

    Under the veri776 protocol, gallery items sharing BOTH identity and camera
    with the query are excluded from that query's ranking. Queries with zero
    relevant gallery items are excluded from the averages and counted. A
    precomputed query×gallery squared-distance matrix may be passed instead of
    embeddings (e.g. with cross-team entries forced to +inf).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if protocol == "veri776" and (query_cams is None or gallery_cams is None):
        raise ValueError("veri776 protocol requires camera ids")
    if distances is not None:
        d = np.asarray(distances, dtype=np.float64)
    else:
        q = _normalize(query_embeddings) if normalize else np.asarray(query_embeddings, float)
        g = _normalize(gallery_embeddings) if normalize else np.asarray(gallery_embeddings, float)
        d = (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2 * q @ g.T
    n_gallery = d.shape[1]
    max_rank = n_gallery if max_rank is None else min(max_rank, n_gallery)

    aps, cmc_rows, rankings = [], [], []
    excluded = 0
    for qi in range(d.shape[0]):
        keep = np.ones(n_gallery, dtype=bool)
        if protocol == "veri776":
            keep &= ~((gallery_ids == query_ids[qi])
                      & (np.asarray(gallery_cams) == np.asarray(query_cams)[qi]))
        kept = np.flatnonzero(keep)
        order = kept[np.argsort(d[qi, kept], kind="stable")]
        rel = gallery_ids[order] == query_ids[qi]
        rankings.append(RankingResult(
            query_index=qi, gallery_order=order,
            distances=np.sqrt(np.maximum(d[qi, order], 0)), relevance=rel))
        if not rel.any():
            excluded += 1
            continue
        ranks = np.flatnonzero(rel) + 1
        precision = np.arange(1, len(ranks) + 1) / ranks
        aps.append(precision.mean())
        row = np.zeros(max_rank)
        first = ranks[0]
        if first <= max_rank:
            row[first - 1:] = 1.0
        cmc_rows.append(row)
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    return MapCmcResult(
        map_score=float(np.mean(aps)),
        cmc=np.mean(cmc_rows, axis=0),
        rankings=rankings,
        excluded_queries=excluded)


def export_rankings_csv(rankings: list[RankingResult], path: str | Path) -> None:
    """Per-query rankings as CSV rows (query_id, rank, gallery_id, distance, relevant)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "rank", "gallery_id", "distance", "relevant"])
        for r in rankings:
            for rank, (gi, dist, rel) in enumerate(
                    zip(r.gallery_order, r.distances, r.relevance), start=1):
                w.writerow([r.query_index, rank, int(gi),
                            f"{float(dist):.6f}", int(bool(rel))])
