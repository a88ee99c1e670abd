"""Retrieval evaluation: distance matrix, CMC, mAP, mINP.

Per query the gallery is sorted by ascending distance (ties broken by
gallery index), entries sharing both identity and camera with the query
are dropped, and:

    CMC(k)  fraction of valid queries with a positive in the top k
    AP      mean over positives of (hit ordinal) / (hit rank)
    INP     (#positives) / (rank of the last positive)

Queries with no remaining positive are excluded from all means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class RankingMetrics:
    cmc: np.ndarray          # rank-1..rank-K_max accuracies
    map: float
    minp: float
    num_valid_queries: int

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def as_rows(self):
        rows = [("map", self.map), ("minp", self.minp),
                ("num_valid_queries", self.num_valid_queries)]
        rows += [(f"cmc_{k + 1}", float(v)) for k, v in enumerate(self.cmc)]
        return rows


def distance_matrix(q_feats: np.ndarray, g_feats: np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    if q_feats.shape[1] != g_feats.shape[1]:
        raise ShapeError(
            f"feature dims differ: {q_feats.shape[1]} vs {g_feats.shape[1]}")
    if metric == "euclidean":
        d2 = ((q_feats ** 2).sum(1)[:, None] + (g_feats ** 2).sum(1)[None, :]
              - 2.0 * q_feats @ g_feats.T)
        return np.sqrt(np.maximum(d2, 0.0))
    if metric == "cosine":
        qn = q_feats / np.linalg.norm(q_feats, axis=1, keepdims=True)
        gn = g_feats / np.linalg.norm(g_feats, axis=1, keepdims=True)
        return 1.0 - qn @ gn.T
    raise DataError(f"unknown metric {metric!r}")


def evaluate(distmat: np.ndarray, q_ids, g_ids, q_cams, g_cams,
             k_max: int = 10) -> RankingMetrics:
    distmat = np.asarray(distmat)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    nq, ng = distmat.shape
    if not (len(q_ids) == len(q_cams) == nq and
            len(g_ids) == len(g_cams) == ng):
        raise ShapeError("distmat extents disagree with id/camera arrays")
    cmc_sum = np.zeros(k_max)
    ap_sum = 0.0
    inp_sum = 0.0
    valid = 0
    for qi in range(nq):
        # stable sort keeps gallery-index order on ties
        order = np.argsort(distmat[qi], kind="stable")
        keep = ~((g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi]))
        ranked = order[keep]
        matches = g_ids[ranked] == q_ids[qi]
        npos = int(matches.sum())
        if npos == 0:
            continue
        valid += 1
        hit_ranks = np.flatnonzero(matches) + 1  # 1-based
        first = hit_ranks[0]
        if first <= k_max:
            cmc_sum[first - 1:] += 1.0
        ordinals = np.arange(1, npos + 1)
        ap_sum += float((ordinals / hit_ranks).mean())
        inp_sum += npos / float(hit_ranks[-1])
    if valid == 0:
        raise DataError("no query has a cross-camera positive")
    return RankingMetrics(cmc=cmc_sum / valid, map=ap_sum / valid,
                          minp=inp_sum / valid, num_valid_queries=valid)


def metrics_to_csv(metrics: RankingMetrics, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in metrics.as_rows():
            w.writerow([name, v])


def embedding_dump(feats: np.ndarray, ids, path):
    """CSV of identity plus feature columns, for external projection tools."""
    feats = np.asarray(feats)
    ids = list(ids)
    if len(ids) != feats.shape[0]:
        raise ShapeError("id/feature count mismatch")
    dim = feats.shape[1] if feats.size else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["identity"] + [f"f{j}" for j in range(dim)])
        for ident, row in zip(ids, feats):
            w.writerow([ident] + [f"{v:.6g}" for v in row])
