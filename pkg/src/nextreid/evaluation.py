"""Retrieval metrics: Euclidean ranking, AP / mAP and CMC Rank-K under three filters.

Filters:
  * ``standard_camera`` drops gallery items with the query's identity and camera;
  * ``msvr310_strict`` drops gallery items with the query's identity and time label;
  * ``none`` drops only the query itself when it also sits in the gallery.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROTOCOLS = ("standard_camera", "msvr310_strict", "none")
RANKS = (1, 5, 10)


@dataclass
class RetrievalSet:
    query: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    query_times: np.ndarray | None = None
    gallery_times: np.ndarray | None = None
    query_keys: Sequence[str] | None = None
    gallery_keys: Sequence[str] | None = None

    def __post_init__(self):
        self.query = np.atleast_2d(np.asarray(self.query, dtype=np.float64))
        self.gallery = np.atleast_2d(np.asarray(self.gallery, dtype=np.float64))
        if len(self.gallery) == 0:
            raise ValueError("gallery is empty")
        if self.query.shape[1] != self.gallery.shape[1]:
            raise ValueError("query and gallery embeddings differ in dimension")
        for name in ("query_ids", "query_cams", "gallery_ids", "gallery_cams", "query_times", "gallery_times"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v))

    @classmethod
    def from_samples(cls, q_emb, q_samples, g_emb, g_samples) -> "RetrievalSet":
        def times(ss):
            t = [s.time_label for s in ss]
            return None if any(x is None for x in t) else np.array(t)

        return cls(
            q_emb, np.array([s.identity for s in q_samples]), np.array([s.camera for s in q_samples]),
            g_emb, np.array([s.identity for s in g_samples]), np.array([s.camera for s in g_samples]),
            times(q_samples), times(g_samples),
            [s.sample_id for s in q_samples], [s.sample_id for s in g_samples],
        )


def distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q, g = np.asarray(q, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch {q.shape[1]} vs {g.shape[1]}")
    return np.sqrt(((q[:, None, :] - g[None, :, :]) ** 2).sum(-1))


def valid_mask(rs: RetrievalSet, qi: int, protocol: str) -> np.ndarray:
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    same_id = rs.gallery_ids == rs.query_ids[qi]
    if protocol == "standard_camera":
        return ~(same_id & (rs.gallery_cams == rs.query_cams[qi]))
    if protocol == "msvr310_strict":
        if rs.query_times is None or rs.gallery_times is None:
            raise ValueError("msvr310_strict protocol needs time labels")
        return ~(same_id & (rs.gallery_times == rs.query_times[qi]))
    keep = np.ones(len(rs.gallery_ids), dtype=bool)
    if rs.query_keys is not None and rs.gallery_keys is not None:
        keep &= np.array([k != rs.query_keys[qi] for k in rs.gallery_keys])
    return keep


def average_precision(ranked_relevance: Sequence[bool]) -> float:
    rel = np.asarray(ranked_relevance, dtype=bool)
    if not rel.any():
        raise ValueError("no relevant item")
    hits = np.cumsum(rel)
    positions = np.flatnonzero(rel) + 1
    # fsum: correctly rounded, independent of summation order
    return math.fsum((hits[rel] / positions).tolist()) / len(positions)


def evaluate(rs: RetrievalSet, protocol: str = "standard_camera", l2_normalize: bool = False) -> dict:
    q, g = rs.query, rs.gallery
    if l2_normalize:
        q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    dist = distance_matrix(q, g)
    aps, first_hits, skipped = [], [], []
    per_query: list[float | None] = []
    for qi in range(len(q)):
        keep = np.flatnonzero(valid_mask(rs, qi, protocol))
        # stable sort: ties resolved by gallery index
        order = keep[np.argsort(dist[qi, keep], kind="stable")]
        rel = rs.gallery_ids[order] == rs.query_ids[qi]
        if not rel.any():
            skipped.append(qi)
            per_query.append(None)
            continue
        ap = average_precision(rel)
        aps.append(ap)
        per_query.append(ap)
        first_hits.append(int(np.argmax(rel)) + 1)
    if not aps:
        raise ValueError("every query was skipped: no valid relevant gallery items")
    first = np.array(first_hits)
    result = {"mAP": math.fsum(aps) / len(aps)}
    for k in RANKS:
        result[f"R{k}"] = int(np.sum(first <= k)) / len(first)
    result.update(
        {
            "num_queries": len(aps),
            "num_skipped": len(skipped),
            "protocol": protocol,
            "per_query_ap": per_query,
        }
    )
    return result


def write_report(metrics: dict, path: str | Path) -> None:
    keys = ("mAP", "R1", "R5", "R10", "num_queries", "num_skipped", "protocol")
    Path(path).write_text(json.dumps({k: metrics[k] for k in keys}, indent=2) + "\n")
