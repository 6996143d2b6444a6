"""Single-query retrieval evaluation: mAP and CMC."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ProtocolError
from .model import encode, normalize_features

__all__ = ["EvalReport", "evaluate", "evaluate_features", "rank_gallery", "average_precision", "map_oracle"]


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    per_query_ap: np.ndarray
    n_queries: int
    n_gallery: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmc"] = [float(v) for v in self.cmc]
        d["per_query_ap"] = [float(v) for v in self.per_query_ap]
        return d

    def to_json(self, path, **extra):
        with open(path, "w") as fh:
            json.dump({**self.to_dict(), **extra}, fh, indent=2)

    def dump_per_query(self, path, query_ids=None):
        ids = range(self.n_queries) if query_ids is None else query_ids
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query", "ap"])
            for q, ap in zip(ids, self.per_query_ap):
                w.writerow([int(q), repr(float(ap))])


def rank_gallery(q_feat: np.ndarray, g_feat: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by ascending Euclidean distance, ties by index."""
    diff = q_feat[:, None, :] - g_feat[None, :, :]
    return np.argsort((diff * diff).sum(axis=-1), axis=1, kind="stable")


def average_precision(matches: np.ndarray) -> float:
    """AP of one ranked boolean relevance vector."""
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        raise ProtocolError("query has no relevant gallery item")
    return float((np.arange(1, hits.size + 1) / (hits + 1)).mean())


def evaluate_features(q_feat, q_ids, g_feat, g_ids, max_rank: int | None = None) -> EvalReport:
    q_feat, g_feat = np.atleast_2d(q_feat), np.atleast_2d(g_feat)
    q_ids, g_ids = np.asarray(q_ids).ravel(), np.asarray(g_ids).ravel()
    missing = sorted(set(q_ids.tolist()) - set(g_ids.tolist()))
    if missing:
        raise ProtocolError(f"query identities {missing[:5]} have no gallery match")
    order = rank_gallery(q_feat, g_feat)
    matches = g_ids[order] == q_ids[:, None]
    aps = np.array([average_precision(m) for m in matches])
    R = g_feat.shape[0] if max_rank is None else min(max_rank, g_feat.shape[0])
    first_hit = matches.argmax(axis=1)
    cmc = np.array([(first_hit < r).mean() for r in range(1, R + 1)])
    return EvalReport(float(aps.mean()), cmc, aps, q_feat.shape[0], g_feat.shape[0])


def evaluate(encoder: dict, query_C, gallery_C, max_rank: int | None = None) -> EvalReport:
    """Encode, L2-normalize, and rank the gallery for every query."""
    qf = normalize_features(encode(encoder, query_C.X))
    gf = normalize_features(encode(encoder, gallery_C.X))
    return evaluate_features(qf, query_C.identities, gf, gallery_C.identities, max_rank)


def map_oracle(query, gallery, features) -> float:
    """Brute-force mAP used to certify :func:`evaluate_features`.

    ``query`` and ``gallery`` are sequences of ``(index, identity)`` pairs into
    ``features``. Written with plain loops and the textbook
    ``sum_k P@k * rel_k / n_relevant`` form on purpose.
    """
    total = 0.0
    for qi, qid in query:
        scored = sorted(
            ((math.dist(features[qi], features[gi]), pos, gid) for pos, (gi, gid) in enumerate(gallery)),
            key=lambda t: (t[0], t[1]),
        )
        n_rel = sum(1 for _, _, gid in scored if gid == qid)
        if n_rel == 0:
            raise ProtocolError(f"query {qi} has no relevant gallery item")
        hits = 0
        acc = 0.0
        for k, (_, _, gid) in enumerate(scored, start=1):
            if gid == qid:
                hits += 1
                acc += hits / k
        total += acc / n_rel
    return total / len(query)
