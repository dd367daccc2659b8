"""Full-ranking Hit@K / NDCG@K evaluation."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geo import haversine_km_array
from .graph import InteractionGraph
from .model import ModelConfig, ModelParams, TemporalState, advance, replay, score_items
from .model.memory import CausalityError

log = logging.getLogger(__name__)

DEFAULT_KS = (10, 20)


def _check(target, k, num_items):
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not isinstance(target, (int, np.integer)) or target < 0 or (num_items is not None and target >= num_items):
        raise ValueError(f"target {target!r} is not a valid item")


def target_rank(ranked, target):
    """1-based position of ``target`` in ``ranked``, or None if absent."""
    hits = np.flatnonzero(np.asarray(ranked) == target)
    return int(hits[0]) + 1 if len(hits) else None


def hit_at_k(ranked, target, k, num_items=None) -> int:
    _check(target, k, num_items)
    r = target_rank(ranked, target)
    return int(r is not None and r <= k)


def ndcg_at_k(ranked, target, k, num_items=None) -> float:
    _check(target, k, num_items)
    r = target_rank(ranked, target)
    return 1.0 / math.log2(r + 1) if r is not None and r <= k else 0.0


def candidates_within(g: InteractionGraph, lat, lon, radius_km):
    d = haversine_km_array(lat, lon, g.item_loc_lat, g.item_loc_lon)
    return np.flatnonzero(d <= radius_km)


def order_by_score(items, scores):
    """Items by descending score, ties by ascending item index."""
    items = np.asarray(items)
    return items[np.lexsort((items, -np.asarray(scores)))]


def _scores(g, state, params, cfg, user, t, lat, lon, items, threads):
    if threads <= 1 or len(items) < 2 * threads:
        return score_items(g, state, params, cfg, user, t, lat, lon, items)
    chunks = np.array_split(items, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda ch: score_items(g, state, params, cfg, user, t, lat, lon, ch), chunks))
    return np.concatenate(parts)


def rank_items(g: InteractionGraph, state: TemporalState, params: ModelParams, cfg: ModelConfig,
               user: int, t: float, lat: float, lon: float, radius_km=None, threads=1, return_scores=False):
    """Rank candidate items for the query (user, t, location).

    ``radius_km`` (default: the variant's recall radius, if any) restricts
    candidates to items within that distance of the query location.
    """
    radius_km = cfg.recall_radius_km if radius_km is None else radius_km
    items = np.arange(g.num_items) if radius_km is None else candidates_within(g, lat, lon, radius_km)
    if len(items) == 0:
        log.info("no candidates within %.3f km of (%.5f, %.5f)", radius_km, lat, lon)
        scores = np.zeros(0)
    else:
        scores = _scores(g, state, params, cfg, user, t, lat, lon, items, threads)
    order = np.lexsort((items, -scores))
    if return_scores:
        return items[order], scores[order]
    return items[order]


@dataclass
class RankingReport:
    metrics: dict = field(default_factory=dict)   # K -> {"hit": float, "ndcg": float}
    n_evaluated: int = 0
    n_empty: int = 0

    def hit(self, k):
        return self.metrics[k]["hit"]

    def ndcg(self, k):
        return self.metrics[k]["ndcg"]

    def to_dict(self):
        return {
            "metrics": {str(k): {"hit": v["hit"], "ndcg": v["ndcg"]} for k, v in sorted(self.metrics.items())},
            "n_evaluated": self.n_evaluated,
            "n_empty_candidates": self.n_empty,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self):
        rows = []
        for k, v in sorted(self.metrics.items()):
            rows.append((k, "hit", v["hit"]))
            rows.append((k, "ndcg", v["ndcg"]))
        return rows


def evaluate_split(g: InteractionGraph, state: TemporalState, params: ModelParams, cfg: ModelConfig,
                   split: range, ks=DEFAULT_KS, radius_km=None, threads=1, per_query=None):
    """Rank every interaction of ``split`` against all candidates, in time order.

    Each edge is scored with the state as of the edges before it and then
    committed, so later queries see earlier test history. ``per_query``, if
    given, receives (edge index, candidate items, scores).
    """
    if len(split) == 0:
        raise ValueError("empty split")
    if state.processed != split.start:
        raise CausalityError(f"state is at edge {state.processed}, split starts at {split.start}")
    ks = tuple(sorted(set(int(k) for k in ks)))
    hits = {k: 0.0 for k in ks}
    ndcgs = {k: 0.0 for k in ks}
    empty = 0
    radius_km = cfg.recall_radius_km if radius_km is None else radius_km
    for e in split:
        user, target = int(g.users[e]), int(g.items[e])
        t, lat, lon = float(g.timestamps[e]), float(g.user_lat[e]), float(g.user_lon[e])
        items = np.arange(g.num_items) if radius_km is None else candidates_within(g, lat, lon, radius_km)
        if len(items):
            scores = _scores(g, state, params, cfg, user, t, lat, lon, items, threads)
        else:
            empty += 1
            scores = np.zeros(0)
        if per_query is not None:
            per_query(e, items, scores)
        pos = np.flatnonzero(items == target)
        if len(pos):
            s = scores[pos[0]]
            # position under the descending-score, ascending-index order
            rank = 1 + int(np.sum(scores > s)) + int(np.sum((scores == s) & (items < target)))
            for k in ks:
                if rank <= k:
                    hits[k] += 1.0
                    ndcgs[k] += 1.0 / math.log2(rank + 1)
        advance(g, state, params, cfg, e + 1)
    n = len(split)
    report = RankingReport({k: {"hit": hits[k] / n, "ndcg": ndcgs[k] / n} for k in ks}, n, empty)
    if empty:
        log.info("%d of %d queries had no candidates", empty, n)
    return report


def evaluate(g, params, cfg, split: range, ks=DEFAULT_KS, radius_km=None, threads=1, replay_batch=200):
    """Replay the graph up to ``split.start`` with ``params`` and evaluate the split."""
    state = TemporalState(g, cfg)
    replay(g, state, params, cfg, split.start, replay_batch)
    return evaluate_split(g, state, params, cfg, split, ks, radius_km, threads)
