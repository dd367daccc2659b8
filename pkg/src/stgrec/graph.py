"""Spatiotemporal user-item interaction graph.

Edges are kept in one append-only log sorted by timestamp (ties keep input
order), so "edges strictly before t" is always a prefix of the log. Per-node
adjacency is stored CSR-style and inherits that order.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GeoError, GeoPoint, check_coordinates

log = logging.getLogger(__name__)

COLUMNS = ("user_id", "item_id", "timestamp", "user_lat", "user_lon", "item_lat", "item_lon")


class Side(enum.IntEnum):
    USER = 0
    ITEM = 1

    @property
    def other(self) -> "Side":
        return Side.ITEM if self is Side.USER else Side.USER


class IngestError(ValueError):
    """Malformed or out-of-range input data."""


@dataclass(frozen=True)
class SpatioTemporalEdge:
    user: int
    item: int
    timestamp: float
    user_loc: GeoPoint
    item_loc: GeoPoint


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


class InteractionGraph:
    """Time-sorted edge log with per-node adjacency.

    ``user_ids`` / ``item_ids`` map dense indices back to external ids.
    Dense indices follow order of first appearance in the time-sorted log.
    """

    def __init__(self, users, items, timestamps, user_lat, user_lon, item_lat, item_lon,
                 user_ids, item_ids):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ts = np.asarray(timestamps, dtype=np.float64)
        order = np.argsort(ts, kind="stable")
        self.users = users[order]
        self.items = items[order]
        self.timestamps = ts[order]
        self.user_lat = np.asarray(user_lat, dtype=np.float64)[order]
        self.user_lon = np.asarray(user_lon, dtype=np.float64)[order]
        self.item_lat = np.asarray(item_lat, dtype=np.float64)[order]
        self.item_lon = np.asarray(item_lon, dtype=np.float64)[order]
        self.user_ids = np.asarray(user_ids, dtype=str)
        self.item_ids = np.asarray(item_ids, dtype=str)
        for a in (self.users, self.items, self.timestamps, self.user_lat, self.user_lon,
                  self.item_lat, self.item_lon):
            a.flags.writeable = False
        self._check()
        self._user_index = None
        self._item_index = None
        self._build_adjacency()

    def _check(self):
        n = len(self.users)
        if not all(len(a) == n for a in (self.items, self.timestamps, self.user_lat, self.user_lon,
                                         self.item_lat, self.item_lon)):
            raise ValueError("edge arrays must have equal length")
        if n and (self.users.min() < 0 or self.users.max() >= len(self.user_ids)):
            raise ValueError("user index out of range")
        if n and (self.items.min() < 0 or self.items.max() >= len(self.item_ids)):
            raise ValueError("item index out of range")
        if n and not (np.all(np.isfinite(self.timestamps)) and self.timestamps.min() > 0):
            raise ValueError("timestamps must be finite and positive")

    def _build_adjacency(self):
        e = self.num_edges
        eids = np.arange(e, dtype=np.int64)
        self._adj = []
        self._ptr = []
        self._keys = []
        for nodes, count in ((self.users, self.num_users), (self.items, self.num_items)):
            # stable sort by node keeps time order inside each list
            order = np.argsort(nodes, kind="stable")
            adj = eids[order]
            ptr = np.zeros(count + 1, dtype=np.int64)
            np.cumsum(np.bincount(nodes, minlength=count), out=ptr[1:])
            self._adj.append(adj)
            self._ptr.append(ptr)
            self._keys.append(nodes[order] * max(e, 1) + adj)
        # one fixed venue per item: its location on its first edge
        ptr = self._ptr[Side.ITEM]
        has = np.diff(ptr) > 0
        first = self._adj[Side.ITEM][ptr[:-1][has]]
        self.item_loc_lat = np.zeros(self.num_items)
        self.item_loc_lon = np.zeros(self.num_items)
        self.item_loc_lat[has] = self.item_lat[first]
        self.item_loc_lon[has] = self.item_lon[first]

    # -- sizes ---------------------------------------------------------
    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_edges(self) -> int:
        return len(self.users)

    def __len__(self):
        return self.num_edges

    def __eq__(self, other):
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays()))

    def _arrays(self):
        return (self.users, self.items, self.timestamps, self.user_lat, self.user_lon,
                self.item_lat, self.item_lon, self.user_ids, self.item_ids)

    # -- accessors -----------------------------------------------------
    def edge(self, k: int) -> SpatioTemporalEdge:
        return SpatioTemporalEdge(
            int(self.users[k]), int(self.items[k]), float(self.timestamps[k]),
            GeoPoint(float(self.user_lat[k]), float(self.user_lon[k])),
            GeoPoint(float(self.item_lat[k]), float(self.item_lon[k])),
        )

    def adjacency(self, node: int, side: Side) -> np.ndarray:
        """Edge indices of ``node`` in time order."""
        self._check_node(node, side)
        ptr = self._ptr[side]
        return self._adj[side][ptr[node]:ptr[node + 1]]

    def degree(self, side: Side) -> np.ndarray:
        return np.diff(self._ptr[side])

    def endpoint(self, side: Side) -> np.ndarray:
        return self.users if side is Side.USER else self.items

    def location(self, side: Side):
        """(lat, lon) arrays of the given endpoint's location on every edge."""
        if side is Side.USER:
            return self.user_lat, self.user_lon
        return self.item_lat, self.item_lon

    def user_index(self, external_id: str) -> int:
        if self._user_index is None:
            self._user_index = {u: k for k, u in enumerate(self.user_ids)}
        try:
            return self._user_index[str(external_id)]
        except KeyError:
            raise KeyError(f"unknown user id {external_id!r}") from None

    def item_index(self, external_id: str) -> int:
        if self._item_index is None:
            self._item_index = {u: k for k, u in enumerate(self.item_ids)}
        try:
            return self._item_index[str(external_id)]
        except KeyError:
            raise KeyError(f"unknown item id {external_id!r}") from None

    def _check_node(self, node, side):
        count = self.num_users if side is Side.USER else self.num_items
        if not 0 <= node < count:
            raise IndexError(f"{side.name.lower()} index {node} out of range [0, {count})")

    def edges_before(self, t_cut) -> np.ndarray:
        """Number of edges with timestamp strictly below ``t_cut`` (vectorized)."""
        return np.searchsorted(self.timestamps, t_cut, side="left")

    def windows(self, nodes, side: Side, t_cut, m: int, frontier=None):
        """Up to ``m`` most recent edges of each node strictly before ``t_cut``.

        Returns ``(edge_ids, mask)`` of shape (len(nodes), m). Rows are
        chronological and left-aligned; padding slots hold -1. ``frontier``
        additionally hides edges with log index >= frontier.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        cut = self.edges_before(np.broadcast_to(np.asarray(t_cut, dtype=np.float64), nodes.shape))
        if frontier is not None:
            cut = np.minimum(cut, frontier)
        ptr = self._ptr[side]
        start = ptr[nodes]
        end = np.searchsorted(self._keys[side], nodes * max(self.num_edges, 1) + cut, side="left")
        lo = np.maximum(start, end - m)
        idx = lo[:, None] + np.arange(m)
        mask = idx < end[:, None]
        adj = self._adj[side]
        if len(adj) == 0:
            return np.full((len(nodes), m), -1, dtype=np.int64), mask
        out = np.where(mask, adj[np.minimum(idx, len(adj) - 1)], -1)
        return out, mask


def recent_neighbors(g: InteractionGraph, node: int, side: Side, t_cut: float, m: int):
    """The up-to-``m`` most recent interactions of ``node`` strictly before ``t_cut``.

    Each entry is ``(counterpart, timestamp, counterpart_loc, self_loc)`` in
    chronological order; ties keep log order.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not math.isfinite(t_cut):
        raise ValueError(f"non-finite t_cut {t_cut}")
    g._check_node(node, side)
    eids, mask = g.windows([node], side, t_cut, m)
    other = g.endpoint(side.other)
    olat, olon = g.location(side.other)
    slat, slon = g.location(side)
    out = []
    for e in eids[0][mask[0]]:
        out.append((int(other[e]), float(g.timestamps[e]),
                    GeoPoint(float(olat[e]), float(olon[e])),
                    GeoPoint(float(slat[e]), float(slon[e]))))
    return out


def latest_user_location(g: InteractionGraph, user: int, t_cut: float) -> GeoPoint:
    """Venue of the user's last visit before ``t_cut``.

    A user with no earlier visit falls back to the origin location recorded
    on their first edge at or after ``t_cut``.
    """
    adj = g.adjacency(user, Side.USER)
    if len(adj) == 0:
        raise ValueError(f"user {user} has no interactions")
    before = adj[g.timestamps[adj] < t_cut]
    if len(before):
        e = before[-1]
        return GeoPoint(float(g.item_lat[e]), float(g.item_lon[e]))
    e = adj[0]
    return GeoPoint(float(g.user_lat[e]), float(g.user_lon[e]))


def _densify(raw_ids):
    """Map ids to contiguous indices by order of first appearance."""
    uniq, first, inverse = np.unique(raw_ids, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    order = np.argsort(first, kind="stable")
    rank[order] = np.arange(len(uniq))
    return rank[inverse.ravel()], uniq[order]


def from_records(user_ext, item_ext, timestamps, user_lat, user_lon, item_lat, item_lon) -> InteractionGraph:
    """Build a graph from external ids; dense ids follow first appearance in time order."""
    ts = np.asarray(timestamps, dtype=np.float64)
    order = np.argsort(ts, kind="stable")
    user_ext = np.asarray(user_ext, dtype=str)[order]
    item_ext = np.asarray(item_ext, dtype=str)[order]
    users, user_ids = _densify(user_ext)
    items, item_ids = _densify(item_ext)
    take = lambda a: np.asarray(a, dtype=np.float64)[order]  # noqa: E731
    return InteractionGraph(users, items, ts[order], take(user_lat), take(user_lon),
                            take(item_lat), take(item_lon), user_ids, item_ids)


def ingest_csv(path) -> InteractionGraph:
    """Load an interaction log. Lines starting with '#' are comments."""
    path = Path(path)
    cols = {c: [] for c in COLUMNS}
    with path.open(newline="", encoding="utf-8") as fh:
        lines = ((n, line) for n, line in enumerate(fh, start=1) if not line.lstrip().startswith("#"))
        header = None
        for lineno, line in lines:
            if not line.strip():
                continue
            row = next(csv.reader([line]))
            if header is None:
                header = [h.strip() for h in row]
                missing = [c for c in COLUMNS if c not in header]
                if missing:
                    raise IngestError(f"{path}:{lineno}: header missing columns {missing}")
                pos = [header.index(c) for c in COLUMNS]
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [row[p].strip() for p in pos]
                t = float(vals[2])
                coords = [float(v) for v in vals[3:]]
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(t) and t > 0):
                raise IngestError(f"{path}:{lineno}: timestamp must be finite and positive, got {vals[2]}")
            try:
                check_coordinates(coords[0], coords[1])
                check_coordinates(coords[2], coords[3])
            except GeoError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if not vals[0] or not vals[1]:
                raise IngestError(f"{path}:{lineno}: empty id")
            cols["user_id"].append(vals[0])
            cols["item_id"].append(vals[1])
            cols["timestamp"].append(t)
            for c, v in zip(COLUMNS[3:], coords):
                cols[c].append(v)
    if header is None or not cols["user_id"]:
        raise IngestError(f"{path}: no interactions")
    return from_records(*(cols[c] for c in COLUMNS))


def subgraph(g: InteractionGraph, keep: np.ndarray) -> InteractionGraph:
    """Graph over the edges selected by boolean mask ``keep``, ids re-densified."""
    idx = np.flatnonzero(keep)
    users, old_users = _densify(g.users[idx])
    items, old_items = _densify(g.items[idx])
    return InteractionGraph(users, items, g.timestamps[idx], g.user_lat[idx], g.user_lon[idx],
                            g.item_lat[idx], g.item_lon[idx],
                            g.user_ids[old_users], g.item_ids[old_items])


def k_core_filter(g: InteractionGraph, k: int) -> InteractionGraph:
    """Drop users and items with fewer than ``k`` interactions until none remain."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(g.num_edges, dtype=bool)
    while True:
        du = np.bincount(g.users[keep], minlength=g.num_users)
        di = np.bincount(g.items[keep], minlength=g.num_items)
        new = keep & (du[g.users] >= k) & (di[g.items] >= k)
        if new.sum() == keep.sum():
            break
        keep = new
    log.info("k-core(%d): kept %d of %d edges", k, keep.sum(), g.num_edges)
    return subgraph(g, keep)


def chronological_split(g: InteractionGraph, spec: SplitSpec = SplitSpec()):
    """Contiguous (train, val, test) ranges over the time-sorted edge log."""
    n = g.num_edges
    if n < 3:
        raise ValueError(f"need at least 3 edges to split, got {n}")
    # tolerance guards products like 0.9 * 10 landing just under an integer
    a = math.floor(n * spec.train_frac + 1e-9)
    b = math.floor(n * (spec.train_frac + spec.val_frac) + 1e-9)
    return range(0, a), range(a, b), range(b, n)


def save_graph(g: InteractionGraph, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, users=g.users, items=g.items, timestamps=g.timestamps,
                 user_lat=g.user_lat, user_lon=g.user_lon, item_lat=g.item_lat, item_lon=g.item_lon,
                 user_ids=g.user_ids, item_ids=g.item_ids)


def load_graph(path) -> InteractionGraph:
    with np.load(path, allow_pickle=False) as z:
        return InteractionGraph(z["users"], z["items"], z["timestamps"], z["user_lat"], z["user_lon"],
                                z["item_lat"], z["item_lon"], z["user_ids"], z["item_ids"])
