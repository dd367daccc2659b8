"""Per-node memory bank and its GRU update.

Nodes share one table: user ``u`` lives at row ``u``, item ``i`` at row
``num_users + i``. A last-update time of 0 means "never updated" (all real
timestamps are positive).
"""

from __future__ import annotations

import numpy as np

from ..geo import haversine_km_array, spatial_weight, temporal_encode_array
from ..graph import InteractionGraph, SpatioTemporalEdge
from .config import ModelConfig
from .params import ModelParams


class CausalityError(RuntimeError):
    """An update or query would read or write out of timestamp order."""


class MemoryBank:
    def __init__(self, num_users: int, num_items: int, c: int):
        self.num_users = num_users
        self.num_items = num_items
        self.states = np.zeros((num_users + num_items, c))
        self.last_update = np.zeros(num_users + num_items)

    @classmethod
    def for_graph(cls, g: InteractionGraph, cfg: ModelConfig) -> "MemoryBank":
        return cls(g.num_users, g.num_items, cfg.c)

    def reset(self):
        self.states[:] = 0.0
        self.last_update[:] = 0.0

    def copy(self) -> "MemoryBank":
        m = MemoryBank(self.num_users, self.num_items, self.states.shape[1])
        m.states = self.states.copy()
        m.last_update = self.last_update.copy()
        return m

    def user_rows(self, users):
        return np.asarray(users, dtype=np.int64)

    def item_rows(self, items):
        return self.num_users + np.asarray(items, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return np.array_equal(self.states, other.states) and np.array_equal(self.last_update, other.last_update)


def gru_cell(state, message, params: ModelParams):
    """Batched GRU cell (gate order r, z, n) on plain arrays."""
    c = state.shape[1]
    gi = message @ params["mem.w_i"].data.T + params["mem.b_i"].data
    gh = state @ params["mem.w_h"].data.T + params["mem.b_h"].data
    r = _sigmoid(gi[:, :c] + gh[:, :c])
    z = _sigmoid(gi[:, c:2 * c] + gh[:, c:2 * c])
    n = np.tanh(gi[:, 2 * c:] + r * gh[:, 2 * c:])
    return (1.0 - z) * n + z * state


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _messages(memory, own_rows, other_rows, t, psi, params, time_unit):
    lu = memory.last_update[own_rows]
    dt = np.where(lu > 0, t - lu, 0.0) / time_unit
    phi = temporal_encode_array(dt, params["te.omega"].data, params["te.bias"].data)
    return np.concatenate([memory.states[other_rows], phi, psi[:, None]], axis=1)


def _update_disjoint(memory, users, items, t, psi, params, time_unit):
    """Update endpoints of edges that share no node; all messages read old states."""
    urows = memory.user_rows(users)
    irows = memory.item_rows(items)
    for rows in (urows, irows):
        if np.any(t < memory.last_update[rows]):
            bad = np.flatnonzero(t < memory.last_update[rows])[0]
            raise CausalityError(
                f"memory update at t={t[bad]} precedes last update {memory.last_update[rows][bad]}")
    mu = _messages(memory, urows, irows, t, psi, params, time_unit)
    mi = _messages(memory, irows, urows, t, psi, params, time_unit)
    new_u = gru_cell(memory.states[urows], mu, params)
    new_i = gru_cell(memory.states[irows], mi, params)
    memory.states[urows] = new_u
    memory.states[irows] = new_i
    memory.last_update[urows] = t
    memory.last_update[irows] = t


def edge_psi(user_lat, user_lon, item_lat, item_lon, cfg: ModelConfig):
    if not cfg.uses_spatial_encoding:
        return np.ones(np.shape(user_lat))
    return spatial_weight(haversine_km_array(user_lat, user_lon, item_lat, item_lon), cfg.spatial)


def memory_update(memory: MemoryBank, edge: SpatioTemporalEdge, params: ModelParams, cfg: ModelConfig):
    """Apply one interaction to both endpoint states in place and return the bank.

    The message for each endpoint is [counterpart's old state, time encoding
    of the gap since this endpoint's last update, spatial weight of the edge].
    """
    psi = edge_psi(np.array([edge.user_loc.lat]), np.array([edge.user_loc.lon]),
                   np.array([edge.item_loc.lat]), np.array([edge.item_loc.lon]), cfg)
    _update_disjoint(memory, np.array([edge.user]), np.array([edge.item]),
                     np.array([edge.timestamp]), psi, params, cfg.time_unit_s)
    return memory


def apply_edges(memory: MemoryBank, g: InteractionGraph, eids, params: ModelParams, cfg: ModelConfig):
    """Apply edges ``eids`` (in log order) exactly as sequential single updates.

    Edges are grouped into rounds so that each round touches every node at
    most once and only depends on earlier rounds; each round is vectorized.
    """
    eids = np.asarray(eids, dtype=np.int64)
    if len(eids) == 0:
        return memory
    users = g.users[eids]
    items = g.items[eids]
    rounds = np.empty(len(eids), dtype=np.int64)
    last_u = {}
    last_i = {}
    for k in range(len(eids)):
        r = max(last_u.get(users[k], -1), last_i.get(items[k], -1)) + 1
        rounds[k] = r
        last_u[users[k]] = r
        last_i[items[k]] = r
    psi = edge_psi(g.user_lat[eids], g.user_lon[eids], g.item_lat[eids], g.item_lon[eids], cfg)
    t = g.timestamps[eids]
    for r in range(rounds.max() + 1):
        sel = rounds == r
        _update_disjoint(memory, users[sel], items[sel], t[sel], psi[sel], params, cfg.time_unit_s)
    return memory
