"""Batched forward pass over many (node, time, location) queries.

Two ways to obtain a neighbor's lower-layer hidden:

* exact: recompute it recursively from the current memory bank, exactly as
  :func:`layers.embed_node` does. Cost grows like M**L per query.
* cached: read it from :class:`TemporalState`, which stores, for every
  processed edge and both endpoints, the hiddens of layers 0..L-1 computed
  when that edge was processed. Every (edge, layer) is computed once, so an
  epoch costs O(|E| * L * M * (c + c_t) * c).

Attention is evaluated as W_v (V^T alpha) with logits K (W_k^T W_q q), which
is the same quantity as the literal form by associativity but never projects
all M rows.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..geo import haversine_km_array, spatial_weight
from ..graph import InteractionGraph, Side
from .config import ModelConfig
from .layers import attention_hooks, position_encoding, self_weight
from .memory import CausalityError, MemoryBank, apply_edges
from .params import ModelParams


class TemporalState:
    """Memory bank, per-edge hidden cache and the processed-edge frontier.

    Edges with log index < ``processed`` have updated the memory and own
    cache rows; nothing at or beyond the frontier is ever read.
    """

    def __init__(self, g: InteractionGraph, cfg: ModelConfig):
        self.memory = MemoryBank.for_graph(g, cfg)
        self.cache = np.zeros((cfg.layers, g.num_edges, 2, cfg.c))
        self.processed = 0

    def reset(self):
        self.memory.reset()
        self.cache[:] = 0.0
        self.processed = 0


def _memory_rows(memory: MemoryBank, nodes, side: Side):
    return memory.user_rows(nodes) if side is Side.USER else memory.item_rows(nodes)


def layer_forward(l, h_prev, child_h, dt, rank, psi, mask, params: ModelParams, cfg: ModelConfig):
    """One attention layer for B queries with M neighbor slots each."""
    b = h_prev.shape[0]
    c, ct = cfg.c, cfg.c_t
    if cfg.uses_position_encoding:
        enc0 = ad.Tensor(np.tile(position_encoding(0.0, ct), (b, 1)))
        enc = ad.Tensor(position_encoding(rank, ct))
    else:
        enc0 = ad.time_encoding(np.zeros(b), params["te.omega"], params["te.bias"])
        enc = ad.time_encoding(dt / cfg.time_unit_s, params["te.omega"], params["te.bias"])
    q = ad.scale(ad.concat([h_prev, enc0]), self_weight(cfg))
    rows = ad.mul_rows(ad.concat([child_h, enc]), psi)
    q_proj = ad.linear(q, params[f"layer{l}.w_q"])
    a = ad.matmul(q_proj, params[f"layer{l}.w_k"])
    logits = ad.scale(ad.bdot(rows, a), 1.0 / math.sqrt(c + ct))
    alpha = ad.softmax(logits, mask)
    for hook in attention_hooks:
        for r in np.flatnonzero(mask.any(axis=1)):
            hook(alpha.data[r][mask[r]].copy())
    h = ad.linear(ad.wsum(alpha, rows), params[f"layer{l}.w_v"])
    if cfg.use_residual:
        x = ad.concat([h_prev, h])
        hid = ad.relu(ad.linear(x, params[f"layer{l}.res_w1"], params[f"layer{l}.res_b1"]))
        h = ad.linear(hid, params[f"layer{l}.res_w2"], params[f"layer{l}.res_b2"])
    return ad.where_rows(mask.any(axis=1), h, h_prev)


def hiddens(g: InteractionGraph, state: TemporalState, params: ModelParams, cfg: ModelConfig,
            nodes, side: Side, t, lat, lon, depth=None, exact=False, frontier=None):
    """Hiddens [h0, ..., h_depth] (each a (B, c) tensor) of ``nodes`` at times ``t``.

    ``lat``/``lon`` anchor the spatial weights. Neighbor windows hold edges
    strictly before ``t`` (and below ``frontier`` when given); in cached mode
    the frontier defaults to ``state.processed``.
    """
    depth = cfg.layers if depth is None else depth
    nodes = np.asarray(nodes, dtype=np.int64)
    b = len(nodes)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    lat = np.broadcast_to(np.asarray(lat, dtype=np.float64), (b,))
    lon = np.broadcast_to(np.asarray(lon, dtype=np.float64), (b,))
    h = [ad.Tensor(state.memory.states[_memory_rows(state.memory, nodes, side)])]
    if depth == 0 or b == 0:
        return h
    if not exact:
        frontier = state.processed if frontier is None else min(frontier, state.processed)
    m = cfg.neighbors
    eids, mask = g.windows(nodes, side, t, m, frontier)
    e = np.where(mask, eids, 0)
    other = side.other
    olat, olon = g.location(other)
    dt = np.where(mask, t[:, None] - g.timestamps[e], 0.0)
    rank = mask.sum(axis=1)[:, None] - np.arange(m)
    if cfg.uses_spatial_encoding:
        psi = spatial_weight(haversine_km_array(lat[:, None], lon[:, None], olat[e], olon[e]), cfg.spatial)
    else:
        psi = np.ones((b, m))
    psi = np.where(mask, psi, 0.0)
    if exact:
        flat = e.reshape(-1)
        child = hiddens(g, state, params, cfg, g.endpoint(other)[flat], other, g.timestamps[flat],
                        g.user_lat[flat], g.user_lon[flat], depth=depth - 1, exact=True, frontier=frontier)
        child_h = [ad.reshape(x, (b, m, cfg.c)) for x in child]
    else:
        if np.any(eids[mask] >= state.processed):
            raise CausalityError("neighbor window reaches past the processed frontier")
        child_h = [ad.Tensor(np.where(mask[..., None], state.cache[l][e, other], 0.0))
                   for l in range(depth)]
    psi_t = ad.Tensor(psi)
    for l in range(1, depth + 1):
        h.append(layer_forward(l, h[-1], child_h[l - 1], dt, rank, psi_t, mask, params, cfg))
    return h


def score_pairs(h_u, h_i, params: ModelParams):
    """Head MLP on row-aligned (B, c) batches -> (B,) scores."""
    x = ad.concat([h_u, h_i])
    hid = ad.relu(ad.linear(x, params["head.w1"], params["head.b1"]))
    out = ad.linear(hid, params["head.w2"], params["head.b2"])
    return ad.reshape(out, (out.shape[0],))


def edge_hiddens(g, state, params, cfg, lo, hi, depth=None):
    """Hiddens of both endpoints of edges [lo, hi) at the edge time, anchored at the user's origin."""
    eids = np.arange(lo, hi)
    t = g.timestamps[eids]
    hu = hiddens(g, state, params, cfg, g.users[eids], Side.USER, t, g.user_lat[eids], g.user_lon[eids],
                 depth=depth, frontier=lo)
    hi_ = hiddens(g, state, params, cfg, g.items[eids], Side.ITEM, t, g.user_lat[eids], g.user_lon[eids],
                  depth=depth, frontier=lo)
    return hu, hi_


def advance(g: InteractionGraph, state: TemporalState, params: ModelParams, cfg: ModelConfig,
            hi: int, user_h=None, item_h=None):
    """Process edges [state.processed, hi): fill their cache rows, then update memory.

    ``user_h`` / ``item_h`` may pass hiddens already computed for exactly
    these edges (layers 0..L-1) to avoid recomputation.
    """
    lo = state.processed
    if hi < lo:
        raise CausalityError(f"cannot rewind state from {lo} to {hi}")
    if hi == lo:
        return state
    if user_h is None or item_h is None:
        with ad.no_grad():
            user_h, item_h = edge_hiddens(g, state, params, cfg, lo, hi, depth=cfg.layers - 1)
    for l in range(cfg.layers):
        state.cache[l, lo:hi, Side.USER] = user_h[l].data
        state.cache[l, lo:hi, Side.ITEM] = item_h[l].data
    apply_edges(state.memory, g, np.arange(lo, hi), params, cfg)
    state.processed = hi
    return state


def replay(g, state, params, cfg, hi: int, batch_size: int = 200):
    """Reset and advance through edges [0, hi) in chronological batches."""
    state.reset()
    for lo in range(0, hi, batch_size):
        advance(g, state, params, cfg, min(lo + batch_size, hi))
    return state


def score_items(g, state, params, cfg, user: int, t: float, lat: float, lon: float, items=None):
    """Scores of ``items`` (default: all) for one (user, t, location) query, cached mode."""
    items = np.arange(g.num_items) if items is None else np.asarray(items, dtype=np.int64)
    with ad.no_grad():
        hu = hiddens(g, state, params, cfg, [user], Side.USER, t, lat, lon)[-1]
        hv = hiddens(g, state, params, cfg, items, Side.ITEM, t, lat, lon)[-1]
        hu_rep = ad.Tensor(np.repeat(hu.data, len(items), axis=0))
        return score_pairs(hu_rep, hv, params).data
