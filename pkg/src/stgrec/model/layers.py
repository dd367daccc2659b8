"""Reference forward pass: one node, one query at a time, written literally.

This path favours readability over speed. It recomputes the full temporal
subtree of a node and is what the batched engine is tested against.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..geo import GeoPoint, haversine_km, spatial_weight
from ..graph import InteractionGraph, Side, recent_neighbors
from .config import ModelConfig
from .memory import CausalityError, MemoryBank
from .params import ModelParams

# callables receiving each attention weight vector (numpy) as it is computed
attention_hooks = []


def position_encoding(rank, dim):
    """Sinusoidal encoding of recency rank (array-valued), frequencies 10000^(-2k/dim)."""
    rank = np.asarray(rank, dtype=np.float64)
    k = np.arange(dim)
    freq = 10000.0 ** (-2.0 * (k // 2) / dim)
    ang = rank[..., None] * freq
    return np.where(k % 2 == 0, np.sin(ang), np.cos(ang))


def self_weight(cfg: ModelConfig) -> float:
    """psi(p, p): 1 under the identity mapping, 1/2 under the exponential one."""
    if not cfg.uses_spatial_encoding:
        return 1.0
    return float(spatial_weight(0.0, cfg.spatial))


def build_query(h_self, t, params: ModelParams, cfg: ModelConfig):
    """[h ++ phi(t, t)] * psi(p, p) as a (c + c_t,) tensor."""
    h_self = ad.as_tensor(h_self)
    if h_self.shape != (cfg.c,):
        raise ad.ShapeError(f"query hidden has shape {h_self.shape}, expected ({cfg.c},)")
    if cfg.uses_position_encoding:
        enc = ad.Tensor(position_encoding(0.0, cfg.c_t))
    else:
        enc = ad.time_encoding(np.array(0.0), params["te.omega"], params["te.bias"])
    return ad.scale(ad.concat([h_self, enc]), self_weight(cfg))


def build_key_value(neighbors, query_loc: GeoPoint, t, hidden, params: ModelParams, cfg: ModelConfig):
    """Rows [h_j ++ phi(t, t_j)] * psi(query_loc, p_j), one per neighbor.

    ``neighbors`` is a chronological list of (index, t_j, p_j); ``hidden`` is a
    list of (c,) tensors aligned with it.
    """
    if len(neighbors) != len(hidden):
        raise ad.ShapeError(f"{len(neighbors)} neighbors but {len(hidden)} hidden vectors")
    rows = []
    n = len(neighbors)
    for pos, ((_, t_j, p_j), h_j) in enumerate(zip(neighbors, hidden)):
        if not t_j < t:
            raise CausalityError(f"neighbor at t={t_j} is not strictly before query time {t}")
        if cfg.uses_position_encoding:
            enc = ad.Tensor(position_encoding(float(n - pos), cfg.c_t))
        else:
            enc = ad.time_encoding(np.array((t - t_j) / cfg.time_unit_s), params["te.omega"], params["te.bias"])
        psi = float(spatial_weight(haversine_km(query_loc, p_j), cfg.spatial)) if cfg.uses_spatial_encoding else 1.0
        rows.append(ad.scale(ad.concat([ad.as_tensor(h_j), enc]), psi))
    return ad.reshape(ad.concat(rows), (n, cfg.c + cfg.c_t))


def attend(query, keys, values, layer: int, params: ModelParams, cfg: ModelConfig, h_prev=None):
    """(W_v V) . softmax((W_k K)^T (W_q q) / sqrt(c + c_t)), plus the optional residual MLP."""
    keys, values = ad.as_tensor(keys), ad.as_tensor(values)
    if keys.shape[0] == 0 or keys.shape != values.shape:
        raise ad.ShapeError(f"attend needs matching non-empty K and V, got {keys.shape} and {values.shape}")
    w_q, w_k, w_v = (params[f"layer{layer}.{n}"] for n in ("w_q", "w_k", "w_v"))
    q = ad.reshape(ad.as_tensor(query), (1, cfg.c + cfg.c_t))
    q_proj = ad.linear(q, w_q)                                   # (1, c)
    k_proj = ad.linear(keys, w_k)                                # (M, c): rows of (W_k K)^T
    logits = ad.scale(ad.matmul(q_proj, ad.transpose(k_proj)), 1.0 / math.sqrt(cfg.c + cfg.c_t))
    alpha = ad.softmax(logits)                                   # (1, M)
    for hook in attention_hooks:
        hook(alpha.data[0].copy())
    out = ad.reshape(ad.matmul(alpha, ad.linear(values, w_v)), (cfg.c,))
    if cfg.use_residual:
        out = residual(h_prev, out, layer, params, cfg)
    return out


def residual(h_prev, h_new, layer, params, cfg):
    x = ad.reshape(ad.concat([ad.as_tensor(h_prev), h_new]), (1, 2 * cfg.c))
    hid = ad.relu(ad.linear(x, params[f"layer{layer}.res_w1"], params[f"layer{layer}.res_b1"]))
    return ad.reshape(ad.linear(hid, params[f"layer{layer}.res_w2"], params[f"layer{layer}.res_b2"]), (cfg.c,))


def embed_node(g: InteractionGraph, memory: MemoryBank, node: int, side: Side, t: float,
               query_loc: GeoPoint, params: ModelParams, cfg: ModelConfig, layer=None):
    """Hidden embedding of ``node`` at time ``t`` after ``layer`` (default L) layers.

    Neighbors' lower-layer hiddens are evaluated at their own interaction
    times, anchored at that interaction's query location (the user's origin
    on the edge). A node with no earlier neighbor keeps its previous-layer
    hidden.
    """
    layer = cfg.layers if layer is None else layer
    row = memory.user_rows(node) if side is Side.USER else memory.item_rows(node)
    h = ad.Tensor(memory.states[row])
    if layer == 0:
        return h
    nbrs = recent_neighbors(g, node, side, t, cfg.neighbors)
    for l in range(1, layer + 1):
        if not nbrs:
            continue
        hidden = [embed_node(g, memory, j, side.other, t_j, p_j if side is Side.ITEM else p_self,
                             params, cfg, layer=l - 1)
                  for j, t_j, p_j, p_self in nbrs]
        q = build_query(h, t, params, cfg)
        kv = build_key_value([(j, t_j, p_j) for j, t_j, p_j, _ in nbrs], query_loc, t, hidden, params, cfg)
        h = attend(q, kv, kv, l, params, cfg, h_prev=h)
    return h


def score(h_u, h_i, params: ModelParams):
    """Affinity MLP over [h_u ++ h_i]: Linear(2c, c) -> ReLU -> Linear(c, 1)."""
    h_u, h_i = ad.as_tensor(h_u), ad.as_tensor(h_i)
    if h_u.shape != h_i.shape or h_u.data.ndim != 1:
        raise ad.ShapeError(f"score needs two equal-length vectors, got {h_u.shape} and {h_i.shape}")
    x = ad.reshape(ad.concat([h_u, h_i]), (1, 2 * h_u.shape[0]))
    hid = ad.relu(ad.linear(x, params["head.w1"], params["head.b1"]))
    return ad.reshape(ad.linear(hid, params["head.w2"], params["head.b2"]), ())
