import math

import numpy as np
import pytest

from stgrec import autodiff as ad
from stgrec.geo import EARTH_RADIUS_KM, GeoPoint, Mapping, haversine_km, spatial_weight
from stgrec.graph import Side, from_records
from stgrec.model import (CausalityError, MemoryBank, ModelConfig, ModelParams, TemporalState, Variant,
                          advance, apply_edges, attend, build_key_value, build_query, embed_node, gru_cell,
                          hiddens, memory_update, position_encoding, score)
from stgrec.model import layers

from conftest import random_graph

HOME = GeoPoint(30.0, 120.0)


def km_north(p, km):
    return GeoPoint(p.lat + math.degrees(km / EARTH_RADIUS_KM), p.lon)


def small(variant=Variant.FULL, **kw):
    base = dict(c=3, c_t=2, layers=2, neighbors=3, variant=variant)
    base.update(kw)
    return ModelConfig(**base)


# -- parameters ------------------------------------------------------------

def test_param_shapes():
    cfg = ModelConfig(c=4, c_t=3, layers=2, use_residual=True)
    p = ModelParams.init(cfg, 0)
    assert p["layer1.w_q"].shape == (4, 7) and p["layer2.w_v"].shape == (4, 7)
    assert p["head.w1"].shape == (4, 8) and p["head.w2"].shape == (1, 4)
    assert p["layer1.res_w1"].shape == (4, 8)
    assert p["mem.w_i"].shape == (12, 4 + 3 + 1) and p["mem.w_h"].shape == (12, 4)
    assert p["te.omega"].shape == (3,) and p["te.bias"].shape == (3,)
    assert all(np.all(np.isfinite(t.data)) for t in p)
    assert "layer1.res_w1" not in ModelParams.init(ModelConfig(c=4, c_t=3), 0).names()


def test_param_init_deterministic():
    a, b = ModelParams.init(small(), 7), ModelParams.init(small(), 7)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.names())


# -- query ---------------------------------------------------------------

def test_query_identity():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    h = np.array([0.1, -0.2, 0.3])
    q = build_query(h, 123.0, p, cfg).data
    np.testing.assert_array_equal(q, np.concatenate([h, np.cos(p["te.bias"].data)]))


def test_query_exponential_halves():
    cfg = small(mapping=Mapping.EXPONENTIAL)
    p = ModelParams.init(cfg, 0)
    h = np.array([0.1, -0.2, 0.3])
    q = build_query(h, 5.0, p, cfg).data
    np.testing.assert_allclose(q, 0.5 * np.concatenate([h, np.cos(p["te.bias"].data)]), rtol=0, atol=1e-15)


def test_query_zero_hidden_zero_bias():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    p["te.bias"].data[:] = 0.0
    assert build_query(np.zeros(3), 1.0, p, cfg).data.tolist() == [0, 0, 0, 1, 1]


def test_query_shape_error():
    cfg = small()
    with pytest.raises(ad.ShapeError):
        build_query(np.zeros(4), 1.0, ModelParams.init(cfg, 0), cfg)


# -- key / value ---------------------------------------------------------

def phi(p, dt, cfg):
    return np.cos(p["te.omega"].data * dt / cfg.time_unit_s + p["te.bias"].data)


def test_kv_colocated_row():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    h = np.array([1.0, 2.0, 3.0])
    rows = build_key_value([(0, 4000.0, HOME)], HOME, 10000.0, [h], p, cfg).data
    np.testing.assert_array_equal(rows[0], np.concatenate([h, phi(p, 6000.0, cfg)]))


def test_kv_one_km_halves():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    h = np.array([1.0, 2.0, 3.0])
    far = km_north(HOME, 1.0)
    assert haversine_km(HOME, far) == pytest.approx(1.0, abs=1e-9)
    rows = build_key_value([(0, 1.0, far)], HOME, 2.0, [h], p, cfg).data
    np.testing.assert_allclose(rows[0], 0.5 * np.concatenate([h, phi(p, 1.0, cfg)]), rtol=1e-9)


def test_kv_nose_ignores_distance(rng):
    cfg = small(Variant.NO_SE)
    p = ModelParams.init(cfg, 0)
    hs = [rng.normal(size=3) for _ in range(3)]
    far = [(k, float(k + 1), km_north(HOME, 10.0 * (k + 1))) for k in range(3)]
    near = [(k, float(k + 1), HOME) for k in range(3)]
    np.testing.assert_array_equal(build_key_value(far, HOME, 9.0, hs, p, cfg).data,
                                  build_key_value(near, HOME, 9.0, hs, p, cfg).data)


def test_kv_zero_distance_scaling_recovers_plain_concat(rng):
    cfg = small()
    p = ModelParams.init(cfg, 0)
    hs = [rng.normal(size=3) for _ in range(3)]
    nb = [(k, float(k + 1), HOME) for k in range(3)]
    rows = build_key_value(nb, HOME, 9.0, hs, p, cfg).data
    want = np.stack([np.concatenate([h, phi(p, 9.0 - (k + 1), cfg)]) for k, h in enumerate(hs)])
    np.testing.assert_array_equal(rows, want)


def test_kv_position_encoding_ranks():
    cfg = small(Variant.PE, c_t=4)
    p = ModelParams.init(cfg, 0)
    nb = [(k, float(k + 1), HOME) for k in range(3)]
    rows = build_key_value(nb, HOME, 9.0, [np.zeros(3)] * 3, p, cfg).data
    # chronological rows: oldest has rank 3, most recent rank 1
    for pos, rank in enumerate((3, 2, 1)):
        want = [math.sin(rank), math.cos(rank), math.sin(rank / 100.0), math.cos(rank / 100.0)]
        np.testing.assert_allclose(rows[pos, 3:], want, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(position_encoding(0.0, 4), [0.0, 1.0, 0.0, 1.0])


def test_kv_rejects_non_causal_neighbor():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    with pytest.raises(CausalityError):
        build_key_value([(0, 5.0, HOME)], HOME, 5.0, [np.zeros(3)], p, cfg)


# -- attention -----------------------------------------------------------

def naive_attend(q, rows, l, p, cfg):
    wq, wk, wv = (p[f"layer{l}.{n}"].data for n in ("w_q", "w_k", "w_v"))
    logits = np.array([(wk @ r) @ (wq @ q) for r in rows]) / math.sqrt(cfg.c + cfg.c_t)
    e = np.exp(logits - logits.max())
    a = e / e.sum()
    return sum(a[j] * (wv @ rows[j]) for j in range(len(rows))), a


def test_attend_single_row(rng):
    cfg = small()
    p = ModelParams.init(cfg, 0)
    v = rng.normal(size=(1, 5))
    seen = []
    layers.attention_hooks.append(seen.append)
    try:
        out = attend(rng.normal(size=5), v, v, 1, p, cfg).data
    finally:
        layers.attention_hooks.clear()
    assert seen[0].tolist() == [1.0]
    np.testing.assert_allclose(out, p["layer1.w_v"].data @ v[0], rtol=1e-14)


def test_attend_identical_rows(rng):
    cfg = small()
    p = ModelParams.init(cfg, 0)
    r = rng.normal(size=5)
    seen = []
    layers.attention_hooks.append(seen.append)
    try:
        attend(rng.normal(size=5), np.stack([r, r]), np.stack([r, r]), 1, p, cfg)
    finally:
        layers.attention_hooks.clear()
    assert seen[0].tolist() == [0.5, 0.5]


def test_attend_matches_naive_oracle(rng):
    cfg = small()
    p = ModelParams.init(cfg, 3)
    for _ in range(10):
        q, rows = rng.normal(size=5), rng.normal(size=(5, 5))
        want, _ = naive_attend(q, rows, 2, p, cfg)
        np.testing.assert_allclose(attend(q, rows, rows, 2, p, cfg).data, want, rtol=0, atol=1e-12)


def test_attend_empty_rejected():
    cfg = small()
    with pytest.raises(ad.ShapeError):
        attend(np.zeros(5), np.zeros((0, 5)), np.zeros((0, 5)), 1, ModelParams.init(cfg, 0), cfg)


def test_attend_residual_uses_previous_hidden(rng):
    cfg = small(use_residual=True)
    p = ModelParams.init(cfg, 0)
    q, rows, hp = rng.normal(size=5), rng.normal(size=(2, 5)), rng.normal(size=3)
    h, _ = naive_attend(q, rows, 1, p, cfg)
    x = np.concatenate([hp, h])
    want = p["layer1.res_w2"].data @ np.maximum(p["layer1.res_w1"].data @ x + p["layer1.res_b1"].data, 0) \
        + p["layer1.res_b2"].data
    np.testing.assert_allclose(attend(q, rows, rows, 1, p, cfg, h_prev=hp).data, want, atol=1e-12)


# -- embed_node ---------------------------------------------------------

def oracle_embed(g, mem, node, side, t, loc, p, cfg, layer):
    """Brute-force recursion over the full temporal subtree (linear scans only)."""
    row = node if side is Side.USER else g.num_users + node
    h = mem.states[row].copy()
    ends = g.users if side is Side.USER else g.items
    other = Side.ITEM if side is Side.USER else Side.USER
    nb = [e for e in range(g.num_edges) if ends[e] == node and g.timestamps[e] < t][-cfg.neighbors:]
    for l in range(1, layer + 1):
        if not nb:
            continue
        rows = []
        for pos, e in enumerate(nb):
            j = g.items[e] if side is Side.USER else g.users[e]
            pj = GeoPoint(g.item_lat[e], g.item_lon[e]) if side is Side.USER else GeoPoint(g.user_lat[e], g.user_lon[e])
            anchor = GeoPoint(g.user_lat[e], g.user_lon[e])
            hj = oracle_embed(g, mem, j, other, g.timestamps[e], anchor, p, cfg, l - 1)
            w = spatial_weight(haversine_km(loc, pj), cfg.spatial) if cfg.uses_spatial_encoding else 1.0
            if cfg.uses_position_encoding:
                enc = position_encoding(len(nb) - pos, cfg.c_t)
            else:
                enc = phi(p, t - g.timestamps[e], cfg)
            rows.append(w * np.concatenate([hj, enc]))
        w0 = spatial_weight(0.0, cfg.spatial) if cfg.uses_spatial_encoding else 1.0
        enc0 = position_encoding(0.0, cfg.c_t) if cfg.uses_position_encoding else np.cos(p["te.bias"].data)
        q = w0 * np.concatenate([h, enc0])
        h, _ = naive_attend(q, rows, l, p, cfg)
    return h


def test_isolated_node_returns_memory():
    g = from_records(["a", "b"], ["x", "y"], [5.0, 6.0], [30, 30], [120, 120], [30, 30], [120, 120])
    cfg = small(layers=3)
    p = ModelParams.init(cfg, 0)
    mem = MemoryBank.for_graph(g, cfg)
    assert embed_node(g, mem, 0, Side.USER, 5.0, HOME, p, cfg).data.tolist() == [0.0, 0.0, 0.0]
    mem.states[1] = [1.0, 2.0, 3.0]
    assert embed_node(g, mem, 1, Side.USER, 1.0, HOME, p, cfg).data.tolist() == [1.0, 2.0, 3.0]


def test_one_layer_one_neighbor_hand_composed():
    g = from_records(["a"], ["x"], [3600.0], [30.0], [120.0], [30.01], [120.0])
    cfg = small(layers=1)
    p = ModelParams.init(cfg, 1)
    mem = MemoryBank.for_graph(g, cfg)
    mem.states[:] = [[0.1, 0.2, 0.3], [0.4, -0.5, 0.6]]
    t = 7200.0
    out = embed_node(g, mem, 0, Side.USER, t, HOME, p, cfg).data
    d = haversine_km(HOME, GeoPoint(30.01, 120.0))
    row = np.concatenate([mem.states[1], np.cos(p["te.omega"].data * 1.0 + p["te.bias"].data)]) / (d + 1.0)
    # a single row gets weight exactly 1
    np.testing.assert_allclose(out, p["layer1.w_v"].data @ row, rtol=0, atol=1e-15)


def test_two_layers_chain_matches_recursion_oracle(rng):
    g = from_records(["a", "b", "a"], ["x", "x", "y"], [100.0, 200.0, 300.0], [30, 30.01, 30.02],
                     [120, 120.01, 120.02], [30.03, 30.03, 30.04], [120, 120, 120.01])
    cfg = small(neighbors=5)
    p = ModelParams.init(cfg, 2)
    mem = MemoryBank.for_graph(g, cfg)
    mem.states[:] = rng.normal(size=mem.states.shape)
    for side, n in ((Side.USER, g.num_users), (Side.ITEM, g.num_items)):
        for node in range(n):
            got = embed_node(g, mem, node, side, 400.0, HOME, p, cfg).data
            want = oracle_embed(g, mem, node, side, 400.0, HOME, p, cfg, 2)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", list(Variant))
def test_random_graph_matches_recursion_oracle(variant, rng):
    g = random_graph(rng, 25)
    cfg = small(variant, neighbors=3)
    p = ModelParams.init(cfg, 4)
    mem = MemoryBank.for_graph(g, cfg)
    mem.states[:] = rng.normal(size=mem.states.shape)
    loc = GeoPoint(30.02, 120.03)
    for u in range(g.num_users):
        np.testing.assert_allclose(embed_node(g, mem, u, Side.USER, 70.0, loc, p, cfg).data,
                                   oracle_embed(g, mem, u, Side.USER, 70.0, loc, p, cfg, 2), atol=1e-12)


def test_attention_weights_are_distributions(rng):
    g = random_graph(rng, 40)
    cfg = small(neighbors=4)
    p = ModelParams.init(cfg, 0)
    mem = MemoryBank.for_graph(g, cfg)
    mem.states[:] = rng.normal(size=mem.states.shape)
    seen = []
    layers.attention_hooks.append(seen.append)
    try:
        for u in range(g.num_users):
            embed_node(g, mem, u, Side.USER, 90.0, HOME, p, cfg)
        st = TemporalState(g, cfg)
        advance(g, st, p, cfg, g.num_edges)
        hiddens(g, st, p, cfg, np.arange(g.num_items), Side.ITEM, 200.0, 30.0, 120.0)
    finally:
        layers.attention_hooks.clear()
    assert len(seen) > 20
    for a in seen:
        assert np.all(a >= 0) and abs(a.sum() - 1.0) <= 1e-12


def test_nose_equals_full_on_colocated_graph(rng):
    n = 30
    g = from_records(rng.integers(0, 4, n).astype(str), rng.integers(0, 5, n).astype(str),
                     rng.integers(1, 100, n).astype(float), [30.0] * n, [120.0] * n, [30.0] * n, [120.0] * n)
    full, nose = small(), small(Variant.NO_SE)
    p = ModelParams.init(full, 0)
    for cfg_a, cfg_b in ((full, nose),):
        sa, sb = TemporalState(g, cfg_a), TemporalState(g, cfg_b)
        advance(g, sa, p, cfg_a, n)
        advance(g, sb, p, cfg_b, n)
        assert sa.memory == sb.memory
        for u in range(g.num_users):
            a = embed_node(g, sa.memory, u, Side.USER, 150.0, HOME, p, cfg_a).data
            b = embed_node(g, sb.memory, u, Side.USER, 150.0, HOME, p, cfg_b).data
            assert np.array_equal(a, b)


class SpyGraph:
    """Wraps a graph and records the timestamps of every edge handed out by windows()."""

    def __init__(self, g):
        self._g = g
        self.seen = []

    def __getattr__(self, name):
        return getattr(self._g, name)

    def windows(self, nodes, side, t_cut, m, frontier=None):
        eids, mask = self._g.windows(nodes, side, t_cut, m, frontier)
        self.seen.append((np.asarray(t_cut), self._g.timestamps[eids[mask]]))
        return eids, mask


def test_embed_node_never_reads_the_future(rng):
    g = random_graph(rng, 40)
    spy = SpyGraph(g)
    cfg = small(neighbors=4, layers=3)
    p = ModelParams.init(cfg, 0)
    mem = MemoryBank.for_graph(g, cfg)
    for t in (20.0, 55.0, 80.0):
        spy.seen.clear()
        for u in range(g.num_users):
            embed_node(spy, mem, u, Side.USER, t, HOME, p, cfg)
        assert spy.seen
        for _, ts in spy.seen:
            assert np.all(ts < t)


# -- score -------------------------------------------------------------

def test_score_zero_head():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    for k in ("head.w1", "head.b1", "head.w2", "head.b2"):
        p[k].data[:] = 0.0
    assert score(np.ones(3), -np.ones(3), p).item() == 0.0


def test_score_hand_arithmetic():
    cfg = ModelConfig(c=2, c_t=1)
    p = ModelParams.init(cfg, 0)
    p["head.w1"].data[:] = [[1, 0, 0, 1], [0, 1, -1, 0]]   # hidden = relu([u0 + i1, u1 - i0])
    p["head.b1"].data[:] = [0.5, -0.25]
    p["head.w2"].data[:] = [[2.0, 3.0]]
    p["head.b2"].data[:] = [-1.0]
    # u = (1, 0), i = (0, 1): hidden = relu([1 + 1 + 0.5, 0 - 0 - 0.25]) = [2.5, 0]
    assert score([1.0, 0.0], [0.0, 1.0], p).item() == 2.0 * 2.5 - 1.0
    # u = (0, 1), i = (1, 0): hidden = relu([0 + 0 + 0.5, 1 - 1 - 0.25]) = [0.5, 0]
    assert score([0.0, 1.0], [1.0, 0.0], p).item() == 0.0


def test_score_deterministic(rng):
    p = ModelParams.init(small(), 0)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert score(a, b, p).item() == score(a, b, p).item()
    with pytest.raises(ad.ShapeError):
        score(np.zeros(3), np.zeros(4), p)


# -- memory ------------------------------------------------------------

def test_gru_zero_weights_hand_oracle():
    cfg = small()
    p = ModelParams.init(cfg, 0)
    for k in ("mem.w_i", "mem.w_h", "mem.b_i", "mem.b_h"):
        p[k].data[:] = 0.0
    s = np.array([[0.4, -0.8, 2.0]])
    # r = z = sigmoid(0) = 1/2, n = tanh(0) = 0, s' = (1 - z) n + z s = s / 2
    np.testing.assert_array_equal(gru_cell(s, np.ones((1, 6)), p), 0.5 * s)


def test_gru_matches_scalar_formula(rng):
    cfg = ModelConfig(c=1, c_t=1)
    p = ModelParams.init(cfg, 0)
    wi, wh, bi, bh = (p[k].data for k in ("mem.w_i", "mem.w_h", "mem.b_i", "mem.b_h"))
    s, x = 0.3, np.array([0.7, -0.2, 0.9])
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    r = sig(wi[0] @ x + bi[0] + wh[0, 0] * s + bh[0])
    z = sig(wi[1] @ x + bi[1] + wh[1, 0] * s + bh[1])
    n = math.tanh(wi[2] @ x + bi[2] + r * (wh[2, 0] * s + bh[2]))
    got = gru_cell(np.array([[s]]), x[None, :], p)[0, 0]
    assert got == pytest.approx((1 - z) * n + z * s, abs=1e-15)


def test_memory_update_message_and_timestamps():
    g = from_records(["a", "a"], ["x", "y"], [3600.0, 10800.0], [30, 30], [120, 120], [30.0, 30.0], [120.0, 120.0])
    cfg = small()
    p = ModelParams.init(cfg, 0)
    mem = MemoryBank.for_graph(g, cfg)
    memory_update(mem, g.edge(0), p, cfg)
    assert mem.last_update.tolist() == [3600.0, 3600.0, 0.0]
    # second edge: the user's gap is 2 h, the fresh item's gap is 0
    before = mem.copy()
    memory_update(mem, g.edge(1), p, cfg)
    msg_u = np.concatenate([before.states[2], np.cos(p["te.omega"].data * 2.0 + p["te.bias"].data), [1.0]])
    msg_i = np.concatenate([before.states[0], np.cos(p["te.bias"].data), [1.0]])
    np.testing.assert_allclose(mem.states[0], gru_cell(before.states[[0]], msg_u[None], p)[0], atol=1e-15)
    np.testing.assert_allclose(mem.states[2], gru_cell(before.states[[2]], msg_i[None], p)[0], atol=1e-15)


def test_memory_regression_rejected():
    g = from_records(["a", "a"], ["x", "x"], [5.0, 9.0], [30, 30], [120, 120], [30, 30], [120, 120])
    cfg = small()
    p = ModelParams.init(cfg, 0)
    mem = MemoryBank.for_graph(g, cfg)
    memory_update(mem, g.edge(1), p, cfg)
    with pytest.raises(CausalityError):
        memory_update(mem, g.edge(0), p, cfg)


@pytest.mark.parametrize("variant", [Variant.FULL, Variant.NO_SE])
def test_apply_edges_equals_sequential_updates(variant, rng):
    g = random_graph(rng, 60, n_users=5, n_items=6)
    cfg = small(variant)
    p = ModelParams.init(cfg, 0)
    seq = MemoryBank.for_graph(g, cfg)
    for e in range(g.num_edges):
        memory_update(seq, g.edge(e), p, cfg)
    batch = MemoryBank.for_graph(g, cfg)
    apply_edges(batch, g, np.arange(g.num_edges), p, cfg)
    np.testing.assert_allclose(batch.states, seq.states, rtol=0, atol=1e-14)
    assert np.array_equal(batch.last_update, seq.last_update)
    chunks = MemoryBank.for_graph(g, cfg)
    for lo in range(0, g.num_edges, 7):
        apply_edges(chunks, g, np.arange(lo, min(lo + 7, g.num_edges)), p, cfg)
    np.testing.assert_allclose(chunks.states, seq.states, rtol=0, atol=1e-14)


def test_two_edges_in_order_vs_batches_of_one(rng):
    g = from_records(["a", "b"], ["x", "x"], [5.0, 9.0], [30, 30.1], [120, 120], [30, 30], [120, 120])
    cfg = small()
    p = ModelParams.init(cfg, 0)
    a, b = MemoryBank.for_graph(g, cfg), MemoryBank.for_graph(g, cfg)
    apply_edges(a, g, [0, 1], p, cfg)
    apply_edges(b, g, [0], p, cfg)
    apply_edges(b, g, [1], p, cfg)
    assert a == b


def test_embed_node_does_not_mutate_memory(rng):
    g = random_graph(rng, 30)
    cfg = small()
    p = ModelParams.init(cfg, 0)
    mem = MemoryBank.for_graph(g, cfg)
    apply_edges(mem, g, np.arange(15), p, cfg)
    snap = mem.copy()
    embed_node(g, mem, 0, Side.USER, 99.0, HOME, p, cfg)
    assert mem == snap
