import numpy as np
import pytest

from stgrec.graph import from_records


def random_graph(rng, n_edges=30, n_users=4, n_items=5, span=100.0, spread=0.05, integer_times=True):
    """Small random graph around (30, 120); times in (1, span)."""
    ts = rng.uniform(1.0, span, n_edges)
    if integer_times:
        ts = ts.round(0)
    return from_records(
        rng.integers(0, n_users, n_edges).astype(str), rng.integers(0, n_items, n_edges).astype(str), ts,
        30 + rng.uniform(0, spread, n_edges), 120 + rng.uniform(0, spread, n_edges),
        30 + rng.uniform(0, spread, n_edges), 120 + rng.uniform(0, spread, n_edges))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
