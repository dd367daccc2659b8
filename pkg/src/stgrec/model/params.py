"""Learnable parameters of the recommender, stored as named autodiff tensors."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor
from ..geo import TemporalEncodingParams
from .config import ModelConfig

# frequencies in rad per time unit, geometric from 10 down to 1e-4
# (hourly unit: periods from about 40 minutes to about 7 years)
_OMEGA_LOG10 = (1.0, -4.0)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Ordered mapping name -> Tensor.

    Names: ``te.omega``, ``te.bias``; ``layer{l}.w_q|w_k|w_v`` (c x (c + c_t));
    ``layer{l}.res_w1|res_b1|res_w2|res_b2`` when residual is on;
    ``head.w1|b1|w2|b2`` (2c -> c -> 1); ``mem.w_i|w_h|b_i|b_h`` (GRU cell).
    """

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        c, ct = cfg.c, cfg.c_t
        d = c + ct
        msg = c + ct + 1
        t = {}
        t["te.omega"] = 10.0 ** np.linspace(*_OMEGA_LOG10, ct)
        t["te.bias"] = _uniform(rng, ct, 1)
        for l in range(1, cfg.layers + 1):
            for name in ("w_q", "w_k", "w_v"):
                t[f"layer{l}.{name}"] = _uniform(rng, (c, d), d)
            if cfg.use_residual:
                t[f"layer{l}.res_w1"] = _uniform(rng, (c, 2 * c), 2 * c)
                t[f"layer{l}.res_b1"] = _uniform(rng, c, 2 * c)
                t[f"layer{l}.res_w2"] = _uniform(rng, (c, c), c)
                t[f"layer{l}.res_b2"] = _uniform(rng, c, c)
        t["head.w1"] = _uniform(rng, (c, 2 * c), 2 * c)
        t["head.b1"] = _uniform(rng, c, 2 * c)
        t["head.w2"] = _uniform(rng, (1, c), c)
        t["head.b2"] = _uniform(rng, 1, c)
        t["mem.w_i"] = _uniform(rng, (3 * c, msg), c)
        t["mem.w_h"] = _uniform(rng, (3 * c, c), c)
        t["mem.b_i"] = _uniform(rng, 3 * c, c)
        t["mem.b_h"] = _uniform(rng, 3 * c, c)
        return cls({k: Tensor(np.ascontiguousarray(v, dtype=np.float64), requires_grad=True)
                    for k, v in t.items()})

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def temporal(self) -> TemporalEncodingParams:
        return TemporalEncodingParams(self["te.omega"].data, self["te.bias"].data)

    def zero_grad(self):
        for p in self:
            p.grad = None

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ModelParams":
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays())

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self)
