"""BPR training with chronological mini-batches and Adam."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .graph import InteractionGraph, Side
from .model import ModelConfig, ModelParams, TemporalState, advance, hiddens, replay, score_pairs
from .model.memory import MemoryBank

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lambda_l2: float = 1e-6
    epochs: int = 10
    batch_size: int = 200
    neg_per_pos: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if self.batch_size < 1 or self.neg_per_pos < 1 or self.epochs < 0:
            raise ValueError("batch_size and neg_per_pos must be >= 1, epochs >= 0")


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class PositiveIndex:
    """Items each user interacted with at each exact timestamp."""

    def __init__(self, g: InteractionGraph):
        self._pos = {}
        for u, i, t in zip(g.users.tolist(), g.items.tolist(), g.timestamps.tolist()):
            self._pos.setdefault((u, t), set()).add(i)

    def __call__(self, user, t):
        return self._pos.get((user, t), ())


def sample_negatives(g: InteractionGraph, edge: int, n: int, rng: np.random.Generator, positives=None):
    """``n`` items drawn uniformly, rejecting items the user touched at the edge's exact time."""
    positives = positives if positives is not None else PositiveIndex(g)
    taken = positives(int(g.users[edge]), float(g.timestamps[edge]))
    out = np.empty(n, dtype=np.int64)
    for k in range(n):
        for _ in range(1000):
            cand = int(rng.integers(g.num_items))
            if cand not in taken:
                out[k] = cand
                break
        else:
            raise TrainingError(f"no negative found for edge {edge} after 1000 draws")
    return out


def _negatives_for_batch(g, eids, n, rng, positives):
    draws = rng.integers(g.num_items, size=(len(eids), n))
    users = g.users[eids].tolist()
    ts = g.timestamps[eids].tolist()
    for r in range(len(eids)):
        taken = positives(users[r], ts[r])
        if not taken:
            continue
        for k in range(n):
            tries = 0
            while int(draws[r, k]) in taken:
                tries += 1
                if tries >= 1000:
                    raise TrainingError(f"no negative found for edge {eids[r]} after 1000 draws")
                draws[r, k] = rng.integers(g.num_items)
    return draws


def bpr_loss(y_pos, y_neg, lambda_l2, params):
    """mean(-ln sigmoid(y_pos - y_neg)) + lambda * sum(theta^2)."""
    y_pos, y_neg = ad.as_tensor(y_pos), ad.as_tensor(y_neg)
    if not (np.all(np.isfinite(y_pos.data)) and np.all(np.isfinite(y_neg.data))):
        raise ad.NonFiniteError("non-finite scores")
    loss = ad.scale(ad.mean(ad.log_sigmoid(ad.sub(y_pos, y_neg))), -1.0)
    if lambda_l2 > 0:
        reg = None
        for p in params:
            sq = ad.sum_squares(p)
            reg = sq if reg is None else ad.add(reg, sq)
        loss = ad.add(loss, ad.scale(reg, lambda_l2))
    return loss


def batch_loss(g, state, params, cfg, tcfg, lo, hi, rng, positives, with_hiddens=False):
    eids = np.arange(lo, hi)
    t = g.timestamps[eids]
    n = tcfg.neg_per_pos
    negs = _negatives_for_batch(g, eids, n, rng, positives).reshape(-1)
    hu = hiddens(g, state, params, cfg, g.users[eids], Side.USER, t, g.user_lat[eids], g.user_lon[eids])
    # every hidden of this query is anchored at the user's origin
    hp = hiddens(g, state, params, cfg, g.items[eids], Side.ITEM, t, g.user_lat[eids], g.user_lon[eids])
    hn = hiddens(g, state, params, cfg, negs, Side.ITEM, np.repeat(t, n),
                 np.repeat(g.user_lat[eids], n), np.repeat(g.user_lon[eids], n))
    rep = np.repeat(np.arange(len(eids)), n)
    y_pos = ad.take_rows(score_pairs(hu[-1], hp[-1], params), rep)
    y_neg = score_pairs(ad.take_rows(hu[-1], rep), hn[-1], params)
    loss = bpr_loss(y_pos, y_neg, tcfg.lambda_l2, params)
    if with_hiddens:
        return loss, hu, hp
    return loss


def train_epoch(g: InteractionGraph, state: TemporalState, params: ModelParams, cfg: ModelConfig,
                tcfg: TrainConfig, optimizer: Adam, rng: np.random.Generator, train_range: range,
                positives=None):
    """One chronological pass over ``train_range``; returns epoch statistics.

    Memory and the hidden cache restart from zero; edges before
    ``train_range`` are replayed without updates. Each batch is scored with
    the state as of the batch start, then the batch's edges are committed.
    """
    positives = positives if positives is not None else PositiveIndex(g)
    if not 0 <= train_range.start <= train_range.stop <= g.num_edges:
        raise ValueError(f"train range {train_range} outside the edge log")
    replay(g, state, params, cfg, train_range.start, tcfg.batch_size)
    losses = []
    layer_seconds = 0.0
    t0 = time.perf_counter()
    for step, lo in enumerate(range(train_range.start, train_range.stop, tcfg.batch_size)):
        hi = min(lo + tcfg.batch_size, train_range.stop)
        tl = time.perf_counter()
        try:
            loss, hu, hp = batch_loss(g, state, params, cfg, tcfg, lo, hi, rng, positives, with_hiddens=True)
            optimizer.zero_grad()
            loss.backward()
        except ad.NonFiniteError as exc:
            norms = {k: float(np.linalg.norm(v.grad)) for k, v in params.items() if v.grad is not None}
            raise TrainingError(f"non-finite value at step {step}: {exc}; grad norms {norms}") from exc
        layer_seconds += time.perf_counter() - tl
        grads = [p.grad for p in params if p.grad is not None]
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            norms = {k: float(np.linalg.norm(v.grad)) for k, v in params.items() if v.grad is not None}
            raise TrainingError(f"non-finite gradient at step {step}; grad norms {norms}")
        optimizer.step()
        losses.append(loss.item())
        advance(g, state, params, cfg, hi, user_h=hu[:cfg.layers], item_h=hp[:cfg.layers])
    return {
        "mean_loss": float(np.mean(losses)) if losses else float("nan"),
        "steps": len(losses),
        "seconds": time.perf_counter() - t0,
        "layer_seconds": layer_seconds,
    }


def make_optimizer(params: ModelParams, tcfg: TrainConfig) -> Adam:
    return Adam(params, tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, memory: MemoryBank, seed: int, meta=None):
    """Write config, parameters, memory bank and seed into one .npz container."""
    header = {"model": cfg.to_dict(), "seed": int(seed), "meta": meta or {},
              "params": params.names()}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for k, v in params.items():
        arrays[f"param/{k}"] = v.data
    arrays["memory/states"] = memory.states
    arrays["memory/last_update"] = memory.last_update
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (ModelConfig, ModelParams, MemoryBank, seed, meta)."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        cfg = ModelConfig.from_dict(header["model"])
        params = ModelParams.from_arrays({k: z[f"param/{k}"] for k in header["params"]})
        states = z["memory/states"]
        last = z["memory/last_update"]
    n_users = int(header["meta"].get("num_users", states.shape[0]))
    memory = MemoryBank(n_users, states.shape[0] - n_users, states.shape[1])
    memory.states = np.array(states)
    memory.last_update = np.array(last)
    return cfg, params, memory, header["seed"], header["meta"]


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)


# -- fit loop ------------------------------------------------------------

LOG_HEADER = ("epoch", "mean_loss", "val_hit10", "val_ndcg10", "seconds")


@dataclass
class FitResult:
    params: ModelParams
    memory: MemoryBank
    best_epoch: int
    best_val_hit10: float
    history: list


def fit(g: InteractionGraph, cfg: ModelConfig, tcfg: TrainConfig, train_range: range, val_range: range,
        log_path=None, checkpoint_path=None, val_queries=None, params=None, on_epoch=None):
    """Train for up to ``tcfg.epochs`` epochs with early stopping on validation Hit@10.

    ``val_queries`` limits validation to the first that many validation edges
    (None: all). The best epoch's parameters are returned and, if
    ``checkpoint_path`` is given, checkpointed together with the memory bank
    as it stood at the end of training for that epoch. ``log_path`` receives
    one CSV line per epoch.
    """
    from .evaluation import evaluate_split

    if train_range.stop != val_range.start:
        raise ValueError("validation must start where training stops")
    params = params if params is not None else ModelParams.init(cfg, tcfg.seed)
    state = TemporalState(g, cfg)
    optimizer = make_optimizer(params, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    positives = PositiveIndex(g)
    val = val_range if val_queries is None else range(val_range.start, min(val_range.stop,
                                                                             val_range.start + val_queries))
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(LOG_HEADER)
        log_fh.flush()
    best = (-1.0, -1)
    best_params, best_memory = params.copy(), state.memory.copy()
    history = []
    bad = 0
    try:
        for epoch in range(tcfg.epochs):
            t0 = time.perf_counter()
            stats = train_epoch(g, state, params, cfg, tcfg, optimizer, rng, train_range, positives)
            memory = state.memory.copy()
            if len(val):
                report = evaluate_split(g, state, params, cfg, val, ks=(10,))
                vh, vn = report.hit(10), report.ndcg(10)
            else:
                vh = vn = float("nan")
            row = {"epoch": epoch, "mean_loss": stats["mean_loss"], "val_hit10": vh, "val_ndcg10": vn,
                   "seconds": time.perf_counter() - t0, "layer_seconds": stats["layer_seconds"]}
            history.append(row)
            log.info("epoch %d loss %.5f val hit@10 %.4f", epoch, row["mean_loss"], vh)
            if writer:
                writer.writerow([epoch, f"{row['mean_loss']:.6f}", f"{vh:.6f}", f"{vn:.6f}", f"{row['seconds']:.3f}"])
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(row)
            if vh > best[0] or best[1] < 0:
                best = (vh, epoch)
                best_params, best_memory = params.copy(), memory
                bad = 0
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, cfg, best_params, best_memory, tcfg.seed,
                                    {"num_users": g.num_users, "epoch": epoch})
            else:
                bad += 1
                if bad >= tcfg.patience:
                    log.info("early stop after epoch %d (best %d)", epoch, best[1])
                    break
    finally:
        if log_fh:
            log_fh.close()
    if tcfg.epochs == 0 and checkpoint_path:
        save_checkpoint(checkpoint_path, cfg, best_params, best_memory, tcfg.seed,
                        {"num_users": g.num_users, "epoch": -1})
    return FitResult(best_params, best_memory, best[1], best[0], history)
