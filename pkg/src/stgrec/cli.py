"""Command-line entry point: synth, ingest, train, eval, recommend.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, defaults_help
from .evaluation import RankingReport, evaluate, rank_items
from .geo import GeoError, check_coordinates
from .graph import (IngestError, InteractionGraph, chronological_split, ingest_csv, k_core_filter,
                    latest_user_location, load_graph, save_graph)
from .model import TemporalState, replay
from .synthetic import SynthConfig, SynthConfigError, generate
from .training import TrainingError, fit, load_checkpoint

EXIT_CODES = {
    "usage": 2,
    "missing_file": 3,
    "bad_config": 4,
    "unknown_user": 5,
    "bad_data": 6,
    "training_failed": 7,
    "internal": 1,
}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _fail(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return EXIT_CODES[kind]


def _require_file(path, what):
    if not path:
        raise CliError("usage", f"{what} path is required")
    if not Path(path).is_file():
        raise CliError("missing_file", f"{what} not found: {path}")
    return Path(path)


def _ks(text):
    try:
        return RunConfig.parse_value("ks", text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _sets(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise CliError("bad_config", f"--set expects key=value, got {pair!r}")
        k, v = (s.strip() for s in pair.split("=", 1))
        out[k] = RunConfig.parse_value(k, v)
    return out


def run_config(args, radius_key="radius_km") -> RunConfig:
    """File values (if --config), then --set pairs, then dedicated flags."""
    overrides = _sets(getattr(args, "set", None))
    flag_keys = {"seed": "seed", "epochs": "epochs", "lr": "lr", "layers": "layers",
                 "neighbors": "neighbors", "tau": "tau", "variant": "variant", "k": "ks",
                 "threads": "threads", "radius_km": radius_key}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        return RunConfig.from_file(_require_file(args.config, "config"), overrides)
    return RunConfig.build({}, overrides)


def load_any_graph(path, k_core=0) -> InteractionGraph:
    """A graph cache (.npz) as is, or a CSV log ingested and k-core filtered."""
    path = _require_file(path, "graph")
    if path.suffix == ".npz":
        return load_graph(path)
    g = ingest_csv(path)
    return k_core_filter(g, k_core) if k_core > 0 else g


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    try:
        cfg = SynthConfig(n_users=args.n_users, n_items=args.n_items, n_events=args.n_events,
                          n_regions=args.n_regions, noise_frac=args.noise_frac,
                          seed=args.seed if args.seed is not None else 0)
        data = generate(cfg)
    except SynthConfigError as exc:
        raise CliError("bad_config", exc) from None
    Path(args.out).write_bytes(data)
    print(json.dumps({"out": str(args.out), "events": cfg.n_events}))


def cmd_ingest(args):
    g = ingest_csv(_require_file(args.csv, "csv"))
    n0 = g.num_edges
    if args.k_core > 0:
        g = k_core_filter(g, args.k_core)
    save_graph(g, args.out)
    print(json.dumps({"out": str(args.out), "edges_in": n0, "edges": g.num_edges,
                      "users": g.num_users, "items": g.num_items}))


def cmd_train(args):
    rc = run_config(args)
    g = load_any_graph(args.graph or rc.graph, rc.k_core)
    tr, va, _ = chronological_split(g, rc.split_spec())
    checkpoint = args.checkpoint or rc.checkpoint
    if not checkpoint:
        raise CliError("usage", "checkpoint path is required")
    result = fit(g, rc.model_config(), rc.train_config(), tr, va, log_path=args.log or rc.log or None,
                 checkpoint_path=checkpoint, val_queries=rc.val_queries or None)
    print(json.dumps({"checkpoint": str(checkpoint), "best_epoch": result.best_epoch,
                      "best_val_hit10": result.best_val_hit10}))


def cmd_eval(args):
    rc = run_config(args, radius_key="eval_radius_km")
    cfg, params, _, _, _ = load_checkpoint(_require_file(args.checkpoint or rc.checkpoint, "checkpoint"))
    g = load_any_graph(args.graph or rc.graph, rc.k_core)
    tr, va, te = chronological_split(g, rc.split_spec())
    split = te if args.split == "test" else va
    if args.max_queries:
        split = range(split.start, min(split.stop, split.start + args.max_queries))
    report = evaluate(g, params, cfg, split, ks=rc.ks, radius_km=rc.eval_radius_km, threads=rc.threads)
    text = report.to_json()
    if args.report or rc.report:
        Path(args.report or rc.report).write_text(text + "\n")
    if args.csv:
        write_report_csv(report, args.csv)
    print(text)


def write_report_csv(report: RankingReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("k", "metric", "value"))
        for k, metric, value in report.csv_rows():
            w.writerow((k, metric, f"{value:.6f}"))


def recommend(g, params, cfg, user_ext, t, lat=None, lon=None, k=10, radius_km=None, threads=1):
    """Top-``k`` (external item id, score) for a query; the model state is replayed to ``t``."""
    try:
        user = g.user_index(user_ext)
    except KeyError:
        raise CliError("unknown_user", f"unknown user id {user_ext!r}") from None
    if (lat is None) != (lon is None):
        raise CliError("usage", "give both --lat and --lon or neither")
    if lat is None:
        p = latest_user_location(g, user, t)
        lat, lon = p.lat, p.lon
    check_coordinates(lat, lon)
    state = TemporalState(g, cfg)
    replay(g, state, params, cfg, int(np.searchsorted(g.timestamps, t, side="left")))
    items, scores = rank_items(g, state, params, cfg, user, t, lat, lon, radius_km=radius_km,
                               threads=threads, return_scores=True)
    return [(str(g.item_ids[i]), float(s)) for i, s in zip(items[:k], scores[:k])]


def cmd_recommend(args):
    rc = run_config(args, radius_key="eval_radius_km")
    cfg, params, _, _, _ = load_checkpoint(_require_file(args.checkpoint or rc.checkpoint, "checkpoint"))
    g = load_any_graph(args.graph or rc.graph, rc.k_core)
    k = max(rc.ks) if args.k is None else max(args.k)
    top = recommend(g, params, cfg, args.user, args.t, args.lat, args.lon, k, rc.eval_radius_km, rc.threads)
    print(json.dumps({"user": args.user, "t": args.t,
                      "items": [{"item": i, "score": s} for i, s in top]}))


# -- parser -----------------------------------------------------------------

def _common(p, radius_help):
    p.add_argument("--config", help="flat key = value file; keys: " + ", ".join(RunConfig.keys()))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--variant", choices=["full", "no-se", "no-se-radius", "pe"])
    p.add_argument("--radius-km", dest="radius_km", type=float, help=radius_help)
    p.add_argument("--k", type=_ks, help="comma-separated cutoffs, e.g. 10,20")
    p.add_argument("--threads", type=int, help="candidate-scoring threads")
    p.add_argument("--graph", help="graph cache (.npz) or interaction CSV")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stgrec", description="Spatiotemporal graph transformer recommender.",
        epilog="config defaults: " + defaults_help())
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic check-in CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    d = SynthConfig()
    p.add_argument("--n-users", type=int, default=d.n_users)
    p.add_argument("--n-items", type=int, default=d.n_items)
    p.add_argument("--n-events", type=int, default=d.n_events)
    p.add_argument("--n-regions", type=int, default=d.n_regions)
    p.add_argument("--noise-frac", type=float, default=d.noise_frac)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse a CSV log, k-core filter it, write a graph cache")
    p.add_argument("csv")
    p.add_argument("--k-core", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train and checkpoint the best validation epoch")
    _common(p, "recall radius of the no-se-radius variant")
    p.add_argument("--checkpoint")
    p.add_argument("--log", help="per-epoch CSV log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-ranking Hit@K / NDCG@K report")
    _common(p, "only rank items within this distance of the query location")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["test", "val"], default="test")
    p.add_argument("--max-queries", type=int, help="evaluate only the first N edges of the split")
    p.add_argument("--report", help="also write the JSON report here")
    p.add_argument("--csv", help="also write (k, metric, value) rows here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", help="top-K items for one (user, time, location) query")
    _common(p, "only rank items within this distance of the query location")
    p.add_argument("--checkpoint")
    p.add_argument("--user", required=True, help="external user id")
    p.add_argument("--t", type=float, required=True, help="query time (unix seconds)")
    p.add_argument("--lat", type=float)
    p.add_argument("--lon", type=float)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, exc)
    except ConfigError as exc:
        return _fail("bad_config", exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc)
    except (IngestError, GeoError) as exc:
        return _fail("bad_data", exc)
    except TrainingError as exc:
        return _fail("training_failed", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
