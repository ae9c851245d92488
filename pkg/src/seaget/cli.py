"""Command-line entry point: preprocess, build-graph, train, evaluate, sweep, recommend.

Exit codes: 0 success, 2 usage or format problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .dataio import (CheckIn, DegenerateDatasetError, FormatError, Trajectory, load_operational_hours,
                     load_split, preprocess, save_split)
from .flowgraph import build_flow_map, write_edges_csv, write_nodes_csv
from .gnn import transition_attention, write_matrix
from .model import filter_by_mask, make_batch
from .popularity import write_popularity_csv
from .trainer import (TrainConfig, TrainingAborted, baseline_markov, baseline_popularity, evaluate,
                      format_report_table, popularity_for, sweep_alpha_beta, train, write_report_csv)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
PATH_KEYS = ("checkins", "hours", "workdir")
TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}

log = logging.getLogger("seaget")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files: [paths] checkins/hours/workdir and [train] TrainConfig fields


def _coerce(name: str, raw: str):
    default = TrainConfig.__dataclass_fields__[name].default
    if name == "eval_ks":
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if name in ("d_ff", "recent_cutoff"):
        return None if raw.lower() in ("", "none") else int(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config(path) -> tuple[dict, dict]:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config {path}")
    unknown = set(parser.sections()) - {"paths", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    paths, values = {}, {}
    if parser.has_section("paths"):
        for key, raw in parser.items("paths"):
            if key not in PATH_KEYS:
                raise UsageError(f"unknown key [paths] {key}")
            paths[key] = raw
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in TRAIN_KEYS:
                raise UsageError(f"unknown key [train] {key}")
            try:
                values[key] = _coerce(key, raw)
            except ValueError:
                raise UsageError(f"bad value for [train] {key}: {raw!r}") from None
    return paths, values


def _train_config(args) -> tuple[TrainConfig, dict]:
    paths, values = read_config(args.config) if getattr(args, "config", None) else ({}, {})
    for name in TRAIN_KEYS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "workdir", None):
        paths["workdir"] = args.workdir
    try:
        config = TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return config, paths


def _require_workdir(paths: dict) -> Path:
    if "workdir" not in paths:
        raise UsageError("a workdir is required (--workdir or [paths] workdir)")
    workdir = Path(paths["workdir"])
    if not (workdir / "meta.json").exists():
        raise UsageError(f"{workdir} does not hold a preprocessed split")
    return workdir


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    paths, _ = read_config(args.config) if args.config else ({}, {})
    source = args.input or paths.get("checkins")
    target = args.workdir or paths.get("workdir")
    if not source or not target:
        raise UsageError("--input and --workdir are required")
    if not Path(source).is_file():
        raise UsageError(f"input file {source} does not exist")
    split, stats = preprocess(source, seed=args.seed, min_count=args.min_count,
                              until_fixed_point=not args.single_pass,
                              max_span=None if args.gap_only else 86400)
    save_split(split, target, stats)
    print("users pois categories checkins trajectories")
    print(stats.line())
    print(f"train {len(split.train)} val {len(split.val)} test {len(split.test)}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    config, paths = _train_config(args)
    workdir = _require_workdir(paths)
    split = load_split(workdir)
    pop = popularity_for(split, config.alpha, config.beta, config.recent_cutoff)
    fmap = build_flow_map(split.train, split.catalog, pop, config.edge_weight)
    write_edges_csv(fmap, workdir / "edges.csv")
    write_nodes_csv(fmap, workdir / "nodes.csv")
    write_popularity_csv(pop, workdir / "popularity.csv")
    print(f"nodes {fmap.num_nodes} edges {len(fmap.edges)} weight {sum(fmap.edges.values()):g}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, paths = _train_config(args)
    workdir = _require_workdir(paths)
    split = load_split(workdir)
    try:
        result = train(config, split, workdir=workdir, progress=args.progress)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    path = Path(args.checkpoint) if args.checkpoint else workdir / "model.ckpt"
    ckpt.save_model(path, result.model, result.graph.edges,
                    meta={"best_val": result.best_val, "epochs_run": len(result.log)})
    if args.export_matrices:
        e_p = result.model.poi_embeddings()
        write_matrix(workdir / "poi_embeddings.mat", e_p)
        write_matrix(workdir / "transition_attention.mat",
                     transition_attention(result.model.features, result.model.laplacian, result.model.attention))
    print(f"checkpoint {path}")
    if result.log:
        print(f"best val L_final {result.best_val:.6f} after {len(result.log)} epochs")
    return EXIT_OK


def _load_checkpoint(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    model, _edges, header = ckpt.load_model(path)
    workdir = Path(args.workdir) if args.workdir else path.parent
    split = load_split(workdir)
    if (split.num_pois, split.num_categories) != (model.config.num_pois, model.config.num_categories):
        raise UsageError(f"checkpoint expects {model.config.num_pois} POIs / {model.config.num_categories} "
                         f"categories, workdir has {split.num_pois} / {split.num_categories}")
    return model, header, split, workdir


def _hours(args, split, dense: bool = False):
    if not getattr(args, "hours", None):
        return None
    if dense:
        return load_operational_hours(args.hours)
    return load_operational_hours(args.hours, split.maps.pois, split.maps.categories)


def cmd_evaluate(args) -> int:
    model, header, split, workdir = _load_checkpoint(args)
    trajs = split.test if args.split == "test" else split.val
    hours = None
    if args.filter == "on":
        hours = _hours(args, split)
        if hours is None:
            from .dataio import OperationalHoursTable
            hours = OperationalHoursTable()
    ks = (1, 5, 10, 20)
    report = evaluate(model, trajs, ks, hours=hours, catalog=split.catalog, granularity=args.granularity)
    reports = [report]
    names = ["SEAGET"]
    if args.baselines:
        a, b = header["meta"].get("alpha", 0.5), header["meta"].get("beta", 0.5)
        reports += [baseline_popularity(split, trajs, a, b, ks, args.granularity),
                    baseline_markov(split, trajs, a, b, ks, args.granularity)]
        names += ["popularity", "markov"]
    table = format_report_table(reports).splitlines()
    print(f"{'model':<12}" + table[0])
    for name, line in zip(names, table[1:]):
        print(f"{name:<12}" + line)
    out = Path(args.output) if args.output else workdir / f"eval_{args.split}.csv"
    write_report_csv(reports, out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, paths = _train_config(args)
    workdir = _require_workdir(paths)
    split = load_split(workdir)
    alphas = [float(x) for x in args.alphas.split(",")]
    betas = [float(x) for x in args.betas.split(",")]
    for v in alphas + betas:
        if not 0.0 <= v <= 1.0:
            raise UsageError(f"grid value {v} outside [0, 1]")
    try:
        reports = sweep_alpha_beta(config, split, alphas, betas, workdir=workdir)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(format_report_table(reports, with_params=True))
    write_report_csv(reports, workdir / "sweep.csv", with_params=True)
    return EXIT_OK


def parse_local_time(text: str) -> int:
    """ISO local date-time -> naive local seconds (the convention of the split files)."""
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise UsageError(f"bad date-time {text!r}; use YYYY-MM-DDTHH:MM") from None
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


def cmd_recommend(args) -> int:
    model, _header, split, _ = _load_checkpoint(args)
    if args.k < 1:
        raise UsageError("--k must be positive")
    if args.dense_ids:
        def resolve(kind, raw, limit):
            try:
                v = int(raw)
            except ValueError:
                v = -1
            if not 0 <= v < limit:
                raise UsageError(f"unknown {kind} id {raw}")
            return v
        poi_names = {i: str(i) for i in range(split.num_pois)}
        cat_names = {i: str(i) for i in range(split.num_categories)}
    else:
        def resolve(kind, raw, limit):
            table = split.maps.users if kind == "user" else split.maps.pois
            if raw not in table:
                raise UsageError(f"unknown {kind} id {raw}")
            return table[raw]
        poi_names = split.maps.inverse("pois")
        cat_names = split.maps.inverse("categories")

    user = resolve("user", args.user, model.config.num_users)
    visits = []
    for item in args.trajectory.split(","):
        if "@" not in item:
            raise UsageError(f"trajectory items look like poi@YYYY-MM-DDTHH:MM, got {item!r}")
        poi_raw, when = item.strip().split("@", 1)
        poi = resolve("poi", poi_raw, model.config.num_pois)
        cat = int(split.catalog.category[poi])
        visits.append(CheckIn(user, poi, cat, float(split.catalog.lat[poi]), float(split.catalog.lon[poi]),
                              parse_local_time(when), 0))
    query = parse_local_time(args.at)
    batch = make_batch([Trajectory(user, visits)])
    scores = model.forward(batch, training=False).poi.data[0, len(visits) - 1]
    hours = _hours(args, split, dense=args.dense_ids)
    if hours is not None:
        from .dataio import open_mask
        is_open = open_mask(hours, split.catalog, query)
        result = filter_by_mask(scores, is_open)
        if result.all_closed:
            print("warning: every POI is closed at the query time; showing unfiltered ranking", file=sys.stderr)
        scores = result.logits
    order = sorted(range(len(scores)), key=lambda p: (-scores[p], p))
    order = [p for p in order if np.isfinite(scores[p])]
    if len(order) < args.k:
        print(f"warning: only {len(order)} POIs are open at the query time", file=sys.stderr)
    print("rank\tpoi\tcategory\tscore")
    for rank, p in enumerate(order[:args.k], start=1):
        print(f"{rank}\t{poi_names[p]}\t{cat_names[int(split.catalog.category[p])]}\t{scores[p]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file with [paths] and [train] sections")
    p.add_argument("--workdir", help="directory holding the preprocessed split")
    p.add_argument("--alpha", type=float, help="user-vs-check-in weight in the popularity score")
    p.add_argument("--beta", type=float, help="recent-vs-past weight in the popularity score")
    p.add_argument("--epochs", type=int, help="training epochs (default 200)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, help="AdamW learning rate (default 1e-3)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="trajectories per step (default 16)")
    p.add_argument("--dropout", type=float, help="dropout rate (default 0.3)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, help="decoupled weight decay (default 5e-4)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--poi-dim", dest="poi_dim", type=int, help="POI/user embedding width")
    p.add_argument("--time-dim", dest="time_dim", type=int, help="time/category embedding width")
    p.add_argument("--season-dim", dest="season_dim", type=int, help="season embedding width")
    p.add_argument("--enc-layers", dest="enc_layers", type=int, help="transformer encoder layers")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--edge-weight", dest="edge_weight", choices=("count", "popularity_product"),
                   help="flow-map edge weighting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seaget", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="filter, segment and split a check-in log")
    p.add_argument("--input", help="8-column check-in TSV")
    p.add_argument("--workdir", help="output directory")
    p.add_argument("--config", help="config file ([paths] checkins / workdir)")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--min-count", dest="min_count", type=int, default=10, help="activity threshold")
    p.add_argument("--single-pass", action="store_true", help="one filter pass instead of a fixed point")
    p.add_argument("--gap-only", action="store_true", help="segment on gaps only, no 24h span cap")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-graph", help="export flow-map edges, node attributes and popularity")
    _add_train_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model on the preprocessed split")
    _add_train_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <workdir>/model.ckpt)")
    p.add_argument("--export-matrices", action="store_true", help="also dump POI embeddings and attention map")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Acc@k and MRR on a split")
    p.add_argument("--checkpoint", required=True, help="model checkpoint written by train")
    p.add_argument("--workdir", help="preprocessed split (default: checkpoint directory)")
    p.add_argument("--split", choices=("test", "val"), default="test", help="split to score (default test)")
    p.add_argument("--filter", choices=("on", "off"), default="off", help="apply the opening-hours filter")
    p.add_argument("--hours", help="opening-hours CSV (raw ids)")
    p.add_argument("--eval-granularity", "--granularity", dest="granularity", choices=("position", "trajectory"),
                   default="position",
                   help="score every prefix position or only each trajectory's last step")
    p.add_argument("--baselines", action="store_true", help="also report popularity and Markov baselines")
    p.add_argument("--output", help="CSV path (default <workdir>/eval_<split>.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate over an alpha x beta grid")
    _add_train_flags(p)
    p.add_argument("--alphas", default="0.33,0.50,0.67", help="comma-separated alpha grid")
    p.add_argument("--betas", default="0.33,0.50,0.67", help="comma-separated beta grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("recommend", help="top-k next POIs for a trajectory prefix")
    p.add_argument("--checkpoint", required=True, help="model checkpoint written by train")
    p.add_argument("--workdir", help="preprocessed split (default: checkpoint directory)")
    p.add_argument("--user", required=True, help="user id")
    p.add_argument("--trajectory", required=True, help='comma-separated "poi@YYYY-MM-DDTHH:MM" visits')
    p.add_argument("--at", required=True, help="local query date-time")
    p.add_argument("--k", type=int, default=10, help="number of recommendations (default 10)")
    p.add_argument("--hours", help="opening-hours CSV; omitted means every POI is open")
    p.add_argument("--dense-ids", action="store_true", help="ids on the command line are dense integers")
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
        return args.func(args)
    except (UsageError, FormatError, DegenerateDatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
