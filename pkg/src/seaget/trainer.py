"""Training loop, ranking metrics, reference baselines and the alpha/beta sweep."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .checkpoint import save_model
from .dataio import DatasetSplit, OperationalHoursTable, Trajectory, open_mask
from .flowgraph import build_flow_map, node_features, normalized_laplacian, transition_counts
from .model import ModelConfig, Seaget, filter_by_mask, make_batch
from .numcore import Rng
from .popularity import PopularityParams, PopularityStats, compute_popularity

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 20)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    dropout: float = 0.3
    lr_scheduler_factor: float = 0.1
    weight_decay: float = 5e-4
    seed: int = 0
    alpha: float = 0.5
    beta: float = 0.5
    scheduler_patience: int = 5
    lr_floor: float = 1e-6
    eval_ks: tuple[int, ...] = DEFAULT_KS
    poi_dim: int = 128
    time_dim: int = 32
    season_dim: int = 32
    d_ff: int | None = None
    enc_layers: int = 2
    heads: int = 2
    gcn_layers: int = 2
    edge_weight: str = "count"
    recent_cutoff: int | None = None

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("learning_rate", "batch_size", "lr_scheduler_factor", "poi_dim", "time_dim",
                     "season_dim", "enc_layers", "heads", "gcn_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("epochs and weight_decay must be >= 0 and dropout in [0, 1)")
        self.eval_ks = tuple(sorted(int(k) for k in self.eval_ks))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    acc: dict[int, float]
    mrr: float
    count: int
    alpha: float | None = None
    beta: float | None = None

    def row(self) -> list[float]:
        return [self.acc[k] for k in sorted(self.acc)] + [self.mrr]

    def header(self) -> list[str]:
        return [f"Acc@{k}" for k in sorted(self.acc)] + ["MRR"]


def rank_of(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``target``; ties go to the lower POI id."""
    s = scores[target]
    return 1 + int(np.count_nonzero(scores > s)) + int(np.count_nonzero(scores[:target] == s))


def report_from_ranks(ranks: Sequence[int], ks=DEFAULT_KS) -> EvalReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no predictions to evaluate")
    acc = {int(k): float(np.mean(ranks <= k)) for k in ks}
    # fsum keeps MRR independent of the order predictions were collected in
    return EvalReport(acc, math.fsum(1.0 / ranks) / ranks.size, int(ranks.size))


def format_report_table(reports: Sequence[EvalReport], with_params: bool = False) -> str:
    head = (["alpha", "beta"] if with_params else []) + reports[0].header()
    lines = ["  ".join(f"{h:>8}" for h in head)]
    for r in reports:
        cells = ([f"{r.alpha:8.2f}", f"{r.beta:8.2f}"] if with_params else []) + [f"{v:8.4f}" for v in r.row()]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def write_report_csv(reports: Sequence[EvalReport], path, with_params: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["alpha", "beta"] if with_params else []) + reports[0].header() + ["count"])
        for r in reports:
            w.writerow(([r.alpha, r.beta] if with_params else []) + [f"{v:.6f}" for v in r.row()] + [r.count])


# ---------------------------------------------------------------------------
# evaluation


def _prediction_positions(batch, granularity: str) -> list[tuple[int, int]]:
    if granularity == "position":
        return [tuple(ix) for ix in np.argwhere(batch.mask)]
    if granularity == "trajectory":
        return [(i, int(batch.lengths[i]) - 2) for i in range(len(batch.lengths))]
    raise ValueError(f"unknown granularity {granularity!r}")


def evaluate(model: Seaget, trajectories: list[Trajectory], ks=DEFAULT_KS, hours: OperationalHoursTable | None = None,
             catalog=None, granularity: str = "position", batch_size: int = 64) -> EvalReport:
    """Acc@k and MRR of the next-POI ranking at every prefix position.

    With ``hours`` given, POIs closed at the time of the visit being
    predicted are masked before ranking.
    """
    trajs = [t for t in trajectories if len(t) >= 2]
    if not trajs:
        raise ValueError("evaluation set is empty")
    ranks = []
    for start in range(0, len(trajs), batch_size):
        batch = make_batch(trajs[start:start + batch_size])
        logits = model.forward(batch, training=False).poi.data
        for i, j in _prediction_positions(batch, granularity):
            scores = logits[i, j]
            if hours is not None:
                scores = filter_by_mask(scores, open_mask(hours, catalog, int(batch.target_stamp[i, j]))).logits
            ranks.append(rank_of(scores, int(batch.target_poi[i, j])))
    return report_from_ranks(ranks, ks)


def popularity_for(split: DatasetSplit, alpha: float, beta: float, recent_cutoff=None) -> PopularityStats:
    return compute_popularity(split.train_checkins(), PopularityParams(alpha, beta, recent_cutoff), split.num_pois)


def baseline_popularity(split: DatasetSplit, trajectories=None, alpha: float = 0.5, beta: float = 0.5,
                        ks=DEFAULT_KS, granularity: str = "position") -> EvalReport:
    """Rank every POI by training popularity, ignoring the prefix."""
    scores = popularity_for(split, alpha, beta).raw
    ranks = []
    for t in trajectories if trajectories is not None else split.test:
        targets = t.pois[1:] if granularity == "position" else t.pois[-1:]
        ranks += [rank_of(scores, p) for p in targets]
    return report_from_ranks(ranks, ks)


class MarkovScorer:
    """First-order transition counts with a popularity fallback for unseen rows."""

    def __init__(self, train: list[Trajectory], num_pois: int, fallback: np.ndarray):
        self.counts = np.zeros((num_pois, num_pois))
        for (a, b), n in transition_counts(train).items():
            self.counts[a, b] = n
        self.fallback = np.asarray(fallback, dtype=np.float64)

    def scores(self, current: int) -> np.ndarray:
        row = self.counts[current]
        return row if row.any() else self.fallback


def baseline_markov(split: DatasetSplit, trajectories=None, alpha: float = 0.5, beta: float = 0.5,
                    ks=DEFAULT_KS, granularity: str = "position") -> EvalReport:
    scorer = MarkovScorer(split.train, split.num_pois, popularity_for(split, alpha, beta).raw)
    ranks = []
    for t in trajectories if trajectories is not None else split.test:
        pois = t.pois
        steps = range(len(pois) - 1) if granularity == "position" else [len(pois) - 2]
        ranks += [rank_of(scorer.scores(pois[i]), pois[i + 1]) for i in steps]
    return report_from_ranks(ranks, ks)


# ---------------------------------------------------------------------------
# training


@dataclass
class GraphInputs:
    features: np.ndarray
    laplacian: np.ndarray
    edges: np.ndarray
    popularity: PopularityStats


def build_graph_inputs(split: DatasetSplit, config: TrainConfig) -> GraphInputs:
    pop = popularity_for(split, config.alpha, config.beta, config.recent_cutoff)
    fmap = build_flow_map(split.train, split.catalog, pop, config.edge_weight)
    edges = np.array([(a, b, w) for (a, b), w in sorted(fmap.edges.items())], dtype=np.float64).reshape(-1, 3)
    return GraphInputs(node_features(fmap), normalized_laplacian(fmap.adjacency()), edges, pop)


def model_config_for(split: DatasetSplit, config: TrainConfig, feature_dim: int) -> ModelConfig:
    return ModelConfig(num_users=split.num_users, num_pois=split.num_pois, num_categories=split.num_categories,
                       feature_dim=feature_dim, poi_dim=config.poi_dim, time_dim=config.time_dim,
                       season_dim=config.season_dim, gcn_layers=config.gcn_layers, enc_layers=config.enc_layers,
                       heads=config.heads, d_ff=config.d_ff, dropout=config.dropout)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_poi: float
    train_time: float
    train_cat: float
    train_final: float
    val_final: float


@dataclass
class TrainResult:
    model: Seaget
    graph: GraphInputs
    log: list[EpochLog] = field(default_factory=list)
    best_val: float = math.inf
    checkpoint: str | None = None


def mean_loss(model: Seaget, trajs: list[Trajectory], batch_size: int) -> float:
    """Position-weighted mean of the joint loss over ``trajs`` (dropout off)."""
    total, count = 0.0, 0
    for start in range(0, len(trajs), batch_size):
        batch = make_batch(trajs[start:start + batch_size])
        n = int(batch.mask.sum())
        if n:
            total += float(model.loss(batch).total.data) * n
            count += n
    return total / count if count else math.nan


def _snapshot(model: Seaget) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


def _restore(model: Seaget, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters().items():
        p.data[...] = snap[name]


def write_log_csv(entries: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_poi", "train_time", "train_cat", "train_final", "val_final"])
        for e in entries:
            w.writerow([e.epoch, repr(e.lr), f"{e.train_poi:.6f}", f"{e.train_time:.6f}", f"{e.train_cat:.6f}",
                        f"{e.train_final:.6f}", f"{e.val_final:.6f}"])


def train(config: TrainConfig, split: DatasetSplit, hours: OperationalHoursTable | None = None,
          workdir=None, progress: bool = False) -> TrainResult:
    """Fit the model with AdamW and reduce-on-plateau; keep the best-validation weights.

    ``hours`` is accepted for interface symmetry only: the opening-hours
    filter never applies to training targets.
    """
    del hours
    graph = build_graph_inputs(split, config)
    mconf = model_config_for(split, config, graph.features.shape[1])
    model = Seaget.init(mconf, graph.features, graph.laplacian, config.seed)
    model.meta = {"alpha": config.alpha, "beta": config.beta, "seed": config.seed,
                  "train_config": {k: v for k, v in asdict(config).items() if k != "eval_ks"}}
    result = TrainResult(model, graph)
    ckpt_path = None if workdir is None else Path(workdir) / "model.ckpt"
    if config.epochs == 0:
        return result

    opt = nc.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    shuffle_rng = Rng(config.seed, "shuffle")
    dropout_rng = Rng(config.seed, "dropout")
    train_trajs = [t for t in split.train if len(t) >= 2]
    val_trajs = [t for t in split.val if len(t) >= 2]
    best = _snapshot(model)
    stale = 0
    epochs = range(1, config.epochs + 1)
    if progress:
        from tqdm import tqdm
        epochs = tqdm(epochs, desc="epochs")
    for epoch in epochs:
        order = shuffle_rng.permutation(len(train_trajs))
        sums = np.zeros(4)
        count = 0
        for start in range(0, len(order), config.batch_size):
            chunk = sorted((train_trajs[i] for i in order[start:start + config.batch_size]), key=len, reverse=True)
            batch = make_batch(chunk)
            n = int(batch.mask.sum())
            if not n:
                continue
            opt.zero_grad()
            parts = model.loss(batch, training=True, rng=dropout_rng)
            if not math.isfinite(float(parts.total.data)):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", result.checkpoint)
            nc.backward(parts.total)
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingAborted(str(exc), result.checkpoint) from None
            sums += n * np.array([parts.poi, parts.time, parts.cat, float(parts.total.data)])
            count += n
        train_avg = sums / max(count, 1)
        val = mean_loss(model, val_trajs, 64) if val_trajs else float(train_avg[3])
        if not math.isfinite(val):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}", result.checkpoint)
        result.log.append(EpochLog(epoch, opt.lr, *map(float, train_avg), val))
        if val < result.best_val:
            result.best_val = val
            best = _snapshot(model)
            stale = 0
            if ckpt_path is not None:
                save_model(ckpt_path, model, graph.edges, meta={"epoch": epoch, "val_final": val})
                result.checkpoint = str(ckpt_path)
        else:
            stale += 1
            if stale >= config.scheduler_patience:
                opt.lr = max(opt.lr * config.lr_scheduler_factor, config.lr_floor)
                stale = 0
        log.info("epoch %d lr %.2e train %.4f val %.4f", epoch, opt.lr, train_avg[3], val)
    _restore(model, best)
    if workdir is not None:
        write_log_csv(result.log, Path(workdir) / "train_log.csv")
    return result


def sweep_alpha_beta(config: TrainConfig, split: DatasetSplit, alphas, betas, trajectories=None,
                     workdir=None) -> list[EvalReport]:
    """Train and evaluate one model per (alpha, beta) pair with a shared seed."""
    if not len(alphas) or not len(betas):
        raise ValueError("alpha and beta grids must be non-empty")
    reports = []
    for a in alphas:
        for b in betas:
            cfg = replace(config, alpha=a, beta=b)
            sub = None
            if workdir is not None:
                sub = Path(workdir) / f"sweep_a{a:.2f}_b{b:.2f}"
                sub.mkdir(parents=True, exist_ok=True)
            res = train(cfg, split, workdir=sub)
            rep = evaluate(res.model, trajectories if trajectories is not None else split.test, cfg.eval_ks)
            rep.alpha, rep.beta = a, b
            reports.append(rep)
    return reports

