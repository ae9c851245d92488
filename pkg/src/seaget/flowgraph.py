"""Trajectory flow map: a weighted directed POI graph built from training
trajectories, plus the dense matrices the GCN consumes."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataio import PoiCatalog, Trajectory
from .popularity import PopularityStats, minmax

EDGE_WEIGHT_MODES = ("count", "popularity_product")


@dataclass
class TrajectoryFlowMap:
    num_nodes: int
    edges: dict[tuple[int, int], float]
    category: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    popularity: np.ndarray  # min-max normalised
    num_categories: int

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        for (src, dst), w in self.edges.items():
            a[src, dst] = w
        return a


def transition_counts(trajectories: list[Trajectory]) -> Counter:
    counts: Counter = Counter()
    for t in trajectories:
        pois = t.pois
        counts.update(zip(pois, pois[1:]))
    return counts


def build_flow_map(train: list[Trajectory], catalog: PoiCatalog, popularity: PopularityStats,
                   edge_weight: str = "count") -> TrajectoryFlowMap:
    if not train:
        raise ValueError("flow map needs a non-empty training split")
    if edge_weight not in EDGE_WEIGHT_MODES:
        raise ValueError(f"edge_weight must be one of {EDGE_WEIGHT_MODES}")
    counts = transition_counts(train)
    pop = popularity.norm
    if edge_weight == "count":
        edges = {e: float(n) for e, n in counts.items()}
    else:
        # zero-popularity endpoints would drop the edge; keep a small floor
        edges = {(a, b): n * max(0.5 * (pop[a] + pop[b]), 1e-3) for (a, b), n in counts.items()}
    return TrajectoryFlowMap(catalog.num_pois, edges, catalog.category.copy(), catalog.lat.copy(),
                             catalog.lon.copy(), np.asarray(pop, dtype=np.float64).copy(),
                             catalog.num_categories)


def node_features(fmap: TrajectoryFlowMap) -> np.ndarray:
    """[one-hot category | popularity | lat | lon], coordinates min-max scaled."""
    n = fmap.num_nodes
    x = np.zeros((n, fmap.num_categories + 3))
    x[np.arange(n), fmap.category] = 1.0
    x[:, -3] = fmap.popularity
    x[:, -2] = minmax(fmap.lat)
    x[:, -1] = minmax(fmap.lon)
    return x


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """(D + I)^-1 (A + I) with D the row-sum (out-degree) diagonal."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise ValueError("adjacency must be non-negative")
    n = a.shape[0]
    deg = a.sum(axis=1)
    return (a + np.eye(n)) / (deg + 1.0)[:, None]


def write_edges_csv(fmap: TrajectoryFlowMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        for (a, b), weight in sorted(fmap.edges.items()):
            w.writerow([a, b, repr(weight)])


def write_nodes_csv(fmap: TrajectoryFlowMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["poi_id", "category_id", "lat", "lon", "popularity_norm"])
        for p in range(fmap.num_nodes):
            w.writerow([p, fmap.category[p], repr(float(fmap.lat[p])), repr(float(fmap.lon[p])),
                        repr(float(fmap.popularity[p]))])
