"""Per-POI popularity blending unique visitors with check-in volume and
recent activity with older activity."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np

from .dataio import DAY, CheckIn, DegenerateDatasetError

RECENT_WINDOW = 90 * DAY


@dataclass(frozen=True)
class PopularityParams:
    alpha: float = 0.5
    beta: float = 0.5
    recent_cutoff: int | None = None  # None: latest check-in minus 90 days

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class PopularityStats:
    user_recent: np.ndarray
    checkin_recent: np.ndarray
    user_past: np.ndarray
    checkin_past: np.ndarray
    raw: np.ndarray
    norm: np.ndarray
    params: PopularityParams
    cutoff: int


def count_visits(checkins: list[CheckIn], num_pois: int, cutoff: int):
    """Unique users and check-ins per POI, split at ``cutoff`` (recent = ts >= cutoff)."""
    checkin_rec = np.zeros(num_pois, dtype=np.int64)
    checkin_past = np.zeros(num_pois, dtype=np.int64)
    users_rec: set[tuple[int, int]] = set()
    users_past: set[tuple[int, int]] = set()
    for c in checkins:
        if c.local_timestamp >= cutoff:
            checkin_rec[c.poi_id] += 1
            users_rec.add((c.poi_id, c.user_id))
        else:
            checkin_past[c.poi_id] += 1
            users_past.add((c.poi_id, c.user_id))
    user_rec = np.zeros(num_pois, dtype=np.int64)
    user_past = np.zeros(num_pois, dtype=np.int64)
    for p, _ in users_rec:
        user_rec[p] += 1
    for p, _ in users_past:
        user_past[p] += 1
    return user_rec, checkin_rec, user_past, checkin_past


def popularity_score(user_rec, checkin_rec, user_past, checkin_past, alpha: float, beta: float):
    recent = alpha * np.asarray(user_rec) + (1.0 - alpha) * np.asarray(checkin_rec)
    past = alpha * np.asarray(user_past) + (1.0 - alpha) * np.asarray(checkin_past)
    return beta * recent + (1.0 - beta) * past


def minmax(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant column maps to 0.5."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def compute_popularity(train_checkins: list[CheckIn], params: PopularityParams,
                       num_pois: int | None = None) -> PopularityStats:
    if not train_checkins:
        raise DegenerateDatasetError("popularity needs at least one training check-in")
    if num_pois is None:
        num_pois = max(c.poi_id for c in train_checkins) + 1
    first = min(c.local_timestamp for c in train_checkins)
    last = max(c.local_timestamp for c in train_checkins)
    cutoff = params.recent_cutoff
    if cutoff is None:
        cutoff = max(first, last - RECENT_WINDOW)
    elif not first <= cutoff <= last:
        raise ValueError(f"recent_cutoff {cutoff} outside training span [{first}, {last}]")
    counts = count_visits(train_checkins, num_pois, cutoff)
    raw = popularity_score(*counts, params.alpha, params.beta)
    return PopularityStats(*counts, raw=raw, norm=minmax(raw), params=params, cutoff=cutoff)


def sweep_grid(train_checkins: list[CheckIn], alphas, betas, recent_cutoff: int | None = None,
               num_pois: int | None = None) -> dict[tuple[float, float], PopularityStats]:
    if not len(alphas) or not len(betas):
        raise ValueError("alpha and beta grids must be non-empty")
    return {(a, b): compute_popularity(train_checkins, PopularityParams(a, b, recent_cutoff), num_pois)
            for a, b in product(alphas, betas)}


def write_popularity_csv(stats: PopularityStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["poi_id", "user_recent", "checkin_recent", "user_past", "checkin_past",
                    "popularity_raw", "popularity_norm"])
        for p in range(len(stats.raw)):
            w.writerow([p, stats.user_recent[p], stats.checkin_recent[p], stats.user_past[p],
                        stats.checkin_past[p], repr(float(stats.raw[p])), repr(float(stats.norm[p]))])
