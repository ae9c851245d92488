"""Check-in log parsing, preprocessing, splitting and operating-hours tables."""

from __future__ import annotations

import calendar
import csv
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .numcore import Rng

log = logging.getLogger(__name__)

DAY = 86400
MINUTES_PER_DAY = 1440
SEASONS = ("winter", "spring", "summer", "autumn")
_MONTHS = {m: i for i, m in enumerate(calendar.month_abbr) if m}


class FormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DegenerateDatasetError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class CheckIn:
    user_id: int
    poi_id: int
    category_id: int
    lat: float
    lon: float
    utc_timestamp: int
    tz_offset: int = 0  # minutes

    @property
    def local_timestamp(self) -> int:
        return self.utc_timestamp + 60 * self.tz_offset


@dataclass
class Trajectory:
    user_id: int
    checkins: list[CheckIn]
    trajectory_id: int = 0

    def __len__(self) -> int:
        return len(self.checkins)

    @property
    def pois(self) -> list[int]:
        return [c.poi_id for c in self.checkins]


@dataclass
class PoiCatalog:
    category: np.ndarray  # int, per poi
    lat: np.ndarray
    lon: np.ndarray
    frequency: np.ndarray  # check-in count per poi
    num_categories: int

    @property
    def num_pois(self) -> int:
        return len(self.category)


@dataclass
class IdMaps:
    users: dict[str, int] = field(default_factory=dict)
    pois: dict[str, int] = field(default_factory=dict)
    categories: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def _dense(table: dict[str, int], raw: str) -> int:
        if raw not in table:
            table[raw] = len(table)
        return table[raw]

    def inverse(self, kind: str) -> dict[int, str]:
        return {v: k for k, v in getattr(self, kind).items()}


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]
    catalog: PoiCatalog
    maps: IdMaps
    num_users: int

    @property
    def num_pois(self) -> int:
        return self.catalog.num_pois

    @property
    def num_categories(self) -> int:
        return self.catalog.num_categories

    def train_checkins(self) -> list[CheckIn]:
        return [c for t in self.train for c in t.checkins]


@dataclass
class ParseResult:
    checkins: list[CheckIn]
    catalog: PoiCatalog
    maps: IdMaps
    malformed: int
    first_malformed_line: int | None


# ---------------------------------------------------------------------------
# parsing


def parse_time(text: str) -> int:
    """'Tue Apr 03 18:00:06 +0000 2012' -> UTC seconds since the epoch."""
    parts = text.split()
    if len(parts) != 6:
        raise ValueError(f"bad timestamp {text!r}")
    _, mon, day, hms, offset, year = parts
    hh, mm, ss = (int(x) for x in hms.split(":"))
    secs = calendar.timegm((int(year), _MONTHS[mon], int(day), hh, mm, ss, 0, 0, 0))
    sign = -1 if offset.startswith("-") else 1
    off = sign * (int(offset[1:3]) * 3600 + int(offset[3:5]) * 60)
    return secs - off


def parse_checkins(path, max_malformed_fraction: float = 0.01) -> ParseResult:
    """Read the 8-column check-in TSV.

    Raw ids are mapped to dense integers in order of first appearance.  Bad
    rows are skipped and counted; more than 1% bad rows is a format error.
    """
    path = Path(path)
    maps = IdMaps()
    rows: list[tuple] = []
    malformed = 0
    first_bad = None
    total = 0
    poi_attrs: dict[int, tuple[int, float, float]] = {}
    # the public FourSquare dumps contain latin-1 venue names
    with open(path, encoding="latin-1", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            total += 1
            cols = line.split("\t")
            try:
                if len(cols) != 8:
                    raise ValueError("expected 8 columns")
                raw_user, raw_poi, raw_cat, _name, lat, lon, tz, utc = cols
                lat, lon, tz = float(lat), float(lon), int(float(tz))
                if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                    raise ValueError("coordinates out of range")
                ts = parse_time(utc)
                if not (raw_user and raw_poi and raw_cat):
                    raise ValueError("empty id")
            except (ValueError, KeyError):
                malformed += 1
                if first_bad is None:
                    first_bad = lineno
                continue
            rows.append((raw_user, raw_poi, raw_cat, lat, lon, tz, ts))

    if total and malformed / total > max_malformed_fraction:
        raise FormatError(f"{malformed} of {total} rows malformed", first_bad)

    checkins = []
    for raw_user, raw_poi, raw_cat, lat, lon, tz, ts in rows:
        u = IdMaps._dense(maps.users, raw_user)
        p = IdMaps._dense(maps.pois, raw_poi)
        c = IdMaps._dense(maps.categories, raw_cat)
        # a venue keeps the category and coordinates of its first check-in
        c, lat, lon = poi_attrs.setdefault(p, (c, lat, lon))
        checkins.append(CheckIn(u, p, c, lat, lon, ts, tz))

    if malformed:
        log.warning("skipped %d malformed rows (first at line %s)", malformed, first_bad)
    return ParseResult(checkins, _catalog_from(checkins, len(maps.pois), len(maps.categories)),
                       maps, malformed, first_bad)


def _catalog_from(checkins: list[CheckIn], num_pois: int, num_categories: int) -> PoiCatalog:
    cat = np.zeros(num_pois, dtype=np.int64)
    lat = np.zeros(num_pois)
    lon = np.zeros(num_pois)
    freq = np.zeros(num_pois, dtype=np.int64)
    for c in checkins:
        cat[c.poi_id] = c.category_id
        lat[c.poi_id] = c.lat
        lon[c.poi_id] = c.lon
        freq[c.poi_id] += 1
    return PoiCatalog(cat, lat, lon, freq, num_categories)


# ---------------------------------------------------------------------------
# preprocessing


def filter_min_activity(checkins: list[CheckIn], min_count: int = 10,
                        until_fixed_point: bool = True) -> list[CheckIn]:
    """Drop POIs and users with fewer than ``min_count`` check-ins.

    With ``until_fixed_point`` the two filters alternate until neither
    removes anything; otherwise a single POI pass then a single user pass.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    current = list(checkins)
    while True:
        poi_counts = Counter(c.poi_id for c in current)
        kept = [c for c in current if poi_counts[c.poi_id] >= min_count]
        user_counts = Counter(c.user_id for c in kept)
        kept = [c for c in kept if user_counts[c.user_id] >= min_count]
        if len(kept) == len(current) or not until_fixed_point:
            current = kept
            break
        current = kept
    if not current:
        raise DegenerateDatasetError("no check-ins survive the activity filter")
    return current


def segment_trajectories(checkins: list[CheckIn], max_gap: int = DAY,
                         max_span: int | None = DAY) -> list[Trajectory]:
    """Cut each user's time-ordered check-ins into trajectories.

    A new trajectory starts when the gap to the previous check-in exceeds
    ``max_gap``, or when ``max_span`` is set and the check-in lies more than
    ``max_span`` after the trajectory's first one.  Single check-ins are
    discarded.
    """
    by_user: dict[int, list[CheckIn]] = defaultdict(list)
    for c in checkins:
        by_user[c.user_id].append(c)
    out: list[Trajectory] = []
    for user in sorted(by_user):
        seq = sorted(by_user[user], key=lambda c: c.local_timestamp)
        run = [seq[0]]
        for prev, cur in zip(seq, seq[1:]):
            gap = cur.local_timestamp - prev.local_timestamp
            span = cur.local_timestamp - run[0].local_timestamp
            if gap > max_gap or (max_span is not None and span > max_span):
                if len(run) >= 2:
                    out.append(Trajectory(user, run, len(out)))
                run = [cur]
            else:
                run.append(cur)
        if len(run) >= 2:
            out.append(Trajectory(user, run, len(out)))
    return out


def split_fractions(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def split_random(trajectories: list[Trajectory], seed: int,
                 fractions=(0.8, 0.1, 0.1)) -> tuple[list[Trajectory], list[Trajectory], list[Trajectory]]:
    """Shuffle trajectories, cut 80/10/10, then drop evaluation trajectories
    that mention a user or POI never seen in training."""
    if len(trajectories) < 10:
        raise DegenerateDatasetError(f"need at least 10 trajectories, got {len(trajectories)}")
    order = Rng(seed, "shuffle").permutation(len(trajectories))
    shuffled = [trajectories[i] for i in order]
    n_train, n_val, _ = split_fractions(len(shuffled), fractions)
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    seen_users = {t.user_id for t in train}
    seen_pois = {c.poi_id for t in train for c in t.checkins}

    def known(t: Trajectory) -> bool:
        return t.user_id in seen_users and all(c.poi_id in seen_pois for c in t.checkins)

    return train, [t for t in val if known(t)], [t for t in test if known(t)]


def remap_to_train(train, val, test, catalog: PoiCatalog, maps: IdMaps) -> DatasetSplit:
    """Re-index users, POIs and categories densely over the training split."""
    user_map: dict[int, int] = {}
    poi_map: dict[int, int] = {}
    for t in train:
        user_map.setdefault(t.user_id, len(user_map))
        for c in t.checkins:
            poi_map.setdefault(c.poi_id, len(poi_map))
    cat_map: dict[int, int] = {}
    for old in poi_map:
        cat_map.setdefault(int(catalog.category[old]), len(cat_map))

    def convert(trajs):
        res = []
        for t in trajs:
            cs = [replace(c, user_id=user_map[c.user_id], poi_id=poi_map[c.poi_id],
                          category_id=cat_map[int(catalog.category[c.poi_id])])
                  for c in t.checkins]
            res.append(Trajectory(user_map[t.user_id], cs, t.trajectory_id))
        return res

    olds = np.array(list(poi_map), dtype=np.int64)
    train_freq = Counter(poi_map[c.poi_id] for t in train for c in t.checkins)
    new_catalog = PoiCatalog(
        category=np.array([cat_map[int(catalog.category[o])] for o in olds], dtype=np.int64),
        lat=catalog.lat[olds].copy(),
        lon=catalog.lon[olds].copy(),
        frequency=np.array([train_freq[i] for i in range(len(olds))], dtype=np.int64),
        num_categories=len(cat_map),
    )
    inv_u, inv_p, inv_c = maps.inverse("users"), maps.inverse("pois"), maps.inverse("categories")
    new_maps = IdMaps(
        users={inv_u[o]: n for o, n in user_map.items()},
        pois={inv_p[o]: n for o, n in poi_map.items()},
        categories={inv_c[o]: n for o, n in cat_map.items()},
    )
    return DatasetSplit(convert(train), convert(val), convert(test), new_catalog, new_maps,
                        num_users=len(user_map))


@dataclass
class PreprocessStats:
    users: int
    pois: int
    categories: int
    checkins: int
    trajectories: int
    malformed: int = 0

    def line(self) -> str:
        return f"{self.users} {self.pois} {self.categories} {self.checkins} {self.trajectories}"


def dataset_stats(checkins: list[CheckIn], trajectories: list[Trajectory]) -> PreprocessStats:
    return PreprocessStats(
        users=len({c.user_id for c in checkins}),
        pois=len({c.poi_id for c in checkins}),
        categories=len({c.category_id for c in checkins}),
        checkins=len(checkins),
        trajectories=len(trajectories),
    )


def preprocess(path, seed: int = 0, min_count: int = 10, until_fixed_point: bool = True,
               max_span: int | None = DAY) -> tuple[DatasetSplit, PreprocessStats]:
    parsed = parse_checkins(path)
    kept = filter_min_activity(parsed.checkins, min_count, until_fixed_point)
    trajs = segment_trajectories(kept, max_span=max_span)
    stats = dataset_stats(kept, trajs)
    stats.malformed = parsed.malformed
    train, val, test = split_random(trajs, seed)
    return remap_to_train(train, val, test, parsed.catalog, parsed.maps), stats


# ---------------------------------------------------------------------------
# seasons and time of day


def assign_season(local_timestamp: int, hemisphere: str = "north") -> int:
    """Meteorological season index: 0 winter, 1 spring, 2 summer, 3 autumn."""
    month = datetime.fromtimestamp(local_timestamp, tz=timezone.utc).month
    season = (month % 12) // 3
    if hemisphere == "south":
        season = (season + 2) % 4
    elif hemisphere != "north":
        raise ValueError(f"unknown hemisphere {hemisphere!r}")
    return season


def time_of_day(local_timestamp: int) -> float:
    """Fraction of the local day elapsed, in [0, 1)."""
    return (local_timestamp % DAY) / DAY


def day_of_week(local_timestamp: int) -> int:
    """0 = Monday."""
    return (local_timestamp // DAY + 3) % 7


# ---------------------------------------------------------------------------
# operating hours


@dataclass
class OperationalHoursTable:
    poi: dict[int, list[list[tuple[int, int]]]] = field(default_factory=dict)
    category: dict[int, list[list[tuple[int, int]]]] = field(default_factory=dict)
    default_open: bool = True

    def add(self, key_type: str, key: int, dow: int, start: int, end: int) -> None:
        table = self.poi if key_type == "poi" else self.category
        days = table.setdefault(key, [[] for _ in range(7)])
        if end <= MINUTES_PER_DAY:
            days[dow].append((start, end))
        else:
            days[dow].append((start, MINUTES_PER_DAY))
            days[(dow + 1) % 7].append((0, end - MINUTES_PER_DAY))

    def normalize(self) -> None:
        for table in (self.poi, self.category):
            for days in table.values():
                for i, spans in enumerate(days):
                    merged: list[tuple[int, int]] = []
                    for s, e in sorted(spans):
                        if merged and s <= merged[-1][1]:
                            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
                        else:
                            merged.append((s, e))
                    days[i] = merged


def load_operational_hours(path, poi_map: dict[str, int] | None = None,
                           category_map: dict[str, int] | None = None,
                           default_open: bool = True) -> OperationalHoursTable:
    """Read ``key_type,key,day_of_week,open_minute,close_minute`` rows.

    Keys are dense ids, or raw ids when the matching map is supplied (rows
    naming ids outside the map are ignored).  ``close_minute`` above 1440
    wraps past midnight into the next day.
    """
    table = OperationalHoursTable(default_open=default_open)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "key_type":
                continue
            try:
                if len(row) != 5:
                    raise ValueError("expected 5 columns")
                key_type, key, dow, start, end = (x.strip() for x in row)
                if key_type not in ("poi", "category"):
                    raise ValueError(f"bad key_type {key_type!r}")
                dow, start, end = int(dow), int(start), int(end)
                if not (0 <= dow <= 6 and 0 <= start < MINUTES_PER_DAY and start < end <= 2 * MINUTES_PER_DAY):
                    raise ValueError("interval out of range")
                mapping = poi_map if key_type == "poi" else category_map
                if mapping is not None:
                    if key not in mapping:
                        continue
                    dense = mapping[key]
                else:
                    dense = int(key)
            except ValueError as exc:
                raise FormatError(str(exc), lineno) from None
            table.add(key_type, dense, dow, start, end)
    table.normalize()
    return table


def is_open(table: OperationalHoursTable, poi_id: int, local_timestamp: int,
            category_id: int | None = None) -> bool:
    dow = day_of_week(local_timestamp)
    minute = (local_timestamp % DAY) // 60
    days = table.poi.get(poi_id)
    if days is None and category_id is not None:
        days = table.category.get(category_id)
    if days is None:
        return table.default_open
    return any(s <= minute < e for s, e in days[dow])


def open_mask(table: OperationalHoursTable, catalog: PoiCatalog, local_timestamp: int) -> np.ndarray:
    return np.array([is_open(table, p, local_timestamp, int(catalog.category[p]))
                     for p in range(catalog.num_pois)], dtype=bool)


# ---------------------------------------------------------------------------
# persistence
#
# <workdir>/train.txt, val.txt, test.txt
#     one trajectory per line: user_id, then tab-separated
#     "poi,category,local_ts,season" tuples
# <workdir>/pois.tsv   poi_id, category_id, lat, lon, frequency
# <workdir>/idmap.tsv  kind, raw_id, dense_id
# <workdir>/meta.json  entity counts and preprocessing statistics


def _write_trajectories(path: Path, trajs: list[Trajectory]) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            cells = [str(t.user_id)]
            cells += [f"{c.poi_id},{c.category_id},{c.local_timestamp},{assign_season(c.local_timestamp)}"
                      for c in t.checkins]
            fh.write("\t".join(cells) + "\n")


def _read_trajectories(path: Path, catalog: PoiCatalog) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            cells = line.rstrip("\n").split("\t")
            if not cells[0]:
                continue
            try:
                user = int(cells[0])
                cs = []
                for cell in cells[1:]:
                    poi, cat, ts, _season = (int(x) for x in cell.split(","))
                    cs.append(CheckIn(user, poi, cat, float(catalog.lat[poi]), float(catalog.lon[poi]), ts, 0))
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path.name}: {exc}", lineno) from None
            out.append(Trajectory(user, cs, len(out)))
    return out


def save_split(split: DatasetSplit, workdir, stats: PreprocessStats | None = None) -> None:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        _write_trajectories(workdir / f"{name}.txt", getattr(split, name))
    cat = split.catalog
    with open(workdir / "pois.tsv", "w") as fh:
        for p in range(cat.num_pois):
            fh.write(f"{p}\t{cat.category[p]}\t{float(cat.lat[p])!r}\t{float(cat.lon[p])!r}\t{cat.frequency[p]}\n")
    with open(workdir / "idmap.tsv", "w") as fh:
        for kind in ("users", "pois", "categories"):
            for raw, dense in sorted(getattr(split.maps, kind).items(), key=lambda kv: kv[1]):
                fh.write(f"{kind}\t{raw}\t{dense}\n")
    meta = {"num_users": split.num_users, "num_pois": cat.num_pois,
            "num_categories": cat.num_categories,
            "sizes": {n: len(getattr(split, n)) for n in ("train", "val", "test")}}
    if stats is not None:
        meta["stats"] = stats.__dict__
    tmp = workdir / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, workdir / "meta.json")


def load_split(workdir) -> DatasetSplit:
    workdir = Path(workdir)
    meta = json.loads((workdir / "meta.json").read_text())
    rows = [line.rstrip("\n").split("\t") for line in open(workdir / "pois.tsv") if line.strip()]
    catalog = PoiCatalog(
        category=np.array([int(r[1]) for r in rows], dtype=np.int64),
        lat=np.array([float(r[2]) for r in rows]),
        lon=np.array([float(r[3]) for r in rows]),
        frequency=np.array([int(r[4]) for r in rows], dtype=np.int64),
        num_categories=int(meta["num_categories"]),
    )
    maps = IdMaps()
    for line in open(workdir / "idmap.tsv"):
        kind, raw, dense = line.rstrip("\n").split("\t")
        getattr(maps, kind)[raw] = int(dense)
    parts = [_read_trajectories(workdir / f"{n}.txt", catalog) for n in ("train", "val", "test")]
    return DatasetSplit(*parts, catalog=catalog, maps=maps, num_users=int(meta["num_users"]))
