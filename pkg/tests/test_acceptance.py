"""Acceptance criteria, one test each; the terminal summary prints a PASS/FAIL/SKIP line per criterion.

Criteria 2 and 7 need the FourSquare-NYC check-in file; point SEAGET_NYC_PATH at it.
"""

import io
import os
import time
from collections import Counter
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from seaget import numcore as nc
from seaget.cli import main
from seaget.dataio import CheckIn, PoiCatalog, Trajectory, preprocess
from seaget.flowgraph import build_flow_map, normalized_laplacian
from seaget.model import EncoderLayer, encoder_forward, filter_by_mask
from seaget.numcore import Parameter, Rng
from seaget.popularity import PopularityParams, compute_popularity
from seaget.trainer import (
    MarkovScorer, TrainConfig, baseline_markov, baseline_popularity, evaluate, rank_of, report_from_ranks,
    train,
)

from synth import BASE, DAY, HOUR, cyclic_split, micro_model, write_cyclic_log

NYC_PATH = os.environ.get("SEAGET_NYC_PATH")
NYC_TABLE2 = (1075, 5099, 318, 104074, 14160)
GRAD_TOL = 1e-4
GRAD_SEED = 11  # see test_model.GRAD_SEED


def _rng_tensor(rng, *shape, name=None):
    return Parameter(rng.normal(size=shape), name)


def op_cases():
    """(name, params, fn) triples exercising every differentiable primitive."""
    rng = np.random.default_rng(0)
    a = _rng_tensor(rng, 3, 4, name="a")
    b = _rng_tensor(rng, 4, 2, name="b")
    c = _rng_tensor(rng, 3, 4, name="c")
    w = rng.normal(size=(3, 4))
    batched = _rng_tensor(rng, 2, 3, 4, name="batched")
    gain = Parameter(rng.uniform(0.5, 1.5, 4), "gain")
    bias = _rng_tensor(rng, 4, name="bias")
    # keep kinks of the piecewise-linear activations away from the probe points
    kinked = Parameter(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 2.0, (3, 4)), "kinked")
    mask = np.tril(np.ones((4, 4), dtype=bool))[:3]
    targets = np.array([0, 3, 1])
    valid = np.array([True, False, True])
    drop_rng_state = Rng(5, "dropout").get_state()

    def dropped():
        r = Rng(5, "dropout")
        r.set_state(drop_rng_state)
        return nc.dropout(a, 0.3, True, r)

    s = lambda t: nc.reduce_sum(nc.mul(t, w if t.shape == (3, 4) else 1.0))  # noqa: E731
    return [
        ("add", [a, c], lambda: s(nc.add(a, c))),
        ("sub", [a, c], lambda: s(nc.sub(a, c))),
        ("mul", [a, c], lambda: s(nc.mul(a, c))),
        ("matmul", [a, b], lambda: nc.reduce_sum(nc.mul(nc.matmul(a, b), nc.matmul(a, b)))),
        ("batched matmul", [batched, b], lambda: nc.reduce_sum(nc.mul(batched @ b, batched @ b))),
        ("transpose", [a], lambda: nc.reduce_sum(nc.mul(nc.transpose(a), w.T))),
        ("reshape", [a], lambda: nc.reduce_sum(nc.mul(nc.reshape(a, (4, 3)), w.reshape(4, 3)))),
        ("concat", [a, c], lambda: nc.reduce_sum(nc.mul(nc.concat([a, c], axis=1), np.hstack([w, -w])))),
        ("index", [a], lambda: nc.reduce_sum(nc.mul(a[np.array([2, 0, 2])], w))),
        ("sum axis", [a], lambda: nc.reduce_sum(nc.mul(nc.reduce_sum(a, axis=0), np.arange(4.0)))),
        ("mean", [a], lambda: nc.mean(nc.mul(a, a))),
        ("leaky_relu", [kinked], lambda: s(nc.leaky_relu(kinked, 0.2))),
        ("relu", [kinked], lambda: s(nc.relu(kinked))),
        ("sin", [a], lambda: s(nc.sin(a))),
        ("softmax", [a], lambda: s(nc.softmax(a))),
        ("masked softmax", [a], lambda: s(nc.softmax(a, mask))),
        ("layer_norm", [a, gain, bias], lambda: s(nc.layer_norm(a, gain, bias))),
        ("cross_entropy", [a], lambda: nc.cross_entropy(a, targets, valid)),
        ("mse", [c], lambda: nc.mse(nc.reshape(c, (-1,)), w.reshape(-1))),
        ("dropout", [a], lambda: s(dropped())),
    ]


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    worst = {}
    for name, params, fn in op_cases():
        worst[name] = max(nc.gradcheck(fn, params, h=1e-4).values())
    model, batch = micro_model(seed=GRAD_SEED)
    model_errors = nc.gradcheck(lambda: model.loss(batch).total, model.parameters(), h=1e-4)
    worst["micro model"] = max(model_errors.values())
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < GRAD_TOL and elapsed < 60.0
    criterion(1, ok, f"{len(worst) - 1} ops + micro model ({len(model_errors)} tensors), worst relative error "
                     f"{err:.2e} ({name}), {elapsed:.1f}s")


@pytest.mark.nyc
def test_criterion_2_nyc_preprocessing(criterion):
    if not NYC_PATH or not Path(NYC_PATH).is_file():
        criterion(2, None, "SEAGET_NYC_PATH not set to the FourSquare-NYC file")
    tried = []
    for fixed_point in (True, False):
        for span in (DAY, None):
            start = time.perf_counter()
            _, stats = preprocess(NYC_PATH, seed=0, until_fixed_point=fixed_point, max_span=span)
            counts = (stats.users, stats.pois, stats.categories, stats.checkins, stats.trajectories)
            label = f"{'fixed-point' if fixed_point else 'single-pass'}/{'gap+span' if span else 'gap-only'}"
            tried.append(f"{label}: {' '.join(map(str, counts))}")
            elapsed = time.perf_counter() - start
            if counts == NYC_TABLE2:
                criterion(2, elapsed < 60.0, f"{label} matches Table 2 in {elapsed:.1f}s ({'; '.join(tried)})")
                return
    criterion(2, False, "no variant matches 1075 5099 318 104074 14160: " + "; ".join(tried))


def _random_log(rng, n_events, n_users=8, n_pois=15):
    return [CheckIn(int(rng.integers(n_users)), int(rng.integers(n_pois)), 0, 0.0, 0.0,
                    BASE + int(rng.integers(200 * DAY)), 0) for _ in range(n_events)]


def _trajectories(log):
    out = []
    by_user = {}
    for c in log:
        by_user.setdefault(c.user_id, []).append(c)
    for user, cs in sorted(by_user.items()):
        cs.sort(key=lambda c: c.utc_timestamp)
        for i in range(0, len(cs) - 1, 4):
            chunk = cs[i:i + 4]
            if len(chunk) >= 2:
                out.append(Trajectory(user, chunk, len(out)))
    return out


def test_criterion_3_counting_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = []
    for trial in range(100):
        n_pois = 15
        log = _random_log(rng, int(rng.integers(50, 1001)), n_pois=n_pois)
        cutoff = BASE + int(rng.integers(20, 180)) * DAY
        stats = compute_popularity(log, PopularityParams(0.5, 0.5, recent_cutoff=cutoff), n_pois)
        for p in range(n_pois):
            rec = [c for c in log if c.poi_id == p and c.local_timestamp >= cutoff]
            past = [c for c in log if c.poi_id == p and c.local_timestamp < cutoff]
            oracle = (len({c.user_id for c in rec}), len(rec), len({c.user_id for c in past}), len(past))
            got = (stats.user_recent[p], stats.checkin_recent[p], stats.user_past[p], stats.checkin_past[p])
            if tuple(int(x) for x in got) != oracle:
                mismatches.append(f"popularity trial {trial} poi {p}")
        trajs = _trajectories(log)
        pairs = Counter()
        for t in trajs:
            for i in range(len(t.checkins) - 1):
                pairs[(t.checkins[i].poi_id, t.checkins[i + 1].poi_id)] += 1
        catalog = PoiCatalog(np.zeros(n_pois, dtype=int), np.zeros(n_pois), np.zeros(n_pois),
                             np.ones(n_pois, dtype=int), 1)
        fmap = build_flow_map(trajs, catalog, stats)
        if fmap.edges != {k: float(v) for k, v in pairs.items()}:
            mismatches.append(f"flow map trial {trial}")
        table = MarkovScorer(trajs, n_pois, stats.raw).counts
        oracle_table = np.zeros((n_pois, n_pois))
        for (i, j), n in pairs.items():
            oracle_table[i, j] = n
        if not np.array_equal(table, oracle_table):
            mismatches.append(f"markov trial {trial}")
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 60.0
    criterion(3, ok, f"100 logs: {len(mismatches)} mismatches {mismatches[:3]}, {elapsed:.1f}s")


def test_criterion_4_metric_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    ranks, oracle = [], []
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        scores = rng.integers(0, 40, size=n).astype(float)
        target = int(rng.integers(n))
        ranks.append(rank_of(scores, target))
        ordering = sorted(range(n), key=lambda p: (-scores[p], p))
        oracle.append(ordering.index(target) + 1)
    report = report_from_ranks(ranks)
    acc_ok = all(report.acc[k] == sum(r <= k for r in oracle) / len(oracle) for k in (1, 5, 10, 20))
    mrr_oracle = sum(1.0 / r for r in oracle) / len(oracle)
    elapsed = time.perf_counter() - start
    ok = ranks == oracle and acc_ok and abs(report.mrr - mrr_oracle) < 1e-14 and elapsed < 10.0
    criterion(4, ok, f"1000 instances: ranks identical={ranks == oracle}, Acc@k identical={acc_ok}, "
                     f"|dMRR|={abs(report.mrr - mrr_oracle):.1e}, {elapsed:.2f}s")


def test_criterion_5_structural_invariants(criterion):
    rng = np.random.default_rng(11)
    cases = 100
    failures = Counter()
    for _ in range(cases):
        n = int(rng.integers(1, 12))
        a = rng.random((n, n)) * (rng.random((n, n)) < 0.4) * rng.integers(1, 20)
        if np.abs(normalized_laplacian(a).sum(axis=1) - 1.0).max() > 1e-9:
            failures["laplacian"] += 1

        s = rng.normal(scale=rng.uniform(0.1, 50.0), size=(int(rng.integers(1, 6)), int(rng.integers(1, 30))))
        if np.abs(nc.softmax(s).data.sum(axis=-1) - 1.0).max() > 1e-9:
            failures["softmax"] += 1

        k, heads = int(rng.integers(2, 7)), int(rng.choice([1, 2]))
        d = 2 * heads * int(rng.integers(1, 4))
        init = Rng(int(rng.integers(1 << 30)), "init")
        layers = [EncoderLayer.init(init, d, 2 * d, heads, f"e{i}") for i in range(2)]
        x = rng.normal(size=(k, d))
        j = int(rng.integers(1, k))
        x2 = x.copy()
        x2[j:] += rng.normal(size=(k - j, d))
        if not np.array_equal(encoder_forward(x, layers).data[:j], encoder_forward(x2, layers).data[:j]):
            failures["causal"] += 1

        logits = rng.normal(size=20)
        is_open = rng.random(20) < rng.random()
        res = filter_by_mask(logits, is_open)
        if is_open.any():
            exact = np.array_equal(np.isneginf(res.logits), ~is_open) and np.array_equal(res.logits[is_open],
                                                                                       logits[is_open])
        else:
            exact = res.all_closed and np.array_equal(res.logits, logits)
        if not exact:
            failures["filter"] += 1

        rep = report_from_ranks(rng.integers(1, 60, size=int(rng.integers(1, 50))))
        row = [rep.acc[k] for k in (1, 5, 10, 20)]
        if row != sorted(row) or not rep.acc[1] <= rep.mrr <= 1.0:
            failures["monotone"] += 1
    names = ("laplacian", "softmax", "causal", "filter", "monotone")
    criterion(5, not failures, f"{cases} cases each; failures: " + ", ".join(f"{n}={failures[n]}" for n in names))


def test_criterion_6_cyclic_overfit(criterion):
    start = time.perf_counter()
    split = cyclic_split(seed=0)
    config = TrainConfig(epochs=30, poi_dim=32, time_dim=32, season_dim=32, seed=0)
    result = train(config, split)
    seaget = evaluate(result.model, split.test)
    markov = baseline_markov(split)
    elapsed = time.perf_counter() - start
    ok = seaget.acc[1] >= 0.95 and markov.acc[1] == 1.0 and elapsed < 300.0
    criterion(6, ok, f"SEAGET Acc@1 {seaget.acc[1]:.4f}, Markov Acc@1 {markov.acc[1]:.4f}, {elapsed:.1f}s")


@pytest.mark.nyc
@pytest.mark.slow
def test_criterion_7_nyc_desk_run(criterion):
    if not NYC_PATH or not Path(NYC_PATH).is_file():
        criterion(7, None, "SEAGET_NYC_PATH not set to the FourSquare-NYC file")
    split, _ = preprocess(NYC_PATH, seed=0)
    config = TrainConfig(epochs=30, poi_dim=32, time_dim=32, season_dim=32, enc_layers=2, alpha=0.5, beta=0.33)
    result = train(config, split)
    seaget = evaluate(result.model, split.test)
    pop = baseline_popularity(split, alpha=0.5, beta=0.33)
    markov = baseline_markov(split, alpha=0.5, beta=0.33)
    acc = [seaget.acc[k] for k in (1, 5, 10, 20)]
    ok = seaget.acc[1] >= 1.1 * max(pop.acc[1], markov.acc[1]) and acc == sorted(acc)
    criterion(7, ok, f"SEAGET Acc@1 {seaget.acc[1]:.4f} MRR {seaget.mrr:.4f}; popularity {pop.acc[1]:.4f}; "
                     f"Markov {markov.acc[1]:.4f}")


def _recommend(ckpt, *extra):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(["recommend", "--checkpoint", str(ckpt), "--user", "u0", "--trajectory",
                     "p3@2012-04-03T09:00,p4@2012-04-03T10:00", "--at", "2012-04-03T11:00", "--k", "5",
                     *map(str, extra)])
    assert code == 0, err.getvalue()
    return [line.split("\t") for line in out.getvalue().splitlines()[1:]]


def test_criterion_8_filter_behaviour(criterion, tmp_path):
    log = write_cyclic_log(tmp_path / "checkins.tsv")
    work = tmp_path / "work"
    assert main(["preprocess", "--input", str(log), "--workdir", str(work)]) == 0
    assert main(["train", "--workdir", str(work), "--epochs", "2", "--poi-dim", "8", "--time-dim", "4",
                 "--season-dim", "4"]) == 0
    ckpt = work / "model.ckpt"
    start = time.perf_counter()
    plain = _recommend(ckpt)
    top = plain[0][1]
    closing = tmp_path / "closing.csv"
    closing.write_text(f"key_type,key,day_of_week,open_minute,close_minute\npoi,{top},1,0,60\n")
    filtered = _recommend(ckpt, "--hours", closing)
    all_open = tmp_path / "open.csv"
    all_open.write_text("".join(f"poi,p{p},{d},0,1440\n" for p in range(10) for d in range(7)))
    unchanged = _recommend(ckpt, "--hours", all_open)
    elapsed = time.perf_counter() - start
    excluded = top not in [row[1] for row in filtered]
    ok = excluded and unchanged == plain and elapsed < 5.0
    criterion(8, ok, f"top-1 {top} excluded when closed: {excluded}; all-open ranking identical: "
                     f"{unchanged == plain}; {elapsed:.2f}s")
