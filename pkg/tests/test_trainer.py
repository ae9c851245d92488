import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seaget.checkpoint import parameter_digest
from seaget.dataio import OperationalHoursTable
from seaget.trainer import (
    EvalReport, TrainConfig, baseline_markov, baseline_popularity, evaluate, format_report_table,
    popularity_for, rank_of, report_from_ranks, sweep_alpha_beta, train, write_report_csv,
)

from synth import cyclic_split, random_split

SMALL = dict(poi_dim=8, time_dim=4, season_dim=4, batch_size=16, dropout=0.0, learning_rate=1e-2)


def brute_rank(scores, target):
    """Position of ``target`` after a stable sort by descending score, then ascending id."""
    order = sorted(range(len(scores)), key=lambda p: (-scores[p], p))
    return order.index(target) + 1


def brute_metrics(ranks, ks):
    acc = {k: sum(1 for r in ranks if r <= k) / len(ranks) for k in ks}
    return acc, sum(1.0 / r for r in ranks) / len(ranks)


# ---------------------------------------------------------------------------
# metrics


def test_perfect_ranking():
    rep = report_from_ranks([1, 1, 1])
    assert rep.row() == [1.0, 1.0, 1.0, 1.0, 1.0]


def test_single_rank_three():
    rep = report_from_ranks([3])
    assert rep.acc[1] == 0.0 and rep.acc[5] == 1.0 and abs(rep.mrr - 1 / 3) < 1e-15


def test_ties_break_by_lower_id():
    scores = np.array([1.0, 2.0, 2.0, 0.5])
    assert rank_of(scores, 1) == 1
    assert rank_of(scores, 2) == 2
    assert rank_of(scores, 0) == 3


def test_metrics_match_rank_scan():
    rng = np.random.default_rng(0)
    ranks, oracle = [], []
    for _ in range(1000):
        scores = rng.integers(0, 30, size=100).astype(float)  # integer scores force ties
        target = int(rng.integers(100))
        ranks.append(rank_of(scores, target))
        oracle.append(brute_rank(scores, target))
    assert ranks == oracle
    rep = report_from_ranks(ranks)
    acc, mrr = brute_metrics(oracle, (1, 5, 10, 20))
    assert rep.acc == acc
    # ranks agree exactly; the mean of reciprocals may round differently in the last bit
    assert abs(rep.mrr - mrr) < 1e-14


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
def test_accuracy_monotone_and_mrr_bounds(ranks):
    rep = report_from_ranks(ranks)
    row = [rep.acc[k] for k in (1, 5, 10, 20)]
    assert row == sorted(row)
    assert rep.acc[1] <= rep.mrr <= 1.0


def test_empty_ranks_rejected():
    with pytest.raises(ValueError):
        report_from_ranks([])


def test_report_table_and_csv(tmp_path):
    rep = EvalReport({1: 0.5, 5: 0.75, 10: 1.0, 20: 1.0}, 0.6, 4, alpha=0.5, beta=0.33)
    text = format_report_table([rep], with_params=True)
    assert text.splitlines()[0].split() == ["alpha", "beta", "Acc@1", "Acc@5", "Acc@10", "Acc@20", "MRR"]
    write_report_csv([rep], tmp_path / "r.csv", with_params=True)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][:2] == ["alpha", "beta"] and rows[1][:2] == ["0.5", "0.33"]


# ---------------------------------------------------------------------------
# baselines


def test_markov_on_deterministic_cycle():
    split = cyclic_split(seed=0, n_pois=3)
    assert baseline_markov(split).acc[1] == 1.0


def test_popularity_ignores_prefix():
    split = random_split(seed=1)
    t = split.test[0]
    a = baseline_popularity(split, [t])
    other = type(t)(t.user_id, [split.train[0].checkins[0]] + t.checkins[1:], 0)
    b = baseline_popularity(split, [other])
    assert a == b


def test_markov_matches_count_and_rank_oracle():
    split = random_split(seed=2, n_traj=50)
    counts = {}
    for t in split.train:
        for a, b in zip(t.pois, t.pois[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    # fallback rows use the raw popularity scores
    pop = popularity_for(split, 0.5, 0.5).raw
    ranks = []
    for t in split.test:
        for a, b in zip(t.pois, t.pois[1:]):
            row = [counts.get((a, p), 0) for p in range(split.num_pois)]
            scores = row if any(row) else list(pop)
            ranks.append(brute_rank(scores, b))
    acc, mrr = brute_metrics(ranks, (1, 5, 10, 20))
    rep = baseline_markov(split)
    assert rep.acc == acc and abs(rep.mrr - mrr) < 1e-14


# ---------------------------------------------------------------------------
# training


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)


def test_zero_epochs_returns_initial_model():
    split = random_split(seed=3)
    a = train(TrainConfig(epochs=0, **SMALL), split)
    b = train(TrainConfig(epochs=0, **SMALL), split)
    assert a.log == [] and parameter_digest(a.model) == parameter_digest(b.model)


def test_training_is_deterministic(tmp_path):
    split = random_split(seed=4)
    cfg = TrainConfig(epochs=3, **dict(SMALL, dropout=0.3))
    a = train(cfg, split, workdir=tmp_path)
    b = train(cfg, split)
    assert a.best_val == b.best_val
    assert parameter_digest(a.model) == parameter_digest(b.model)
    assert (tmp_path / "model.ckpt").exists()
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[0][0] == "epoch" and len(rows) == 4


def test_evaluate_leaves_parameters_untouched():
    split = random_split(seed=5)
    res = train(TrainConfig(epochs=1, **SMALL), split)
    before = parameter_digest(res.model)
    evaluate(res.model, split.test)
    evaluate(res.model, split.test, hours=OperationalHoursTable(), catalog=split.catalog)
    assert parameter_digest(res.model) == before


def test_all_open_filter_is_noop():
    split = random_split(seed=6)
    res = train(TrainConfig(epochs=1, **SMALL), split)
    plain = evaluate(res.model, split.test)
    filtered = evaluate(res.model, split.test, hours=OperationalHoursTable(default_open=True), catalog=split.catalog)
    assert plain == filtered


def test_trajectory_granularity_counts_one_per_trajectory():
    split = random_split(seed=7)
    res = train(TrainConfig(epochs=0, **SMALL), split)
    rep = evaluate(res.model, split.test, granularity="trajectory")
    assert rep.count == len([t for t in split.test if len(t) >= 2])
    with pytest.raises(ValueError):
        evaluate(res.model, split.test, granularity="bogus")


@pytest.mark.slow
def test_cyclic_overfit_beats_or_matches_markov():
    split = cyclic_split(seed=0)
    res = train(TrainConfig(epochs=30, seed=0, **SMALL), split)
    assert res.log[-1].train_final < 0.1 * res.log[0].train_final
    seaget = evaluate(res.model, split.test)
    assert seaget.acc[1] >= baseline_markov(split).acc[1] - 1e-12


def test_sweep_single_cell_matches_train_and_evaluate():
    split = random_split(seed=8)
    cfg = TrainConfig(epochs=1, alpha=0.5, beta=0.33, **SMALL)
    (rep,) = sweep_alpha_beta(cfg, split, [0.5], [0.33])
    direct = evaluate(train(cfg, split).model, split.test)
    assert rep.row() == direct.row() and (rep.alpha, rep.beta) == (0.5, 0.33)
    with pytest.raises(ValueError):
        sweep_alpha_beta(cfg, split, [], [0.5])
