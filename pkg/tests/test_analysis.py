"""Analysis oracles: F1 vs brute force, fits vs normal equations, windows."""

import functools
import random
from fractions import Fraction

import numpy as np
import pytest

from duocraft.analysis import (
    DECILES,
    QuestionPair,
    agreement_rate,
    canonical_answer,
    chance_level,
    chat_times,
    config_table,
    confusion_matrix,
    cubic_fit,
    decile_csv_rows,
    decile_histogram,
    decile_midpoints,
    decile_trend,
    dialogue_window_stats,
    extract_pairs,
    fit_derivative_at,
    majority_baseline_f1_fraction,
    read_csv,
    weighted_f1,
    weighted_f1_fraction,
    window_counts,
    write_csv,
)
from duocraft.recipe import GameConfig
from duocraft.session import run_episode


@functools.lru_cache(maxsize=None)
def episode(config, seed):
    skills, knowledge = config.split("-")
    return run_episode(GameConfig(seed=seed, skills=skills, knowledge=knowledge))


def make_pair(qtype="completed_task", pos_ms=10_000, duration_ms=100_000,
              answers=("yes", "yes")):
    return QuestionPair(
        config="shared-shared",
        seed=0,
        group="p0-" + qtype,
        qtype=qtype,
        subject=3,
        asked_at_ms=pos_ms,
        duration_ms=duration_ms,
        answers=answers,
        perspectives=("self", "other"),
    )


# ------------------------------------------------------------- weighted F1


def oracle_weighted_f1(y_true, y_pred, n_labels):
    """Definition-level reimplementation with exact rationals."""
    n = len(y_true)
    total = Fraction(0)
    for c in range(n_labels):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        support = tp + fn
        if support == 0:
            continue
        precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        recall = Fraction(tp, support)
        if precision + recall == 0:
            f1 = Fraction(0)
        else:
            f1 = 2 * precision * recall / (precision + recall)
        total += Fraction(support, n) * f1
    return total


@pytest.mark.parametrize("n_labels", [3, 22])
def test_weighted_f1_matches_oracle_exactly(n_labels):
    rng = random.Random(n_labels)
    for _ in range(300):
        n = rng.randrange(1, 40)
        y_true = [rng.randrange(n_labels) for _ in range(n)]
        y_pred = [rng.randrange(n_labels) for _ in range(n)]
        ours = weighted_f1_fraction(y_true, y_pred, n_labels)
        assert ours == oracle_weighted_f1(y_true, y_pred, n_labels)


def test_weighted_f1_perfect_and_zero():
    assert weighted_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert weighted_f1([0, 0, 0], [1, 1, 1], 3) == 0.0


def test_weighted_f1_handles_empty_class_prediction():
    # class 2 never predicted, class 1 never true
    y_true = [0, 0, 2, 2]
    y_pred = [0, 1, 0, 1]
    assert weighted_f1_fraction(y_true, y_pred, 3) == oracle_weighted_f1(
        y_true, y_pred, 3
    )


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 0], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]
    with pytest.raises(ValueError):
        confusion_matrix([0], [3], 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 3)


def test_majority_baseline_closed_form_equals_direct():
    rng = random.Random(7)
    for _ in range(200):
        n_labels = rng.choice([3, 22])
        n = rng.randrange(1, 50)
        y_true = [rng.randrange(n_labels) for _ in range(n)]
        counts = [y_true.count(c) for c in range(n_labels)]
        mode = counts.index(max(counts))
        direct = weighted_f1_fraction(y_true, [mode] * n, n_labels)
        assert majority_baseline_f1_fraction(y_true, n_labels) == direct


def test_chance_levels():
    assert chance_level(3) == pytest.approx(1 / 3)
    assert chance_level(22) == pytest.approx(1 / 22)


# ------------------------------------------------------------------- fits


def oracle_cubic_fit(xs, ys):
    X = np.vander(np.asarray(xs, dtype=float), 4)  # columns x^3..x^0
    XtX = X.T @ X
    Xty = X.T @ np.asarray(ys, dtype=float)
    return np.linalg.solve(XtX, Xty)


def test_cubic_fit_matches_normal_equations():
    # the fit is always evaluated on the fixed decile-midpoint design
    xs = decile_midpoints()
    rng = np.random.default_rng(0)
    for _ in range(200):
        ys = rng.uniform(0, 1, size=xs.size)
        ours = cubic_fit(xs, ys)
        theirs = oracle_cubic_fit(xs, ys)
        assert np.max(np.abs(ours - theirs)) < 1e-9


def test_cubic_fit_recovers_exact_cubic():
    xs = decile_midpoints()
    true = np.array([2.0, -1.0, 0.5, 0.25])
    ys = np.polyval(true, xs)
    assert np.max(np.abs(cubic_fit(xs, ys) - true)) < 1e-9


def test_fit_derivative():
    coeffs = [2.0, -1.0, 0.5, 0.25]  # 2x^3 - x^2 + 0.5x + 0.25
    x = 0.5
    assert fit_derivative_at(coeffs, x) == pytest.approx(3 * 2 * x * x - 2 * x + 0.5)


def test_decile_trend_positive_slope_on_increasing_rates():
    pairs = []
    for d in range(DECILES):
        pos = int((d + 0.5) * 10_000)
        for i in range(10):
            match = i < d + 1  # agreement rises with progress
            pairs.append(
                make_pair(pos_ms=pos, duration_ms=100_000,
                          answers=("yes", "yes" if match else "no"))
            )
    coeffs, rates = decile_trend(pairs)
    assert fit_derivative_at(coeffs, 0.5) > 0


# ---------------------------------------------------------------- deciles


def test_decile_histogram_buckets_and_clamp():
    pairs = [
        make_pair(pos_ms=0, duration_ms=100_000),
        make_pair(pos_ms=99_999, duration_ms=100_000),
        make_pair(pos_ms=100_000, duration_ms=100_000),  # position 1.0 clamps
        make_pair(pos_ms=50_000, duration_ms=100_000, answers=("yes", "no")),
    ]
    matches, totals = decile_histogram(pairs)
    assert totals[0] == 1 and matches[0] == 1
    assert totals[9] == 2 and matches[9] == 2
    assert totals[5] == 1 and matches[5] == 0
    assert totals.sum() == 4


def test_relative_position_and_match():
    p = make_pair(pos_ms=75_000, duration_ms=300_000, answers=("Yes ", "yes"))
    assert p.relative_position == pytest.approx(0.25)
    assert p.match  # canonicalization ignores case and spacing
    assert canonical_answer("  Cyan   Wool ") == "cyan wool"


# ---------------------------------------------------------------- windows


def test_window_counts_boundaries():
    t = 150_000
    chats = [
        t - 75_000,  # first instant of the before-window
        t - 75_001,  # just outside
        t - 1,       # last instant of the before-window
        t,           # boundary chat counts after, not before
        t + 74_999,  # last instant of the after-window
        t + 75_000,  # just outside
    ]
    assert window_counts(chats, t) == (2, 2)


def test_window_counts_empty():
    assert window_counts([], 75_000) == (0, 0)


def test_dialogue_window_stats_real_logs():
    logs = [episode("disparate-disparate", s)[0] for s in (1, 9)]
    stats = dialogue_window_stats(logs)
    for qtype, strata in stats.items():
        for stratum, (before, after) in strata.items():
            assert before >= 0 and after >= 0


# ------------------------------------------------------------- extraction


def test_extract_pairs_from_episode():
    lines, res = episode("shared-shared", 1)
    pairs = extract_pairs(lines)
    assert len(pairs) == 3 * res.popups
    for p in pairs:
        assert p.config == "shared-shared"
        assert 0 < p.relative_position <= 1
        assert p.qtype in ("completed_task", "player_knowledge", "current_task")
        assert p.perspectives[0] != p.perspectives[1]


def test_agreement_rate_bounds_and_empty():
    lines, _ = episode("shared-shared", 1)
    pairs = extract_pairs(lines)
    r = agreement_rate(pairs)
    assert 0.0 <= r <= 1.0
    assert np.isnan(agreement_rate([]))


def test_chat_times_monotone():
    lines, _ = episode("shared-shared", 1)
    ts = chat_times(lines)
    assert ts == sorted(ts)
    assert all(t % 250 == 0 for t in ts)


# -------------------------------------------------------------- csv + table


def test_config_table_shape():
    logs = [episode(cfg, 1)[0] for cfg in
            ["shared-shared", "disparate-disparate"]]
    rows = config_table(logs)
    assert [r["config"] for r in rows] == ["disparate-disparate", "shared-shared"]
    for row in rows:
        assert row["games"] == 1
        assert row["dialogue_min"] <= row["dialogue_avg"] <= row["dialogue_max"]
        assert row["dialogue_std"] == 0.0  # single game
        assert 0.0 <= row["agreement_overall"] <= 1.0


def test_csv_round_trip_with_comment(tmp_path):
    path = str(tmp_path / "out.csv")
    rows = [{"a": 1, "b": "x"}, {"a": 2, "b": "y, z"}]
    write_csv(path, ["a", "b"], rows, command="duocraft analyze --demo")
    command, back = read_csv(path)
    assert command == "duocraft analyze --demo"
    assert back == [{"a": "1", "b": "x"}, {"a": "2", "b": "y, z"}]
    raw = open(path, "rb").read()
    assert b"\r\n" in raw  # RFC 4180 line endings
    assert raw.startswith(b"# generated-by: ")


def test_csv_without_comment(tmp_path):
    path = str(tmp_path / "plain.csv")
    write_csv(path, ["a"], [{"a": 5}])
    command, back = read_csv(path)
    assert command is None
    assert back == [{"a": "5"}]


def test_decile_csv_rows_shape():
    lines, _ = episode("shared-shared", 1)
    rows = decile_csv_rows(extract_pairs(lines), source="self-report")
    assert len(rows) == 3 * DECILES
    total = sum(r["total"] for r in rows)
    assert total == len(extract_pairs(lines))
    assert {r["source"] for r in rows} == {"self-report"}
