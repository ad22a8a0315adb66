"""Common-ground measurement over episode logs.

Paired popup answers are the unit of analysis: a pair matches when both
players gave the same (canonicalized) answer. Matches are aggregated into
agreement rates, per-decile histograms with cubic trend fits, dialogue
activity windows around each question, a per-configuration summary table,
and support-weighted F1 scores with exact rational arithmetic.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .session import POPUP_INTERVAL_MS, parse_log

DECILES = 10
WINDOW_MS = POPUP_INTERVAL_MS  # 75 s of dialogue context on each side


@dataclass(frozen=True)
class QuestionPair:
    """One popup question asked to both players, with both answers."""

    config: str
    seed: int
    group: str
    qtype: str
    subject: Optional[int]
    asked_at_ms: int
    duration_ms: int
    answers: tuple[str, str]  # player 0, player 1
    perspectives: tuple[str, str]

    @property
    def match(self) -> bool:
        return canonical_answer(self.answers[0]) == canonical_answer(self.answers[1])

    @property
    def relative_position(self) -> float:
        if self.duration_ms <= 0:
            return 0.0
        return self.asked_at_ms / self.duration_ms

    @property
    def decile(self) -> int:
        return min(int(self.relative_position * DECILES), DECILES - 1)


def canonical_answer(value: str) -> str:
    return " ".join(value.strip().lower().split())


def extract_pairs(lines: list[str]) -> list[QuestionPair]:
    """Pull every completed question pair out of one episode log."""
    header, events = parse_log(lines)
    config = f"{header['config']['skills']}-{header['config']['knowledge']}"
    seed = header["config"]["seed"]
    duration_ms = events[-1]["ts_ms"] if events else 0
    questions: dict[str, dict] = {}
    answers: dict[str, str] = {}
    for ev in events:
        if ev["type"] == "question":
            questions[ev["payload"]["qid"]] = ev["payload"]
        elif ev["type"] == "answer":
            answers[ev["payload"]["qid"]] = ev["payload"]["value"]
    groups: dict[str, list[dict]] = {}
    for q in questions.values():
        groups.setdefault(q["group"], []).append(q)
    pairs = []
    for group, qs in sorted(groups.items()):
        if len(qs) != 2:
            continue
        qs.sort(key=lambda q: q["asked_to"])
        if any(q["qid"] not in answers for q in qs):
            continue
        pairs.append(
            QuestionPair(
                config=config,
                seed=seed,
                group=group,
                qtype=qs[0]["type"],
                subject=qs[0]["subject"],
                asked_at_ms=qs[0]["asked_at_ms"],
                duration_ms=duration_ms,
                answers=(answers[qs[0]["qid"]], answers[qs[1]["qid"]]),
                perspectives=(qs[0]["perspective"], qs[1]["perspective"]),
            )
        )
    return pairs


def agreement_rate(pairs: Iterable[QuestionPair], qtype: Optional[str] = None) -> float:
    sel = [p for p in pairs if qtype is None or p.qtype == qtype]
    if not sel:
        return float("nan")
    return sum(p.match for p in sel) / len(sel)


# ------------------------------------------------------------------ deciles


def decile_histogram(pairs: Iterable[QuestionPair]) -> tuple[np.ndarray, np.ndarray]:
    """(matches, totals) per relative-progress decile."""
    matches = np.zeros(DECILES, dtype=int)
    totals = np.zeros(DECILES, dtype=int)
    for p in pairs:
        totals[p.decile] += 1
        matches[p.decile] += p.match
    return matches, totals


def decile_rates(pairs: Iterable[QuestionPair]) -> np.ndarray:
    matches, totals = decile_histogram(pairs)
    with np.errstate(invalid="ignore"):
        return np.where(totals > 0, matches / np.maximum(totals, 1), np.nan)


def cubic_fit(xs: Sequence[float], ys: Sequence[float]) -> np.ndarray:
    """Least-squares cubic, highest power first (as np.polyfit returns)."""
    return np.polyfit(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), 3)


def fit_derivative_at(coeffs: Sequence[float], x: float) -> float:
    a, b, c, _ = coeffs
    return 3 * a * x * x + 2 * b * x + c


def decile_midpoints() -> np.ndarray:
    return (np.arange(DECILES) + 0.5) / DECILES


def decile_trend(pairs: Iterable[QuestionPair]) -> tuple[np.ndarray, np.ndarray]:
    """Cubic fit over the non-empty deciles; returns (coeffs, rates)."""
    rates = decile_rates(pairs)
    xs = decile_midpoints()
    ok = ~np.isnan(rates)
    if ok.sum() < 4:
        raise ValueError("need at least four non-empty deciles for a cubic fit")
    return cubic_fit(xs[ok], rates[ok]), rates


# --------------------------------------------------------- dialogue windows


def chat_times(lines: list[str]) -> list[int]:
    _, events = parse_log(lines)
    return [ev["ts_ms"] for ev in events if ev["type"] == "chat"]


def window_counts(chat_ts: Sequence[int], t: int) -> tuple[int, int]:
    """Chat events in [t-75s, t) and [t, t+75s).

    A chat stamped exactly at the question time belongs to the after-window.
    """
    before = sum(1 for ts in chat_ts if t - WINDOW_MS <= ts < t)
    after = sum(1 for ts in chat_ts if t <= ts < t + WINDOW_MS)
    return before, after


def dialogue_window_stats(
    logs: Iterable[list[str]],
) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean (before, after) chat counts per question type and match stratum."""
    sums: dict[tuple[str, str], list[float]] = {}
    for lines in logs:
        ts = chat_times(lines)
        for p in extract_pairs(lines):
            b, a = window_counts(ts, p.asked_at_ms)
            key = (p.qtype, "match" if p.match else "mismatch")
            rec = sums.setdefault(key, [0.0, 0.0, 0.0])
            rec[0] += b
            rec[1] += a
            rec[2] += 1
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for (qtype, stratum), (b, a, n) in sorted(sums.items()):
        out.setdefault(qtype, {})[stratum] = (b / n, a / n)
    return out


# -------------------------------------------------------------- config table

QUESTION_TYPE_ORDER = ("completed_task", "player_knowledge", "current_task")


def config_table(logs: Iterable[list[str]]) -> list[dict]:
    """Per-configuration summary: dialogue and duration stats plus agreement.

    One row per (skills, knowledge) cell, keyed like "shared-disparate".
    """
    by_config: dict[str, dict] = {}
    for lines in logs:
        header, events = parse_log(lines)
        cfg = f"{header['config']['skills']}-{header['config']['knowledge']}"
        rec = by_config.setdefault(cfg, {"dialogue": [], "duration_s": [], "pairs": []})
        rec["dialogue"].append(sum(1 for ev in events if ev["type"] == "chat"))
        rec["duration_s"].append((events[-1]["ts_ms"] if events else 0) / 1000.0)
        rec["pairs"].extend(extract_pairs(lines))
    rows = []
    for cfg in sorted(by_config):
        rec = by_config[cfg]
        row: dict = {"config": cfg, "games": len(rec["dialogue"])}
        for name, vals in (("dialogue", rec["dialogue"]), ("duration_s", rec["duration_s"])):
            arr = np.asarray(vals, dtype=float)
            row[f"{name}_min"] = float(arr.min())
            row[f"{name}_avg"] = float(arr.mean())
            row[f"{name}_std"] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            row[f"{name}_max"] = float(arr.max())
        for qtype in QUESTION_TYPE_ORDER:
            row[f"agreement_{qtype}"] = agreement_rate(rec["pairs"], qtype)
        row["agreement_overall"] = agreement_rate(rec["pairs"])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------- csv


def write_csv(
    path: str,
    fieldnames: Sequence[str],
    rows: Iterable[dict],
    command: Optional[str] = None,
) -> None:
    """RFC-4180 CSV with a single leading comment line naming the producer."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if command is not None:
            fh.write(f"# generated-by: {command}\r\n")
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: str) -> tuple[Optional[str], list[dict]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        command = None
        if first.startswith("# generated-by: "):
            command = first[len("# generated-by: "):].strip()
            rest = fh.read()
        else:
            rest = first + fh.read()
    reader = csv.DictReader(io.StringIO(rest))
    return command, list(reader)


def decile_csv_rows(
    pairs: Iterable[QuestionPair], source: str
) -> list[dict]:
    """Fig-style rows: per question type and decile, matches/totals/rate."""
    rows = []
    pairs = list(pairs)
    for qtype in QUESTION_TYPE_ORDER:
        sel = [p for p in pairs if p.qtype == qtype]
        matches, totals = decile_histogram(sel)
        for d in range(DECILES):
            rate = matches[d] / totals[d] if totals[d] else ""
            rows.append(
                {
                    "source": source,
                    "question_type": qtype,
                    "decile": d,
                    "matches": int(matches[d]),
                    "total": int(totals[d]),
                    "agreement": rate,
                }
            )
    return rows


# ------------------------------------------------------------- weighted F1


def confusion_matrix(
    y_true: Sequence[int], y_pred: Sequence[int], n_labels: int
) -> np.ndarray:
    """Counts[i, j] = instances with true label i predicted as j."""
    t = np.asarray(y_true, dtype=int)
    p = np.asarray(y_pred, dtype=int)
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred differ in length")
    if t.size and (t.min() < 0 or t.max() >= n_labels or p.min() < 0 or p.max() >= n_labels):
        raise ValueError("label outside [0, n_labels)")
    flat = np.bincount(t * n_labels + p, minlength=n_labels * n_labels)
    return flat.reshape(n_labels, n_labels)


def weighted_f1_fraction(
    y_true: Sequence[int], y_pred: Sequence[int], n_labels: int
) -> Fraction:
    """Support-weighted mean per-class F1 as an exact rational.

    A class with zero precision+recall contributes F1 = 0; classes absent
    from y_true carry zero weight.
    """
    cm = confusion_matrix(y_true, y_pred, n_labels)
    n = int(cm.sum())
    if n == 0:
        raise ValueError("empty label set")
    total = Fraction(0)
    for c in range(n_labels):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        pred_c = int(cm[:, c].sum())
        if support == 0:
            continue
        denom = support + pred_c  # == (tp+fn) + (tp+fp)
        f1 = Fraction(2 * tp, denom) if denom else Fraction(0)
        total += Fraction(support, n) * f1
    return total


def weighted_f1(y_true: Sequence[int], y_pred: Sequence[int], n_labels: int) -> float:
    return float(weighted_f1_fraction(y_true, y_pred, n_labels))


def majority_baseline_f1_fraction(y_true: Sequence[int], n_labels: int) -> Fraction:
    """Weighted F1 of the always-majority predictor, in closed form.

    Only the majority class M scores: P = s_M/N, R = 1, so
    F1_M = 2 s_M / (N + s_M) and the weighted total is
    (s_M / N) * 2 s_M / (N + s_M). Ties break toward the smallest label,
    matching an argmax over bincounts.
    """
    t = np.asarray(y_true, dtype=int)
    if t.size == 0:
        raise ValueError("empty label set")
    counts = np.bincount(t, minlength=n_labels)
    s = int(counts.max())
    n = int(t.size)
    return Fraction(s, n) * Fraction(2 * s, n + s)


def majority_baseline_f1(y_true: Sequence[int], n_labels: int) -> float:
    return float(majority_baseline_f1_fraction(y_true, n_labels))


def chance_level(n_labels: int) -> float:
    return 1.0 / n_labels
