"""Evaluation: held-out split metrics, in-situ popup answering, and the
core x inputs grid with confidence intervals over seeds.

In-situ evaluation replaces one player of a finished episode: at every popup
the model answers that player's questions from its own input stream, and the
other-perspective answers are scored against the live partner's paired
self-reports.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np
from scipy import stats

from ..agents import QUESTION_TYPES
from ..analysis import chance_level, majority_baseline_f1_fraction
from ..recipe import material_names
from .features import (
    EpisodeFeatures,
    QuestionInstance,
    answer_to_index,
    episode_features,
    index_to_answer,
    n_classes,
)
from .model import BeliefNet
from .train import TrainConfig, f1_by_type, overall_f1, predict_instances, train_model


def evaluate_split(
    model: BeliefNet,
    corpus: list[EpisodeFeatures],
    instances: list[QuestionInstance],
) -> dict:
    """Per-type weighted F1 with majority and chance baselines."""
    pairs = predict_instances(model, corpus, instances)
    V = model.config.V
    report: dict = {
        "n": len(pairs),
        "overall_f1": overall_f1(pairs, V),
        "types": {},
    }
    per_type = f1_by_type(pairs, V)
    for qtype, f1 in per_type.items():
        y_true = [inst.label for inst, _ in pairs if inst.qtype == qtype]
        k = n_classes(qtype, V)
        report["types"][qtype] = {
            "n": len(y_true),
            "f1": float(f1),
            "majority_f1": float(majority_baseline_f1_fraction(y_true, k)),
            "chance": chance_level(k),
        }
    return report


def in_situ_instances(
    feats: EpisodeFeatures, which_player: int
) -> list[tuple[QuestionInstance, str]]:
    """(instance, live partner's answer) for every popup question asked to
    `which_player` whose pair was fully answered. Other-perspective
    instances carry the partner's self-report as label; self-perspective
    ones are unscored (label -1)."""
    names = material_names(feats.V)
    groups: dict[str, list[dict]] = {}
    for q in feats.questions:
        groups.setdefault(q["group"], []).append(q)
    out = []
    for group in sorted(groups):
        qs = groups[group]
        if len(qs) != 2 or any(q["qid"] not in feats.answers for q in qs):
            continue
        mine = next(q for q in qs if q["asked_to"] == which_player)
        partner_q = next(q for q in qs if q["asked_to"] != which_player)
        partner_answer = feats.answers[partner_q["qid"]]
        scored = mine["perspective"] == "other"
        label = (
            answer_to_index(mine["type"], partner_answer, names, feats.V)
            if scored
            else -1
        )
        inst = QuestionInstance(
            episode=0,
            player=which_player,
            qid=mine["qid"],
            qtype=mine["type"],
            subject=mine["subject"],
            asked_at_ms=mine["asked_at_ms"],
            t_end=mine["asked_at_ms"] // 1000,
            label=label,
            label_text=partner_answer if scored else "",
            perspective=mine["perspective"],
        )
        out.append((inst, partner_answer))
    return out


def evaluate_in_situ(
    model: Optional[BeliefNet],
    lines: list[str],
    which_player: int,
    predictor: Optional[Callable] = None,
    feats: Optional[EpisodeFeatures] = None,
) -> list[dict]:
    """Answer one player's popup questions and score against self-reports.

    `predictor(feats, instances) -> class indices` replaces the model when
    given (stub predictors in tests); otherwise the model runs on the
    reconstructed input stream.
    """
    if feats is None:
        feats = episode_features(lines)
    names = material_names(feats.V)
    with_answers = in_situ_instances(feats, which_player)
    instances = [inst for inst, _ in with_answers]
    partner_answer = {inst.qid: ans for inst, ans in with_answers}
    if predictor is not None:
        pairs = list(zip(instances, predictor(feats, instances)))
    else:
        pairs = predict_instances(model, [feats], instances)
    rows = []
    for inst, pred in pairs:
        prediction = index_to_answer(inst.qtype, pred, names, feats.V)
        scored = inst.perspective == "other"
        rows.append(
            {
                "qid": inst.qid,
                "qtype": inst.qtype,
                "perspective": inst.perspective,
                "asked_at_ms": inst.asked_at_ms,
                "prediction": prediction,
                "partner_answer": partner_answer[inst.qid],
                "scored": scored,
                "match": bool(scored and pred == inst.label),
            }
        )
    rows.sort(key=lambda r: r["qid"])
    return rows


def in_situ_match_rate(rows: list[dict]) -> float:
    scored = [r for r in rows if r["scored"]]
    if not scored:
        return 0.0
    return sum(r["match"] for r in scored) / len(scored)


def confidence_interval(values: list[float], level: float = 0.99) -> tuple[float, float]:
    """(mean, half-width) of the two-sided Student-t interval."""
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    half = float(
        stats.t.ppf(0.5 + level / 2.0, arr.size - 1)
        * arr.std(ddof=1)
        / np.sqrt(arr.size)
    )
    return mean, half


def grid_report(
    corpus: list[EpisodeFeatures],
    seeds: Iterable[int] = range(10),
    cores: Iterable[str] = ("rnn", "attn"),
    inputs: Iterable[str] = ("d", "v", "dv"),
    base: Optional[TrainConfig] = None,
    level: float = 0.99,
) -> list[dict]:
    """Train every (core, inputs) cell once per seed; report test-split F1
    with confidence intervals across seeds."""
    base = base or TrainConfig()
    seeds = list(seeds)
    rows = []
    for core in cores:
        for mode in inputs:
            runs = []
            for seed in seeds:
                config = TrainConfig(
                    core=core,
                    inputs=mode,
                    seed=seed,
                    split_seed=base.split_seed,
                    lr=base.lr,
                    max_epochs=base.max_epochs,
                    patience=base.patience,
                    episodes_per_batch=base.episodes_per_batch,
                )
                result = train_model(corpus, config)
                report = evaluate_split(
                    result.model, corpus, result.instances["test"]
                )
                runs.append(report)
            row: dict = {
                "core": core,
                "inputs": mode,
                "n_runs": len(runs),
                "n_test": runs[0]["n"] if runs else 0,
            }
            mean, half = confidence_interval([r["overall_f1"] for r in runs], level)
            row["overall_f1"] = mean
            row["overall_ci"] = half
            for qtype in QUESTION_TYPES:
                vals = [
                    r["types"][qtype]["f1"] for r in runs if qtype in r["types"]
                ]
                if vals:
                    mean, half = confidence_interval(vals, level)
                    row[f"{qtype}_f1"] = mean
                    row[f"{qtype}_ci"] = half
            rows.append(row)
    return rows
