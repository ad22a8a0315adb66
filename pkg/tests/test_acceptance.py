"""Release gates, run at the scales the package advertises.

One 300-episode corpus (75 per configuration, fixed seeds) feeds the
protocol, determinism, completeness, temporal, and learning checks; one
full training run backs the margin assertions. Metric checks compare the
production code against independent oracles written here: a forward-chaining
closure for solvability, exact rational arithmetic for weighted F1, and
normal equations for the cubic fits. Everything is seeded, so a failure
reproduces exactly. This is the slow half of the test suite; the corpus and
the training run together take on the order of twenty minutes.
"""

import dataclasses
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from duocraft.agents import QUESTION_TYPES
from duocraft.analysis import (
    chance_level,
    cubic_fit,
    decile_trend,
    extract_pairs,
    fit_derivative_at,
    weighted_f1,
    weighted_f1_fraction,
    window_counts,
)
from duocraft.beliefnet.evaluate import evaluate_split, grid_report
from duocraft.beliefnet.features import (
    EpisodeFeatures,
    Vocabulary,
    episode_features,
    index_to_answer,
    n_classes,
    obs_dim,
    question_instances,
)
from duocraft.beliefnet.gradcheck import check_gradients, max_error
from duocraft.beliefnet.model import (
    BeliefNet,
    ModelConfig,
    make_buckets,
    save_checkpoint,
)
from duocraft.beliefnet.train import TrainConfig, predict_instances, train_model
from duocraft.cli import main
from duocraft.recipe import GameConfig, generate_game, material_names
from duocraft.session import GameCore, parse_log, replay, run_episode, write_log
from duocraft.world import Action

ROTATION = ("shared-shared", "shared-disparate", "disparate-shared",
            "disparate-disparate")
CORPUS_SIZE = 300
CORPUS_SEED = 20000


# ------------------------------------------------------------ shared corpus


@pytest.fixture(scope="module")
def corpus():
    """300 simulated episodes cycling through the four configurations."""
    episodes = []
    for i in range(CORPUS_SIZE):
        cfg = GameConfig.from_name(ROTATION[i % 4], seed=CORPUS_SEED + i)
        t0 = time.perf_counter()
        lines, result = run_episode(cfg)
        episodes.append(
            {
                "name": ROTATION[i % 4],
                "lines": lines,
                "result": result,
                "seconds": time.perf_counter() - t0,
            }
        )
    return episodes


@pytest.fixture(scope="module")
def features(corpus):
    return [episode_features(ep["lines"]) for ep in corpus]


@pytest.fixture(scope="module")
def trained(features):
    """One full training run with the package defaults, and its duration."""
    t0 = time.perf_counter()
    result = train_model(features, TrainConfig())
    return result, time.perf_counter() - t0


@pytest.fixture(scope="module")
def log_dir(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance-logs")
    for i, ep in enumerate(corpus[:100]):
        write_log(str(d / f"episode-{ep['name']}-{i:03d}.mclog.jsonl"),
                  ep["lines"])
    return d


# -------------------------------------------------- generator: 1000 seeds


def forward_chain(graph, known, tools):
    """Independent fixed-point closure; no early exits, no generator code."""
    creatable = set()
    for _ in range(len(graph.nodes) + 1):
        step = set(creatable)
        for node in graph.nodes:
            if node.is_mined:
                if node.tool in tools:
                    step.add(node.material)
            elif node.material in known:
                a, b = known[node.material][0]
                if (
                    a in creatable
                    and b in creatable
                    and graph.tool_of(a) in tools
                    and graph.tool_of(b) in tools
                ):
                    step.add(node.material)
        if step == creatable:
            break
        creatable = step
    return creatable


def combine_count(graph):
    """Independent macro-step oracle: size of the full combine expansion."""

    def cost(mat):
        node = graph.node(mat)
        if node.is_mined:
            return 0
        return 1 + sum(cost(i) for i in node.ingredients)

    return cost(graph.goal)


def test_generator_bounds_and_solvability_over_1000_seeds_per_config():
    t0 = time.perf_counter()
    for name in ROTATION:
        for seed in range(1000):
            graph, plans, tools = generate_game(GameConfig.from_name(name, seed=seed))
            assert 5 <= len(graph.nodes) <= 10, (name, seed)
            assert 7 <= combine_count(graph) <= 11, (name, seed)
            joint_known = dict(plans[0].visible_recipes())
            joint_known.update(plans[1].visible_recipes())
            union = tools.player_tools[0] | tools.player_tools[1]
            assert graph.goal in forward_chain(graph, joint_known, union), (name, seed)
            if name == "disparate-disparate":
                for p in (0, 1):
                    solo = forward_chain(
                        graph, plans[p].visible_recipes(), tools.player_tools[p]
                    )
                    assert graph.goal not in solo, (seed, p)
    assert time.perf_counter() - t0 <= 60.0


# ------------------------------------------- protocol: popups over 100 games


def test_popup_count_is_exactly_unpaused_seconds_div_75(corpus):
    sim_seconds = sum(ep["seconds"] for ep in corpus[:100])
    assert sim_seconds <= 120.0
    total_popups = 0
    for ep in corpus[:100]:
        _, events = parse_log(ep["lines"])
        pauses = [ev for ev in events if ev["type"] == "pause"]
        unpaused_ms = events[-1]["ts_ms"]
        assert len(pauses) == unpaused_ms // 75_000, ep["result"].seed
        total_popups += len(pauses)
    assert total_popups >= 200  # the check above must not be vacuous


def test_every_popup_has_three_complementary_pairs(corpus):
    for ep in corpus[:100]:
        _, events = parse_log(ep["lines"])
        questions = [ev["payload"] for ev in events if ev["type"] == "question"]
        popups = {ev["payload"]["popup"] for ev in events if ev["type"] == "pause"}
        by_group = {}
        for q in questions:
            by_group.setdefault(q["group"], []).append(q)
        assert len(by_group) == 3 * len(popups)
        for k in popups:
            groups = [g for g in by_group if g.startswith(f"p{k}-")]
            assert len(groups) == 3
            assert sum(len(by_group[g]) for g in groups) == 6
        for group, pair in by_group.items():
            assert len(pair) == 2
            assert {q["asked_to"] for q in pair} == {0, 1}
            assert {q["perspective"] for q in pair} == {"self", "other"}
            assert len({q["type"] for q in pair}) == 1
            assert len({q["subject"] for q in pair}) == 1
            assert len({q["asked_at_ms"] for q in pair}) == 1
            if pair[0]["type"] == "current_task":
                assert pair[0]["subject"] is None
            else:
                assert isinstance(pair[0]["subject"], int)


def test_pause_blocks_actions_and_resume_needs_both_players():
    core = GameCore(GameConfig.from_name("disparate-disparate", seed=77),
                    step_cap=10_000)
    noops = {0: Action("noop", 0), 1: Action("noop", 1)}
    while not core.paused:
        core.step(noops)
    with pytest.raises(RuntimeError):
        core.step(noops)
    for q in core.open_questions(0):
        core.submit_answer(0, q.qid, core.answer_space(q)[0])
    assert core.paused  # one player's answers are not enough
    with pytest.raises(RuntimeError):
        core.step(noops)
    for q in core.open_questions(1):
        core.submit_answer(1, q.qid, core.answer_space(q)[0])
    assert not core.paused
    assert core.events[-1]["type"] == "resume"
    core.step(noops)


# ------------------------------------------------------------- determinism


def test_100_logs_replay_byte_identically(corpus):
    for ep in corpus[:100]:
        assert replay(ep["lines"]) == ep["lines"]


def test_analysis_csvs_are_identical_across_reruns(log_dir, tmp_path):
    out = tmp_path / "analysis"
    argv = ["analyze", "--logs", str(log_dir), "--out", str(out)]
    assert main(argv) == 0
    names = ("config-table.csv", "deciles.csv", "decile-fits.csv", "windows.csv")
    first = {n: (out / n).read_bytes() for n in names}
    assert main(argv) == 0
    for n in names:
        assert (out / n).read_bytes() == first[n], n


# ------------------------------------------------------- agent completeness


def test_agents_reach_goal_in_95_percent_of_200_games(corpus):
    results = [ep["result"] for ep in corpus[:200]]
    done = sum(1 for r in results if r.success)
    assert done >= 0.95 * len(results), f"{done}/{len(results)} reached the goal"


def test_disparate_pairs_chat_more_than_shared_pairs(corpus):
    def chat_counts(name):
        picked = [ep for ep in corpus[:200] if ep["name"] == name]
        assert len(picked) == 50
        counts = []
        for ep in picked:
            _, events = parse_log(ep["lines"])
            counts.append(sum(1 for ev in events if ev["type"] == "chat"))
        return counts

    dd = chat_counts("disparate-disparate")
    ss = chat_counts("shared-shared")
    assert np.mean(dd) > np.mean(ss)
    rng = random.Random(1234)
    flips = 0
    draws = 2000
    for _ in range(draws):
        d = np.mean([dd[rng.randrange(50)] for _ in range(50)])
        s = np.mean([ss[rng.randrange(50)] for _ in range(50)])
        if d <= s:
            flips += 1
    assert flips / draws < 0.05


# ------------------------------------------------------------ metric oracles


def rational_f1_oracle(y_true, y_pred, k):
    """Per-class precision/recall with Fractions, then the support-weighted mean."""
    total = Fraction(0)
    n = len(y_true)
    for c in range(k):
        support = sum(1 for t in y_true if t == c)
        if support == 0:
            continue
        predicted = sum(1 for p in y_pred if p == c)
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == p == c)
        precision = Fraction(tp, predicted) if predicted else Fraction(0)
        recall = Fraction(tp, support)
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = Fraction(0)
        total += Fraction(support, n) * f1
    return total


def test_weighted_f1_exactly_matches_rational_oracle():
    rng = np.random.default_rng(2024)
    for k in (3, 22):
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            y_true = rng.integers(0, k, size=n).tolist()
            y_pred = rng.integers(0, k, size=n).tolist()
            ours = weighted_f1_fraction(y_true, y_pred, k)
            assert ours == rational_f1_oracle(y_true, y_pred, k)


def test_cubic_fit_matches_normal_equations_within_1e9():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(8, 30))
        xs = rng.random(n)
        ys = rng.random(n)
        coeffs = cubic_fit(xs, ys)
        X = np.vander(xs, 4)
        beta = np.linalg.solve(X.T @ X, X.T @ ys)
        assert np.max(np.abs(coeffs - beta)) <= 1e-9


def test_dialogue_window_boundaries():
    t = 200_000
    ts = [124_999, 125_000, 199_999, 200_000, 274_999, 275_000]
    # half-open windows: [t-75s, t) before, [t, t+75s) after
    assert window_counts(ts, t) == (2, 2)
    assert window_counts([t], t) == (0, 1)  # exactly-at-t counts after
    assert window_counts([t - 75_000], t) == (1, 0)
    assert window_counts([t - 75_001, t + 75_000], t) == (0, 0)
    assert window_counts([], t) == (0, 0)


# -------------------------------------------------------- model correctness


def tiny_corpus(n_eps=2, n_steps=6, seed=0, V=5, T=3):
    """Synthetic episodes small enough for finite-difference checking."""
    rng = np.random.default_rng(seed)
    names = material_names(V)
    corpus = []
    for e in range(n_eps):
        obs = tuple(
            0.5 * rng.standard_normal((n_steps, obs_dim(V))) for _ in range(2)
        )
        chats = [
            (1_200, 0, "how do i make " + names[3].replace("_", " ") + "?"),
            (2_600, 1, "ok"),
            ((n_steps - 2) * 1000 + 100, 1, "i made " + names[2].replace("_", " ")),
        ]
        plans = tuple(rng.random((4, 3 * V + T)) for _ in range(2))
        questions, answers = [], {}
        for t_end in (2, n_steps - 1):
            for qtype in QUESTION_TYPES:
                subject = (
                    None if qtype == "current_task" else int(rng.integers(0, V))
                )
                self_player = int(rng.integers(0, 2))
                group = f"e{e}-t{t_end}-{qtype}"
                for player in (0, 1):
                    questions.append(
                        {
                            "group": group,
                            "qid": f"{group}-p{player}",
                            "type": qtype,
                            "subject": subject,
                            "asked_to": player,
                            "perspective": "self" if player == self_player else "other",
                            "asked_at_ms": t_end * 1000,
                        }
                    )
                    k = n_classes(qtype, V)
                    answers[f"{group}-p{player}"] = index_to_answer(
                        qtype, int(rng.integers(0, k)), names, V
                    )
        corpus.append(
            EpisodeFeatures(
                config="shared-shared",
                seed=e,
                V=V,
                n_steps=n_steps,
                obs=obs,
                chats=chats,
                plans=plans,
                duration_ms=n_steps * 1000,
                questions=questions,
                answers=answers,
            )
        )
    return corpus


def tiny_instances(corpus):
    names = material_names(corpus[0].V)
    out = []
    for e, feats in enumerate(corpus):
        out.extend(question_instances(feats, e, names))
    return out


@pytest.mark.parametrize("core", ("rnn", "attn"))
def test_gradient_check_max_relative_error_1e4(core):
    corpus = tiny_corpus()
    vocab = Vocabulary.build([text for f in corpus for _, _, text in f.chats])
    config = ModelConfig(V=5, T=3, vocab_size=vocab.size, core=core,
                         inputs="dv", seed=0)
    model = BeliefNet(config, vocab)
    buckets = make_buckets(corpus, tiny_instances(corpus), vocab, config)

    def closure(params):
        loss, grads, _ = model.loss_and_grads(params, buckets)
        return loss, grads

    errors = check_gradients(model.params, closure, eps=1e-4, max_entries=4,
                             rng=np.random.default_rng(11))
    assert set(errors) == set(model.params)
    assert max_error(errors) <= 1e-4, errors


@pytest.mark.parametrize("core", ("rnn", "attn"))
def test_events_after_the_question_leave_logits_bit_identical(core, features):
    feats = features[0]
    names = material_names(feats.V)
    inst = question_instances(feats, 0, names)[0]
    assert inst.t_end + 2 < feats.n_steps
    vocab = Vocabulary.build([text for _, _, text in feats.chats])
    config = ModelConfig(V=feats.V, T=feats.plans[0].shape[1] - 3 * feats.V,
                         vocab_size=vocab.size, core=core, inputs="dv", seed=3)
    model = BeliefNet(config, vocab)
    b1 = make_buckets([feats], [inst], vocab, config)[0]
    logits1, _ = model.bucket_logits(model.params, b1)

    cut = inst.t_end + 1
    tampered_obs = tuple(o.copy() for o in feats.obs)
    for o in tampered_obs:
        o[cut:] += 3.0
    tampered = dataclasses.replace(
        feats,
        obs=tampered_obs,
        chats=feats.chats + [(cut * 1000 + 10, 1, "i made " + names[0])],
    )
    b2 = make_buckets([tampered], [inst], vocab, config)[0]
    assert b1.keys == b2.keys
    logits2, _ = model.bucket_logits(model.params, b2)
    assert len(logits1) == len(logits2) == 1
    assert np.array_equal(logits1[0], logits2[0])


def test_overfit_ten_episodes_to_full_train_accuracy_within_200_epochs(features):
    ten = features[:10]
    config = TrainConfig(max_epochs=200, patience=200,
                         track_train_accuracy=True)
    result = train_model(
        ten, config, split={"train": list(range(10)), "val": [0], "test": [0]}
    )
    accs = [row["train_acc"] for row in result.curves if "train_acc" in row]
    assert accs, "no accuracy curve recorded"
    assert accs[-1] == 1.0, f"best train accuracy {max(accs):.4f} after {len(accs)} epochs"
    assert len(accs) <= 200


# -------------------------------------------------- end-to-end learning signal


def test_trained_model_beats_majority_by_5_points_on_both_belief_types(
    trained, features
):
    result, seconds = trained
    assert seconds <= 35 * 60, f"training took {seconds:.0f}s"
    report = evaluate_split(result.model, features, result.instances["test"])
    for qtype in ("completed_task", "player_knowledge"):
        row = report["types"][qtype]
        assert row["f1"] >= row["majority_f1"] + 0.05, (
            f"{qtype}: f1={row['f1']:.4f} majority={row['majority_f1']:.4f}"
        )


def test_every_configuration_beats_chance_on_every_question_type(
    trained, features
):
    result, _ = trained
    pairs = predict_instances(result.model, features, result.instances["test"])
    V = features[0].V
    for name in ROTATION:
        for qtype in QUESTION_TYPES:
            sel = [
                (inst, pred)
                for inst, pred in pairs
                if features[inst.episode].config == name and inst.qtype == qtype
            ]
            assert sel, (name, qtype)
            k = n_classes(qtype, V)
            f1 = weighted_f1([i.label for i, _ in sel], [p for _, p in sel], k)
            assert f1 > chance_level(k), (
                f"{name}/{qtype}: f1={f1:.4f} chance={chance_level(k):.4f} n={len(sel)}"
            )


def test_grid_report_emits_mean_and_ci_for_every_cell(features):
    rows = grid_report(
        features[:20],
        seeds=(0, 1),
        base=TrainConfig(max_epochs=2, patience=99),
        level=0.99,
    )
    assert [(r["core"], r["inputs"]) for r in rows] == [
        ("rnn", "d"), ("rnn", "v"), ("rnn", "dv"),
        ("attn", "d"), ("attn", "v"), ("attn", "dv"),
    ]
    for row in rows:
        assert row["n_runs"] == 2
        assert 0.0 <= row["overall_f1"] <= 1.0
        assert row["overall_ci"] >= 0.0
        for qtype in QUESTION_TYPES:
            assert f"{qtype}_f1" in row and f"{qtype}_ci" in row


# ------------------------------------------------------- temporal pipeline


def test_player_knowledge_agreement_trend_slope_positive_at_midpoint(corpus):
    pairs = [p for ep in corpus for p in extract_pairs(ep["lines"])]
    pk = [p for p in pairs if p.qtype == "player_knowledge"]
    coeffs, rates = decile_trend(pk)
    assert np.sum(~np.isnan(rates)) >= 4
    slope = fit_derivative_at(coeffs, 0.5)
    assert slope > 0.0, f"midpoint slope {slope:.4f}"


def test_decile_histograms_and_fits_cover_reports_and_predictions(
    corpus, log_dir, trained, tmp_path
):
    from duocraft.analysis import read_csv

    out = tmp_path / "analysis"
    assert main(["analyze", "--logs", str(log_dir), "--out", str(out)]) == 0
    _, decile_rows = read_csv(str(out / "deciles.csv"))
    assert len(decile_rows) == 30  # three question types, ten deciles each
    pairs = [p for ep in corpus[:100] for p in extract_pairs(ep["lines"])]
    for qtype in QUESTION_TYPES:
        rows = [r for r in decile_rows if r["question_type"] == qtype]
        assert [int(r["decile"]) for r in rows] == list(range(10))
        total = sum(int(r["total"]) for r in rows)
        assert total == sum(1 for p in pairs if p.qtype == qtype)
    _, fit_rows = read_csv(str(out / "decile-fits.csv"))
    assert {r["qtype"] for r in fit_rows} <= set(QUESTION_TYPES)
    for r in fit_rows:
        for c in ("c3", "c2", "c1", "c0"):
            float(r[c])

    result, _ = trained
    ckpt = tmp_path / "model.ckpt"
    save_checkpoint(str(ckpt), result.model)
    small = tmp_path / "insitu-logs"
    small.mkdir()
    for i, ep in enumerate(corpus[:12]):
        write_log(str(small / f"episode-{ep['name']}-{i:03d}.mclog.jsonl"),
                  ep["lines"])
    out2 = tmp_path / "insitu"
    assert main(["eval", "--logs", str(small), "--checkpoint", str(ckpt),
                 "--in-situ", "--out", str(out2)]) == 0
    _, hist_rows = read_csv(str(out2 / "insitu-deciles.csv"))
    assert [int(r["decile"]) for r in hist_rows] == list(range(10))
    assert all(int(r["matches"]) <= int(r["total"]) for r in hist_rows)
    _, insitu_fit = read_csv(str(out2 / "insitu-fit.csv"))
    assert len(insitu_fit) == 1
    for c in ("c3", "c2", "c1", "c0"):
        float(insitu_fit[0][c])
