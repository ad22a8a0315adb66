"""Command-line entry point.

Subcommands: generate (task JSON), simulate (episode logs + results CSV),
train (checkpoint + curves CSV), eval (split metrics, in-situ CSV, or the
core x inputs grid), analyze (config table / decile / window CSVs), serve
(websocket session server). Every artifact embeds the producing command
line; everything is deterministic given --seed.

Environment overrides: DUOCRAFT_OUT (default output directory),
DUOCRAFT_PORT (serve port).
"""

from __future__ import annotations

import argparse
import glob
import os
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from typing import Optional

from .analysis import (
    config_table,
    cubic_fit,
    decile_csv_rows,
    decile_midpoints,
    decile_trend,
    dialogue_window_stats,
    extract_pairs,
    write_csv,
)
from .jsonutil import canonical_dumps
from .recipe import (
    CONFIG_NAMES,
    GameConfig,
    generate_game,
    graph_to_dict,
    material_names,
    tool_names,
)
from .session import read_log, replay, run_episode, write_log

CURVE_FIELDS = [
    "epoch",
    "train_loss",
    "val_f1",
    "val_f1_completed_task",
    "val_f1_player_knowledge",
    "val_f1_current_task",
    "train_acc",
]

GRID_FIELDS = [
    "core",
    "inputs",
    "n_runs",
    "n_test",
    "overall_f1",
    "overall_ci",
    "completed_task_f1",
    "completed_task_ci",
    "player_knowledge_f1",
    "player_knowledge_ci",
    "current_task_f1",
    "current_task_ci",
]


def format_command(argv: list[str]) -> str:
    return "duocraft " + " ".join(shlex.quote(a) for a in argv)


def out_dir(args) -> str:
    path = args.out or os.environ.get("DUOCRAFT_OUT", ".")
    os.makedirs(path, exist_ok=True)
    return path


def load_corpus(logs_dir: str):
    from .beliefnet import episode_features

    paths = sorted(glob.glob(os.path.join(logs_dir, "*.mclog.jsonl")))
    if not paths:
        raise SystemExit(f"no *.mclog.jsonl files under {logs_dir!r}")
    return paths, [episode_features(read_log(p)) for p in paths]


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    out = out_dir(args)
    for i in range(args.episodes):
        config = GameConfig.from_name(args.config, seed=args.seed + i)
        graph, (plan_a, plan_b), tools = generate_game(config)
        doc = {
            "command": args.command_line,
            "config": {"skills": config.skills, "knowledge": config.knowledge},
            "seed": config.seed,
            "graph": graph_to_dict(graph),
            "hidden": {
                "0": sorted(plan_a.hidden),
                "1": sorted(plan_b.hidden),
            },
            "tools": {
                "material_tool": {
                    str(m): t for m, t in sorted(tools.material_tool.items())
                },
                "player_tools": [sorted(ts) for ts in tools.player_tools],
            },
            "names": {
                "materials": material_names(config.V),
                "tools": tool_names(config.T),
            },
        }
        path = os.path.join(out, f"task-{args.config}-{config.seed}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(canonical_dumps(doc) + "\n")
        print(path)
    return 0


# ---------------------------------------------------------------- simulate


def _simulate_one(spec: tuple) -> tuple[str, dict]:
    config_name, seed, out, command = spec
    config = GameConfig.from_name(config_name, seed=seed)
    lines, result = run_episode(config, command=command)
    path = os.path.join(out, f"episode-{config_name}-{seed}.mclog.jsonl")
    write_log(path, lines)
    return path, result.to_dict()


def cmd_simulate(args) -> int:
    out = out_dir(args)
    command = args.command_line
    specs = [
        (args.config, args.seed + i, out, command) for i in range(args.episodes)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_simulate_one, specs))
    else:
        results = [_simulate_one(s) for s in specs]
    rows = []
    for path, result in results:
        row = dict(result)
        row["log"] = os.path.basename(path)
        rows.append(row)
        print(path)
    fields = ["config", "seed", "success", "duration_ms", "ticks",
              "dialogue_exchange_count", "popups", "log"]
    write_csv(os.path.join(out, "results.csv"), fields, rows, command=command)
    return 0


# ------------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .beliefnet import TrainConfig, save_checkpoint, train_model

    out = out_dir(args)
    command = args.command_line
    _, corpus = load_corpus(args.logs)
    config = TrainConfig(
        core=args.core,
        inputs=args.inputs,
        seed=args.seed,
        split_seed=args.split_seed,
        max_epochs=args.epochs,
        patience=args.patience,
    )
    progress = None
    if not args.quiet:
        progress = lambda row: print(
            f"epoch {row['epoch']:3d} loss {row['train_loss']:.4f} "
            f"val_f1 {row['val_f1']:.4f}"
        )
    result = train_model(corpus, config, progress=progress)
    stem = f"model-{args.core}-{args.inputs}-{args.seed}"
    ckpt = os.path.join(out, stem + ".ckpt")
    save_checkpoint(
        ckpt,
        result.model,
        extra={
            "command": command,
            "train": asdict(config),
            "best_epoch": result.best_epoch,
            "val_f1": result.val_f1,
            "split": result.split,
        },
    )
    write_csv(
        os.path.join(out, stem + "-curves.csv"),
        CURVE_FIELDS,
        result.curves,
        command=command,
    )
    print(ckpt)
    return 0


# -------------------------------------------------------------------- eval


def _grid_cell(spec: tuple) -> list[dict]:
    logs_dir, cores, inputs, seeds, level = spec
    _, corpus = load_corpus(logs_dir)
    from .beliefnet import grid_report

    return grid_report(corpus, seeds=seeds, cores=cores, inputs=inputs, level=level)


def cmd_eval(args) -> int:
    from .beliefnet import (
        evaluate_in_situ,
        evaluate_split,
        grid_report,
        in_situ_match_rate,
        load_checkpoint,
    )
    from .beliefnet.train import corpus_instances

    out = out_dir(args)
    command = args.command_line
    paths, corpus = load_corpus(args.logs)

    if args.grid:
        cores = ["rnn", "attn"] if args.core == "all" else [args.core]
        modes = ["d", "v", "dv"] if args.inputs == "all" else [args.inputs]
        seeds = list(range(args.seed, args.seed + args.runs))
        if args.jobs > 1:
            specs = [
                (args.logs, [c], [m], seeds, args.level)
                for c in cores
                for m in modes
            ]
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                rows = [r for part in pool.map(_grid_cell, specs) for r in part]
        else:
            rows = grid_report(
                corpus, seeds=seeds, cores=cores, inputs=modes, level=args.level
            )
        path = os.path.join(out, "grid.csv")
        write_csv(path, GRID_FIELDS, rows, command=command)
        print(path)
        return 0

    if not args.checkpoint:
        raise SystemExit("eval needs --checkpoint unless --grid is given")
    model, extra = load_checkpoint(args.checkpoint)

    if args.in_situ:
        rows = []
        deciles = [[0, 0] for _ in range(10)]
        for path, feats in zip(paths, corpus):
            for player in (0, 1):
                for r in evaluate_in_situ(model, [], player, feats=feats):
                    r = dict(r)
                    r["log"] = os.path.basename(path)
                    r["player"] = player
                    rows.append(r)
                    if r["scored"] and feats.duration_ms:
                        d = min(
                            int(r["asked_at_ms"] / feats.duration_ms * 10), 9
                        )
                        deciles[d][0] += int(r["match"])
                        deciles[d][1] += 1
        fields = ["log", "player", "qid", "qtype", "perspective",
                  "asked_at_ms", "prediction", "partner_answer", "scored",
                  "match"]
        path = os.path.join(out, "insitu.csv")
        write_csv(path, fields, rows, command=command)
        hist = [
            {"decile": d, "matches": m, "total": n,
             "rate": (m / n) if n else ""}
            for d, (m, n) in enumerate(deciles)
        ]
        hist_path = os.path.join(out, "insitu-deciles.csv")
        write_csv(hist_path, ["decile", "matches", "total", "rate"], hist,
                  command=command)
        xs = [x for x, (m, n) in zip(decile_midpoints(), deciles) if n]
        ys = [m / n for m, n in deciles if n]
        fit_rows = []
        if len(xs) >= 4:
            c3, c2, c1, c0 = cubic_fit(xs, ys)
            fit_rows.append({"c3": c3, "c2": c2, "c1": c1, "c0": c0})
        fit_path = os.path.join(out, "insitu-fit.csv")
        write_csv(fit_path, ["c3", "c2", "c1", "c0"], fit_rows,
                  command=command)
        rate = in_situ_match_rate(rows)
        print(f"{path}\n{hist_path}\n{fit_path}\nmatch rate {rate:.4f}")
        return 0

    split = extra.get("split")
    episodes = split["test"] if split else list(range(len(corpus)))
    instances = corpus_instances(corpus, episodes)
    report = evaluate_split(model, corpus, instances)
    rows = [
        {
            "qtype": qtype,
            "n": info["n"],
            "f1": info["f1"],
            "majority_f1": info["majority_f1"],
            "chance": info["chance"],
        }
        for qtype, info in report["types"].items()
    ]
    rows.append({"qtype": "overall", "n": report["n"],
                 "f1": report["overall_f1"], "majority_f1": "", "chance": ""})
    path = os.path.join(out, "eval.csv")
    write_csv(path, ["qtype", "n", "f1", "majority_f1", "chance"], rows,
              command=command)
    print(path)
    return 0


# ------------------------------------------------------------------ analyze


def cmd_analyze(args) -> int:
    out = out_dir(args)
    command = args.command_line
    paths, _ = _log_paths(args.logs)
    logs = [read_log(p) for p in paths]

    if args.check_replay:
        for p, lines in zip(paths, logs):
            replay(lines)

    table = config_table(logs)
    write_csv(
        os.path.join(out, "config-table.csv"),
        list(table[0].keys()) if table else ["config"],
        table,
        command=command,
    )

    pairs = [p for lines in logs for p in extract_pairs(lines)]
    decile_rows = decile_csv_rows(pairs, source=args.logs)
    write_csv(
        os.path.join(out, "deciles.csv"),
        list(decile_rows[0].keys()) if decile_rows else ["qtype"],
        decile_rows,
        command=command,
    )

    trend_rows = []
    for qtype in ("completed_task", "player_knowledge", "current_task"):
        sel = [p for p in pairs if p.qtype == qtype]
        try:
            coeffs, _ = decile_trend(sel)
        except ValueError:
            continue
        trend_rows.append(
            {"qtype": qtype, "c3": coeffs[0], "c2": coeffs[1],
             "c1": coeffs[2], "c0": coeffs[3]}
        )
    write_csv(
        os.path.join(out, "decile-fits.csv"),
        ["qtype", "c3", "c2", "c1", "c0"],
        trend_rows,
        command=command,
    )

    window = dialogue_window_stats(logs)
    window_rows = []
    for qtype, strata in sorted(window.items()):
        for stratum, (before, after) in sorted(strata.items()):
            window_rows.append(
                {"qtype": qtype, "stratum": stratum,
                 "before_mean": before, "after_mean": after}
            )
    write_csv(
        os.path.join(out, "windows.csv"),
        ["qtype", "stratum", "before_mean", "after_mean"],
        window_rows,
        command=command,
    )
    for name in ("config-table", "deciles", "decile-fits", "windows"):
        print(os.path.join(out, name + ".csv"))
    return 0


def _log_paths(logs_dir: str):
    paths = sorted(glob.glob(os.path.join(logs_dir, "*.mclog.jsonl")))
    if not paths:
        raise SystemExit(f"no *.mclog.jsonl files under {logs_dir!r}")
    return paths, None


# -------------------------------------------------------------------- serve


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    port = args.port or int(os.environ.get("DUOCRAFT_PORT", "8000"))
    app = create_app()
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duocraft",
        description="Two-player crafting games with belief-question popups.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes: Optional[int] = None):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory")
        if episodes is not None:
            p.add_argument("--episodes", type=int, default=episodes)

    p = sub.add_parser("generate", help="emit task JSON documents")
    common(p, episodes=1)
    p.add_argument("--config", choices=CONFIG_NAMES, default="shared-shared")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="run scripted episodes to logs")
    common(p, episodes=1)
    p.add_argument("--config", choices=CONFIG_NAMES, default="shared-shared")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a belief model on a log corpus")
    common(p)
    p.add_argument("--logs", required=True, help="directory of *.mclog.jsonl")
    p.add_argument("--core", choices=["rnn", "attn"], default="rnn")
    p.add_argument("--inputs", choices=["d", "v", "dv"], default="dv")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or run the grid")
    common(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--in-situ", action="store_true", dest="in_situ")
    p.add_argument("--grid", action="store_true")
    p.add_argument("--core", choices=["rnn", "attn", "all"], default="all")
    p.add_argument("--inputs", choices=["d", "v", "dv", "all"], default="all")
    p.add_argument("--runs", type=int, default=10,
                   help="seeds per grid cell")
    p.add_argument("--level", type=float, default=0.99)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="write analysis CSVs from logs")
    common(p)
    p.add_argument("--logs", required=True)
    p.add_argument("--check-replay", action="store_true",
                   help="verify determinism of every log first")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="run the websocket session server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    raw = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(raw)
    args.command_line = format_command(raw)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
