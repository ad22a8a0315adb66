"""Episode orchestration: ticks, the 75 s paired question protocol, logs, replay.

An episode advances in 250 ms ticks; each tick applies exactly one action
per player (noop when a player supplies nothing). After every full 75 s of
unpaused clock the session pauses and pops up three belief questions per
player, paired across players by (type, subject) with flipped self/other
perspective. The pause freezes the clock and blocks actions until both
players have answered all three questions.

Everything is logged as one canonical JSON object per line. The header line
plus the logged inputs (actions, chats, answers) fully determine the run:
``replay`` re-executes them and must reproduce the byte-identical stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from .agents import (
    COMPLETED_TASK,
    CURRENT_TASK,
    PLAYER_KNOWLEDGE,
    QUESTION_TYPES,
    Question,
    ScriptedAgent,
)
from .jsonutil import canonical_dumps, canonical_line
from .recipe import GameConfig, generate_game, graph_to_dict, material_names
from .seeding import child_seed, substream
from .world import (
    Action,
    advance_clock,
    apply_action,
    noop,
    observe,
    spawn_world,
)

LOG_SUFFIX = ".mclog.jsonl"
POPUP_INTERVAL_MS = 75_000
DEFAULT_STEP_CAP = 10_000
YMN = ("yes", "maybe", "no")


class ReplayDivergence(Exception):
    def __init__(self, index: int, expected: str, got: str):
        super().__init__(f"replay diverged at line {index}")
        self.index = index
        self.expected = expected
        self.got = got


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class GameCore:
    """Sans-IO session state machine shared by headless runs and the server."""

    def __init__(
        self,
        config: GameConfig,
        step_cap: int = DEFAULT_STEP_CAP,
        W: int = 16,
        H: int = 16,
        command: Optional[str] = None,
    ):
        self.config = config
        self.seed = config.seed
        self.step_cap = step_cap
        self.command = command
        self.graph, self.plans, self.tools = generate_game(config)
        self.world = spawn_world(
            self.graph, self.tools, child_seed(self.seed, "spawn"), W=W, H=H
        )
        self.initial_world = self.world
        self.names = material_names(config.V)
        self.events: list[dict] = []
        self.paused = False
        self.ended = False
        self.success = False
        self.tick_index = 0
        self.popups_done = 0
        self.pending: dict[str, Question] = {}
        self.answers: dict[str, str] = {}
        self.prev_subject: dict[str, Optional[int]] = {t: None for t in QUESTION_TYPES}
        self.pending_goal = False

    # ---------------------------------------------------------------- header

    def header(self) -> dict:
        return {
            "type": "header",
            "version": 1,
            "config": {
                "skills": self.config.skills,
                "knowledge": self.config.knowledge,
                "seed": self.config.seed,
                "V": self.config.V,
                "T": self.config.T,
            },
            "graph": graph_to_dict(self.graph),
            "hidden": [sorted(self.plans[0].hidden), sorted(self.plans[1].hidden)],
            "tools": [sorted(self.tools.player_tools[0]), sorted(self.tools.player_tools[1])],
            "world": {"W": self.world.W, "H": self.world.H},
            "step_cap": self.step_cap,
            "command": self.command,
        }

    # ---------------------------------------------------------------- events

    def _emit(self, type_: str, actor: Optional[int], payload: dict) -> dict:
        ev = {
            "ts_ms": self.world.clock_ms,
            "type": type_,
            "actor": actor,
            "payload": payload,
        }
        self.events.append(ev)
        return ev

    # ------------------------------------------------------------------ tick

    def step(self, actions: dict[int, Action]) -> list[dict]:
        """Apply one tick: both players' actions, clock, digests, popup, goal."""
        if self.ended:
            raise RuntimeError("episode already ended")
        if self.paused:
            raise RuntimeError("cannot tick while paused")
        start = len(self.events)
        for player in (0, 1):
            action = actions.get(player) or noop(player)
            if action.actor != player:
                action = Action(
                    action.kind,
                    player,
                    direction=action.direction,
                    material=action.material,
                    text=action.text,
                )
            self.world, evs = apply_action(self.world, action)
            for ev in evs:
                rec = self._emit(ev.type, ev.actor, ev.payload)
                if ev.rejected:
                    rec["rejected"] = True
        self.world = advance_clock(self.world)
        self.tick_index += 1

        if self.world.clock_ms % 1000 == 0:
            for player in (0, 1):
                obs = observe(self.world, player)
                self._emit(
                    "observation-digest",
                    player,
                    {"sha256": _digest(obs.digest_source())},
                )

        if self.world.clock_ms // POPUP_INTERVAL_MS > self.popups_done:
            self._trigger_popup()

        if self.world.goal_reached:
            if self.paused:
                self.pending_goal = True
            else:
                self._finish(True)
        elif self.tick_index >= self.step_cap and not self.paused:
            self._finish(False)
        return self.events[start:]

    def _finish(self, success: bool) -> None:
        if success:
            self._emit("goal", None, {"material": self.graph.goal})
        self._emit(
            "end",
            None,
            {"success": success, "reason": "goal" if success else "step-cap"},
        )
        self.ended = True
        self.success = success

    # ---------------------------------------------------------------- popups

    def _trigger_popup(self) -> None:
        popup = self.popups_done
        self.popups_done += 1
        self.paused = True
        self._emit("pause", None, {"popup": popup})
        rng = substream(self.seed, f"popup:{popup}")
        clock = self.world.clock_ms
        materials = [n.material for n in self.graph.nodes]
        for qtype in QUESTION_TYPES:
            subject = None
            if qtype != CURRENT_TASK:
                pool = [m for m in materials if m != self.prev_subject[qtype]]
                subject = rng.choice(pool)
                self.prev_subject[qtype] = subject
            self_player = rng.randrange(2)
            group = f"p{popup}-{qtype}"
            for player in (0, 1):
                q = Question(
                    qid=f"{group}-{player}",
                    group=group,
                    type=qtype,
                    subject=subject,
                    perspective="self" if player == self_player else "other",
                    asked_to=player,
                    asked_at_ms=clock,
                )
                self.pending[q.qid] = q
                self._emit("question", player, q.to_dict())

    def answer_space(self, q: Question) -> list[str]:
        if q.type == CURRENT_TASK:
            return list(self.names) + ["nothing"]
        return list(YMN)

    def open_questions(self, player: Optional[int] = None) -> list[Question]:
        qs = [
            q
            for qid, q in sorted(self.pending.items())
            if qid not in self.answers and (player is None or q.asked_to == player)
        ]
        return qs

    def submit_answer(self, player: int, qid: str, value: str) -> list[dict]:
        if not self.paused:
            raise RuntimeError("no popup active")
        q = self.pending.get(qid)
        if q is None or q.asked_to != player:
            raise KeyError(f"no open question {qid!r} for player {player}")
        if qid in self.answers:
            raise KeyError(f"question {qid!r} already answered")
        if value not in self.answer_space(q):
            raise ValueError(f"answer {value!r} outside the answer space of {qid!r}")
        start = len(self.events)
        self.answers[qid] = value
        self._emit("answer", player, {"qid": qid, "value": value})
        if all(qid_ in self.answers for qid_ in self.pending):
            self.paused = False
            self.pending.clear()
            self._emit("resume", None, {})
            if self.pending_goal:
                self.pending_goal = False
                self._finish(True)
            elif self.tick_index >= self.step_cap:
                self._finish(False)
        return self.events[start:]

    # ------------------------------------------------------------------ misc

    def log_lines(self) -> list[str]:
        return [canonical_dumps(self.header())] + [
            canonical_dumps(ev) for ev in self.events
        ]


@dataclass
class EpisodeResult:
    config: str
    seed: int
    success: bool
    duration_ms: int
    ticks: int
    dialogue_exchange_count: int
    popups: int
    questions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "success": self.success,
            "duration_ms": self.duration_ms,
            "ticks": self.ticks,
            "dialogue_exchange_count": self.dialogue_exchange_count,
            "popups": self.popups,
        }


def result_from_core(core: GameCore) -> EpisodeResult:
    pairs: dict[str, dict] = {}
    answers = {}
    for ev in core.events:
        if ev["type"] == "question":
            q = ev["payload"]
            pairs.setdefault(
                q["group"],
                {
                    "group": q["group"],
                    "type": q["type"],
                    "subject": q["subject"],
                    "asked_at_ms": q["asked_at_ms"],
                    "perspectives": {},
                },
            )["perspectives"][str(q["asked_to"])] = q["perspective"]
        elif ev["type"] == "answer":
            answers[ev["payload"]["qid"]] = ev["payload"]["value"]
    for group, rec in pairs.items():
        rec["answers"] = {
            p: answers.get(f"{group}-{p}") for p in ("0", "1")
        }
    return EpisodeResult(
        config=core.config.name,
        seed=core.seed,
        success=core.success,
        duration_ms=core.world.clock_ms,
        ticks=core.tick_index,
        dialogue_exchange_count=sum(1 for ev in core.events if ev["type"] == "chat"),
        popups=core.popups_done,
        questions=[pairs[g] for g in sorted(pairs)],
    )


def make_agents(core: GameCore, dawdle: Optional[float] = None) -> tuple[ScriptedAgent, ScriptedAgent]:
    kw = {} if dawdle is None else {"dawdle": dawdle}
    return tuple(
        ScriptedAgent(
            player=i,
            plan=core.plans[i],
            tools=core.tools.player_tools[i],
            initial_world=core.initial_world,
            seed=core.seed,
            **kw,
        )
        for i in (0, 1)
    )


def run_episode(
    config: GameConfig,
    step_cap: int = DEFAULT_STEP_CAP,
    command: Optional[str] = None,
    agent_factory: Callable[[GameCore], tuple] = make_agents,
) -> tuple[list[str], EpisodeResult]:
    """Run one scripted-agent episode headlessly. Returns (log lines, result)."""
    core = GameCore(config, step_cap=step_cap, command=command)
    agents = agent_factory(core)
    inbox: dict[int, list[dict]] = {0: [], 1: []}
    while not core.ended:
        if core.paused:
            for q in core.open_questions():
                value = agents[q.asked_to].answer(q)
                core.submit_answer(q.asked_to, q.qid, value)
            continue
        actions = {}
        observations = {i: observe(core.world, i) for i in (0, 1)}
        for i in (0, 1):
            actions[i] = agents[i].act(observations[i], inbox[i])
            inbox[i] = []
        for ev in core.step(actions):
            if ev["type"] == "chat":
                inbox[0].append(ev)
                inbox[1].append(ev)
            elif ev["type"] == "action":
                inbox[ev["actor"]].append(ev)
    return core.log_lines(), result_from_core(core)


# ----------------------------------------------------------------- replay


def parse_log(lines: list[str]) -> tuple[dict, list[dict]]:
    import json

    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ValueError("first log line is not a header")
    return header, [json.loads(ln) for ln in lines[1:]]


def config_from_header(header: dict) -> GameConfig:
    c = header["config"]
    return GameConfig(
        skills=c["skills"], knowledge=c["knowledge"], seed=c["seed"], V=c["V"], T=c["T"]
    )


def extract_inputs(events: list[dict]) -> list[tuple]:
    """Reduce a log to the externally supplied inputs that drove it."""
    inputs: list[tuple] = []
    tick_buf: dict[int, Action] = {}
    for ev in events:
        if ev["type"] in ("action", "chat"):
            actor = ev["actor"]
            if ev["type"] == "chat":
                action = Action("chat", actor, text=ev["payload"]["text"])
            else:
                action = Action.from_dict(ev["payload"]["action"])
            tick_buf[actor] = action
            if len(tick_buf) == 2:
                inputs.append(("tick", tick_buf[0], tick_buf[1]))
                tick_buf = {}
        elif ev["type"] == "answer":
            inputs.append(("answer", ev["actor"], ev["payload"]["qid"], ev["payload"]["value"]))
    return inputs


def rerun_from_log(lines: list[str]) -> GameCore:
    header, events = parse_log(lines)
    config = config_from_header(header)
    core = GameCore(
        config,
        step_cap=header["step_cap"],
        W=header["world"]["W"],
        H=header["world"]["H"],
        command=header.get("command"),
    )
    for item in extract_inputs(events):
        if item[0] == "tick":
            core.step({0: item[1], 1: item[2]})
        else:
            core.submit_answer(item[1], item[2], item[3])
    return core


def replay(lines: list[str]) -> list[str]:
    """Re-execute a log's inputs; raise ReplayDivergence unless byte-identical."""
    core = rerun_from_log(lines)
    fresh = core.log_lines()
    for i, (a, b) in enumerate(zip(lines, fresh)):
        if a != b:
            raise ReplayDivergence(i, a, b)
    if len(lines) != len(fresh):
        n = min(len(lines), len(fresh))
        raise ReplayDivergence(n, "<length mismatch>", "<length mismatch>")
    return fresh


def write_log(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ln in lines:
            fh.write(ln + "\n")


def read_log(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh]
