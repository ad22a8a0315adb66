"""Scripted collaborative agents with explicit belief stores.

Each agent plans from its own censored plan view and tool set. Missing
recipes are filled in over chat (ask/inform), and work on materials whose
tool the agent lacks is delegated to the partner. Once recipe knowledge is
complete both agents derive the same combine schedule, anchor every combine
at a deterministic site cell, and resolve duplicate-work races with claim
messages (lower player id wins a simultaneous claim). The belief store
tracks what the agent has done, what it believes the partner has done and
knows, and what the partner is working on; popup questions are answered by
direct lookup in that store.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import chat as ch
from .chat import Grammar, Template
from .recipe import PartialPlan, material_names
from .seeding import substream
from .world import (
    BLOCK,
    DIRECTIONS,
    EMPTY,
    SOURCE,
    STACK,
    Action,
    Observation,
    WorldState,
    _DELTA,
    chat as chat_action,
    hit as hit_action,
    move as move_action,
    noop as noop_action,
    place as place_action,
    turn as turn_action,
)

log = logging.getLogger(__name__)

YES, MAYBE, NO = "yes", "maybe", "no"
NOTHING = "nothing"

COMPLETED_TASK = "completed_task"
PLAYER_KNOWLEDGE = "player_knowledge"
CURRENT_TASK = "current_task"
QUESTION_TYPES = (COMPLETED_TASK, PLAYER_KNOWLEDGE, CURRENT_TASK)

TASK_STALE_MS = 75_000
ASK_RESEND_TICKS = 60
ASK_SPACING_TICKS = 480
ASK_JITTER_TICKS = 240
STALL_ASKDOING_TICKS = 60
ASKDOING_COOLDOWN_TICKS = 120
FORCE_SELF_TICKS = 480
AVOID_TICKS = 8
DAWDLE_P = 0.65


@dataclass
class BeliefStore:
    """Everything the agent believes, queried verbatim by popup answers."""

    known_recipes: dict[int, tuple[tuple[int, int], int]] = field(default_factory=dict)
    partner_knowledge_est: dict[int, str] = field(default_factory=dict)
    completed_self: set[int] = field(default_factory=set)
    completed_partner: dict[int, str] = field(default_factory=dict)
    partner_task: Optional[int] = None
    partner_task_ms: int = -(10 ** 9)
    own_task: Optional[int] = None


@dataclass
class Step:
    c: int  # product
    a: int  # base (stack bottom)
    b: int  # top
    ia: Optional[int]  # schedule index producing a, None if a is mined
    ib: Optional[int]
    site: tuple[int, int] = (0, 0)
    idx: int = 0  # how many earlier steps produce the same material


@dataclass
class Question:
    qid: str
    group: str
    type: str
    subject: Optional[int]
    perspective: str  # self | other
    asked_to: int
    asked_at_ms: int

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "group": self.group,
            "type": self.type,
            "subject": self.subject,
            "perspective": self.perspective,
            "asked_to": self.asked_to,
            "asked_at_ms": self.asked_at_ms,
        }

    @staticmethod
    def from_dict(d: dict) -> "Question":
        return Question(
            qid=d["qid"],
            group=d["group"],
            type=d["type"],
            subject=d["subject"],
            perspective=d["perspective"],
            asked_to=d["asked_to"],
            asked_at_ms=d["asked_at_ms"],
        )


class ScriptedAgent:
    """Deterministic policy + belief tracker for one player."""

    def __init__(
        self,
        player: int,
        plan: PartialPlan,
        tools: frozenset[int],
        initial_world: WorldState,
        seed: int,
        dawdle: float = DAWDLE_P,
    ):
        self.player = player
        self.plan = plan
        self.tools = tools
        self.dawdle = dawdle
        graph = plan.base
        self.goal = graph.goal
        self.V, self.T = graph.V, graph.T
        self.names = material_names(self.V)
        self.grammar = Grammar(self.V, self.T)
        self.rng = substream(seed, f"agent:{player}")
        self.tick = 0
        self.clock_ms = 0

        # walls and sources never move; both agents share this static map
        self.W, self.H = initial_world.W, initial_world.H
        self.static_map = {
            (x, y): initial_world.cell(x, y)
            for y in range(self.H)
            for x in range(self.W)
        }
        self.memory = dict(self.static_map)
        self.source_pos = {
            c.a: xy for xy, c in self.static_map.items() if c.kind == SOURCE
        }
        self.mines = set(self.source_pos)
        self.mines_xy = set(self.source_pos.values())
        self.node_order = [n.material for n in graph.nodes]
        self.tool_of = {n.material: n.tool for n in graph.nodes}

        beliefs = BeliefStore()
        for m, (ings, tool) in plan.visible_recipes().items():
            beliefs.known_recipes[m] = ((ings[0], ings[1]), tool)
        for m in self.node_order:
            if m in self.mines:
                beliefs.partner_knowledge_est[m] = YES
            else:
                # projection prior: assume the partner's view matches mine
                beliefs.partner_knowledge_est[m] = (
                    YES if m in beliefs.known_recipes else MAYBE
                )
        self.beliefs = beliefs

        self.unknown = sorted(
            m for m in self.node_order
            if m not in self.mines and m not in beliefs.known_recipes
        )
        self.outbox: list[Template] = []
        self.asked_recipe_tick: dict[int, int] = {}
        # recipe questions are spread out over the session rather than fired
        # all at once, so knowledge genuinely accumulates across popups
        self.next_ask_tick = self.rng.randrange(ASK_SPACING_TICKS)
        self.schedule: Optional[list[Step]] = None
        self.pointer = 0
        self.base_done = False
        # exact combine accounting: every combine is announced exactly once
        # by whoever performed it, so own-count + heard-count is the true
        # total and both agents agree on it up to chat latency
        self.my_combines: dict[int, int] = {}
        self.heard_done: dict[int, int] = {}
        self.my_claim: Optional[int] = None
        self.partner_claim: Optional[tuple[int, int]] = None  # (material, tick heard)
        self.partner_cannot: set[int] = set()
        self.asked_action_tick: dict[tuple[int, int], int] = {}
        self.last_askdoing_tick = -ASKDOING_COOLDOWN_TICKS
        self.step_started_tick = 0
        self.avoid: dict[tuple[int, int], int] = {}
        self.partner_seen: Optional[tuple[tuple[int, int], int]] = None
        self._zone_cache: Optional[list[tuple[int, int]]] = None
        self.pos = initial_world.agents[player].pos
        self.facing = initial_world.agents[player].facing
        self.inventory: tuple[int, ...] = ()

    # ------------------------------------------------------------------ chat

    def say(self, tpl: Template) -> None:
        self.outbox.append(tpl)

    def _emit_chat(self) -> Action:
        tpl = self.outbox.pop(0)
        variant = self.rng.randrange(ch.N_VARIANTS)
        return chat_action(self.player, self.grammar.render_text(tpl, variant))

    def _claim(self, m: int) -> None:
        if self.my_claim != m:
            self.my_claim = m
            self.beliefs.own_task = m
            self.say(ch.inform_doing(m))

    def knows(self, m: int) -> bool:
        return m in self.mines or m in self.beliefs.known_recipes

    # --------------------------------------------------------------- beliefs

    def handle_events(self, events: list[dict]) -> None:
        """Consume chat events (both speakers) and own action events."""
        for ev in events:
            if ev["type"] == "chat":
                if ev["actor"] != self.player:
                    self._on_partner_chat(ev["payload"]["text"])
            elif ev["type"] == "action" and ev["actor"] == self.player:
                self._on_own_action(ev)

    def _on_own_action(self, ev: dict) -> None:
        payload = ev["payload"]
        if ev.get("rejected"):
            act = payload.get("action", {})
            if act.get("kind") == "move" and payload.get("reason") in ("occupied", "blocked"):
                dx, dy = _DELTA[act["direction"]]
                cell = (self.pos[0] + dx, self.pos[1] + dy)
                self.avoid[cell] = self.tick + AVOID_TICKS
            return
        effect = payload.get("effect", {})
        if "mined" in effect:
            self.beliefs.completed_self.add(effect["mined"])
        combined = effect.get("combined")
        if combined:
            product = combined["product"]
            self.beliefs.completed_self.add(product)
            self.my_combines[product] = self.my_combines.get(product, 0) + 1
            self.say(ch.inform_done(product))
            self._finish_claim(product)
        elif "placed" in effect and self.schedule is not None:
            step = self._current_step()
            if (
                step is not None
                and effect.get("pos") == list(step.site)
                and effect["placed"] == step.a
                and "stacked_on" not in effect
            ):
                self.base_done = True
                # only announce when we truly made the material ourselves;
                # a recycled junk block is the partner's work, not ours
                if step.a in self.beliefs.completed_self:
                    self.say(ch.inform_done(step.a))
                self._finish_claim(step.a)

    def _finish_claim(self, m: int) -> None:
        if self.my_claim == m:
            self.my_claim = None
        if self.beliefs.own_task == m:
            self.beliefs.own_task = None

    def _on_partner_chat(self, text: str) -> None:
        tpl = self.grammar.parse_text(text)
        if tpl is None:
            log.debug("player %d could not parse chat %r", self.player, text)
            return
        b = self.beliefs
        if tpl.kind == "ask_recipe":
            b.partner_knowledge_est[tpl.m] = NO
            rec = b.known_recipes.get(tpl.m)
            if rec:
                (x, y), tool = rec
                self.say(ch.inform_recipe(tpl.m, x, y, tool))
            elif tpl.m in self.mines:
                self.say(ch.ack())
            else:
                self.say(ch.inform_cannot(tpl.m, ch.NO_KNOWLEDGE))
        elif tpl.kind == "inform_recipe":
            if tpl.m not in b.known_recipes:
                b.known_recipes[tpl.m] = ((tpl.a, tpl.b), tpl.tool)
                self.say(ch.ack())
            b.partner_knowledge_est[tpl.m] = YES
            if tpl.m in self.unknown:
                self.unknown.remove(tpl.m)
        elif tpl.kind == "ask_action":
            self.partner_cannot.add(tpl.m)
            if self.tool_of.get(tpl.m) in self.tools:
                self.say(ch.ack())
            else:
                self.say(ch.inform_cannot(tpl.m, ch.NO_TOOL))
        elif tpl.kind == "ask_doing":
            if b.own_task is not None:
                self.say(ch.inform_doing(b.own_task))
            else:
                self.say(ch.ack())
        elif tpl.kind == "inform_doing":
            b.partner_task = tpl.m
            b.partner_task_ms = self.clock_ms
            if self.my_claim == tpl.m:
                if self.player > 0:
                    # simultaneous claim: lower id wins, we yield
                    self.my_claim = None
                    b.own_task = None
                    self.partner_claim = (tpl.m, self.tick)
                # player 0 keeps the claim; the partner yields symmetrically
            else:
                self.partner_claim = (tpl.m, self.tick)
        elif tpl.kind == "inform_done":
            b.completed_partner[tpl.m] = YES
            if tpl.m not in self.mines:
                # a done message about a craftable is always a combine report
                b.partner_knowledge_est[tpl.m] = YES
                self.heard_done[tpl.m] = self.heard_done.get(tpl.m, 0) + 1
            if self.partner_claim and self.partner_claim[0] == tpl.m:
                self.partner_claim = None
            if b.partner_task == tpl.m:
                b.partner_task_ms = self.clock_ms
            step = self._current_step()
            if (
                step is not None
                and tpl.m in self.mines
                and tpl.m == step.a
                and step.ia is None
            ):
                self.base_done = True
        elif tpl.kind == "inform_cannot":
            self.partner_cannot.add(tpl.m)
            if tpl.reason == ch.NO_KNOWLEDGE:
                b.partner_knowledge_est[tpl.m] = NO

    def observe_update(self, obs: Observation) -> None:
        self.clock_ms = obs.clock_ms
        self.pos = obs.own.pos
        self.facing = obs.own.facing
        self.inventory = obs.own.inventory
        b = self.beliefs
        prev = {}
        for x, y, cell in obs.visible_cells:
            prev[(x, y)] = self.memory.get((x, y))
            self.memory[(x, y)] = cell

        if obs.partner_visible:
            self.partner_seen = (obs.partner_pos, self.tick)
            if obs.partner_last_action is not None:
                self._witness_partner(obs, prev)

        # a block appearing with no known producer: someone made it, maybe
        for (x, y), before in prev.items():
            now = self.memory[(x, y)]
            for m in _cell_materials(now):
                if m in _cell_materials(before):
                    continue
                if m in b.completed_self:
                    continue
                if b.completed_partner.get(m) != YES:
                    b.completed_partner[m] = MAYBE

    def _witness_partner(self, obs: Observation, prev: dict) -> None:
        b = self.beliefs
        pa = obs.partner_last_action
        px, py = obs.partner_pos
        fd = _DELTA.get(obs.partner_facing)
        if fd is None:
            return
        target = (px + fd[0], py + fd[1])
        cell_now = None
        for x, y, cell in obs.visible_cells:
            if (x, y) == target:
                cell_now = cell
                break
        if cell_now is None:
            return
        if pa.kind == "hit" and cell_now.kind == SOURCE:
            # the attempt is visible but its success is not (the cell stays a
            # source either way), so this is only Maybe-strength evidence
            if b.completed_partner.get(cell_now.a) != YES:
                b.completed_partner[cell_now.a] = MAYBE
            b.partner_task = cell_now.a
            b.partner_task_ms = self.clock_ms
        elif pa.kind == "place" and pa.material is not None:
            before = prev.get(target)
            if (
                before is not None
                and before.kind == BLOCK
                and cell_now.kind == BLOCK
                and cell_now.a != before.a
            ):
                rec = b.known_recipes.get(cell_now.a)
                pair = tuple(sorted((before.a, pa.material)))
                if rec and tuple(sorted(rec[0])) == pair:
                    product = cell_now.a
                    b.completed_partner[product] = YES
                    b.partner_knowledge_est[product] = YES
                    b.partner_task = product
                    b.partner_task_ms = self.clock_ms

    # ------------------------------------------------------------- questions

    def answer(self, q: Question) -> str:
        b = self.beliefs
        if q.type == COMPLETED_TASK:
            if q.perspective == "self":
                return YES if q.subject in b.completed_self else NO
            return b.completed_partner.get(q.subject, NO)
        if q.type == PLAYER_KNOWLEDGE:
            if q.perspective == "self":
                return YES if self.knows(q.subject) else NO
            return b.partner_knowledge_est.get(q.subject, MAYBE)
        if q.type == CURRENT_TASK:
            if q.perspective == "self":
                return NOTHING if b.own_task is None else self.names[b.own_task]
            if (
                b.partner_task is not None
                and q.asked_at_ms - b.partner_task_ms <= TASK_STALE_MS
            ):
                return self.names[b.partner_task]
            return NOTHING
        raise ValueError(f"unknown question type {q.type}")

    # ------------------------------------------------------------- schedule

    def zone_cells(self) -> list[tuple[int, int]]:
        """Deterministic combine sites derived from the static map only,
        so both agents compute the identical list."""
        if self._zone_cache is not None:
            return self._zone_cache
        cx, cy = self.W // 2, self.H // 2
        cands = []
        for (x, y), cell in self.static_map.items():
            # both-even lattice keeps sites two cells apart so filled sites
            # can never wall an agent (or each other) in
            if cell.kind != EMPTY or x % 2 != 0 or y % 2 != 0:
                continue
            if any(
                self.static_map.get((x + dx, y + dy)) is not None
                and self.static_map[(x + dx, y + dy)].kind == SOURCE
                for dx, dy in _DELTA.values()
            ):
                continue
            d = max(abs(x - cx), abs(y - cy))
            cands.append((d, y, x))
        cands.sort()
        self._zone_cache = [(x, y) for _, y, x in cands]
        return self._zone_cache

    def _build_schedule(self) -> list[Step]:
        recs = self.beliefs.known_recipes
        steps: list[Step] = []

        def expand(m: int) -> Optional[int]:
            if m in self.mines:
                return None
            (a, b), _ = recs[m]
            ia = expand(a)
            ib = expand(b)
            steps.append(Step(c=m, a=a, b=b, ia=ia, ib=ib))
            return len(steps) - 1

        expand(self.goal)
        zones = self.zone_cells()
        fresh = 0
        seen: dict[int, int] = {}
        for step in steps:
            step.idx = seen.get(step.c, 0)
            seen[step.c] = step.idx + 1
            if step.ia is not None:
                step.site = steps[step.ia].site
            else:
                step.site = zones[fresh]
                fresh += 1
        return steps

    def _current_step(self) -> Optional[Step]:
        if self.schedule is None or self.pointer >= len(self.schedule):
            return None
        return self.schedule[self.pointer]

    def _step_forward(self) -> None:
        self.pointer += 1
        self.base_done = False
        if self.my_claim is not None:
            self._finish_claim(self.my_claim)
        self.step_started_tick = self.tick

    def _done_count(self, m: int) -> int:
        return self.my_combines.get(m, 0) + self.heard_done.get(m, 0)

    def _advance_if_done(self) -> None:
        while True:
            step = self._current_step()
            if step is None:
                return
            if self._done_count(step.c) > step.idx:
                self._step_forward()
                continue
            return

    # ------------------------------------------------------------ navigation

    def _passable(self, cell_xy: tuple[int, int]) -> bool:
        cell = self.memory.get(cell_xy)
        if cell is None or cell.kind != EMPTY:
            return False
        exp = self.avoid.get(cell_xy)
        if exp is not None and exp > self.tick:
            return False
        if self.partner_seen and self.tick - self.partner_seen[1] <= 4:
            if cell_xy == self.partner_seen[0]:
                return False
        return True

    def _bfs_step(self, goals: set[tuple[int, int]]) -> Optional[str]:
        """Direction of the first move on a shortest path to any goal cell."""
        if self.pos in goals:
            return None
        came: dict[tuple[int, int], tuple[int, int]] = {self.pos: self.pos}
        dq = deque([self.pos])
        found = None
        while dq and found is None:
            cur = dq.popleft()
            for d in DIRECTIONS:
                dx, dy = _DELTA[d]
                nxt = (cur[0] + dx, cur[1] + dy)
                if nxt in came:
                    continue
                came[nxt] = cur
                if nxt in goals and self._passable(nxt):
                    found = nxt
                    break
                if self._passable(nxt):
                    dq.append(nxt)
        if found is None:
            return None
        node = found
        while came[node] != self.pos:
            node = came[node]
        return _dir_from_to(self.pos, node)

    def _goto_adjacent_and(self, target: tuple[int, int], action_on_face: Action) -> Action:
        """Stand next to the target cell, face it, then perform the action."""
        if _manhattan(self.pos, target) == 1:
            want = _dir_from_to(self.pos, target)
            if self.facing == want:
                return action_on_face
            return turn_action(self.player, want)
        adj = {
            (target[0] + dx, target[1] + dy)
            for dx, dy in _DELTA.values()
            if self._passable((target[0] + dx, target[1] + dy))
        }
        if adj:
            d = self._bfs_step(adj)
            if d is not None:
                return move_action(self.player, d)
        return self._wander()

    def _wander(self) -> Action:
        dirs = [
            d
            for d in DIRECTIONS
            if self._passable((self.pos[0] + _DELTA[d][0], self.pos[1] + _DELTA[d][1]))
        ]
        if dirs and self.rng.random() < 0.8:
            return move_action(self.player, self.rng.choice(dirs))
        return turn_action(self.player, self.rng.choice(DIRECTIONS))

    def _is_zone(self, xy: tuple[int, int]) -> bool:
        return self.schedule is not None and any(s.site == xy for s in self.schedule)

    def _wait_near(self, site: tuple[int, int]) -> Action:
        """Park two cells from the site, facing it, so it stays in view."""
        dist = max(abs(self.pos[0] - site[0]), abs(self.pos[1] - site[1]))
        crowding = (
            self.partner_seen is not None
            and self.tick - self.partner_seen[1] <= 2
            and _manhattan(self.pos, self.partner_seen[0]) == 1
        )
        if dist == 2 and not self._is_zone(self.pos) and not crowding:
            want = _dir_from_to_rough(self.pos, site)
            if self.facing != want:
                return turn_action(self.player, want)
            return noop_action(self.player)
        spots = set()
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                if max(abs(dx), abs(dy)) != 2:
                    continue
                cand = (site[0] + dx, site[1] + dy)
                if self._passable(cand) and not self._is_zone(cand):
                    spots.add(cand)
        if spots:
            d = self._bfs_step(spots)
            if d is not None:
                return move_action(self.player, d)
        return self._wander()

    # ----------------------------------------------------------------- act

    def act(self, obs: Observation, events: list[dict]) -> Action:
        self.tick += 1
        self.handle_events(events)
        self.observe_update(obs)
        if self.schedule is not None:
            self._advance_if_done()

        if self.outbox:
            return self._emit_chat()

        # unhurried play: idle or meander between purposeful actions so an
        # episode spans several question popups, like a human-paced game
        if self.dawdle > 0 and self.rng.random() < self.dawdle:
            if self.rng.random() < 0.5:
                return self._wander()
            return noop_action(self.player)

        if self.unknown:
            return self._sync_phase()

        if self.schedule is None:
            self.schedule = self._build_schedule()
            self.pointer = 0
            self.base_done = False
            self.step_started_tick = self.tick
            self._advance_if_done()

        step = self._current_step()
        if step is None:
            self.beliefs.own_task = None
            return self._wait_near(self.zone_cells()[0])

        return self._work_step(step)

    def _sync_phase(self) -> Action:
        if self.tick >= self.next_ask_tick:
            for m in self.unknown:
                last = self.asked_recipe_tick.get(m)
                if last is None or self.tick - last >= ASK_RESEND_TICKS:
                    self.asked_recipe_tick[m] = self.tick
                    self.next_ask_tick = (
                        self.tick
                        + ASK_SPACING_TICKS
                        + self.rng.randrange(ASK_JITTER_TICKS)
                    )
                    self.say(ch.ask_recipe(m))
                    return self._emit_chat()
        if self.tick % 8 == 0:
            return turn_action(
                self.player, DIRECTIONS[(DIRECTIONS.index(self.facing) + 1) % 4]
            )
        return noop_action(self.player)

    def _work_step(self, step: Step) -> Action:
        cell = self.memory.get(step.site)

        # junk stack on the site: whoever holds the top's tool peels it off
        if cell is not None and cell.kind == STACK:
            if self.tool_of.get(cell.b) in self.tools:
                if len(self.inventory) >= 4:
                    return self._discard(None)
                return self._goto_adjacent_and(step.site, hit_action(self.player))
            return self._wait_near(step.site)

        if step.ia is not None:
            # chained site: the combine that made the base left it in place
            self.base_done = True
        elif cell is not None and cell.kind == BLOCK and cell.a == step.a:
            self.base_done = True

        if not self.base_done:
            return self._duty(step, step.a, role="base")
        return self._duty(step, step.b, role="top")

    def _duty(self, step: Step, mat: int, role: str) -> Action:
        k = self.pointer
        have_tool = self.tool_of[mat] in self.tools
        claim_mat = step.a if role == "base" else step.c

        if not have_tool:
            key = (k, mat)
            last = self.asked_action_tick.get(key)
            if last is None or self.tick - last >= FORCE_SELF_TICKS:
                self.asked_action_tick[key] = self.tick
                self.say(ch.ask_action(mat))
                return self._emit_chat()
            return self._idle_wait(step)

        pc = self.partner_claim
        partner_on_it = (
            pc is not None
            and pc[0] == claim_mat
            and self.tick - pc[1] < FORCE_SELF_TICKS
            and self.my_claim != claim_mat
        )
        if partner_on_it:
            return self._idle_wait(step)

        self._claim(claim_mat)
        if self.outbox:
            return self._emit_chat()

        if mat in self.inventory:
            return self._deliver(step, mat, role)

        if len(self.inventory) >= 3:
            return self._discard(mat)

        # acquire the material: pick the crafted block from its site, else mine
        src_idx = step.ia if role == "base" else step.ib
        if src_idx is not None:
            from_site = self.schedule[src_idx].site
            c2 = self.memory.get(from_site)
            if c2 is not None and (
                (c2.kind == BLOCK and c2.a == mat) or (c2.kind == STACK and c2.b == mat)
            ):
                return self._goto_adjacent_and(from_site, hit_action(self.player))
            return self._wait_near(from_site)
        src = self.source_pos.get(mat)
        if src is None:
            return self._idle_wait(step)
        return self._goto_adjacent_and(src, hit_action(self.player))

    def _deliver(self, step: Step, mat: int, role: str) -> Action:
        cell = self.memory.get(step.site)
        if role == "base":
            if cell is not None and cell.kind == EMPTY:
                return self._goto_adjacent_and(step.site, place_action(self.player, mat))
            if cell is not None and cell.kind == BLOCK and cell.a == step.a:
                return noop_action(self.player)  # raced: flag flips next tick
            if (
                cell is not None
                and cell.kind == BLOCK
                and self.tool_of.get(cell.a) in self.tools
                and len(self.inventory) < 4
            ):
                # stray block on our site: clear it
                return self._goto_adjacent_and(step.site, hit_action(self.player))
            return self._wait_near(step.site)
        if cell is not None and cell.kind == BLOCK and cell.a == step.a:
            return self._goto_adjacent_and(step.site, place_action(self.player, mat))
        return self._wait_near(step.site)

    def _discard(self, keep: Optional[int]) -> Action:
        junk = next((m for m in self.inventory if m != keep), self.inventory[0])
        for d, (dx, dy) in _DELTA.items():
            cand = (self.pos[0] + dx, self.pos[1] + dy)
            if self._is_zone(cand) or self._near_landmark(cand):
                continue
            if self._passable(cand):
                if self.facing == d:
                    return place_action(self.player, junk)
                return turn_action(self.player, d)
        return self._wander()

    def _near_landmark(self, xy: tuple[int, int]) -> bool:
        """True next to a source or combine site, where junk would obstruct."""
        for dx, dy in _DELTA.values():
            n = (xy[0] + dx, xy[1] + dy)
            if n in self.mines_xy or self._is_zone(n):
                return True
        return False

    def _idle_wait(self, step: Step) -> Action:
        stalled = self.tick - self.step_started_tick
        if (
            stalled >= STALL_ASKDOING_TICKS
            and self.tick - self.last_askdoing_tick >= ASKDOING_COOLDOWN_TICKS
        ):
            self.last_askdoing_tick = self.tick
            self.say(ch.ask_doing())
            return self._emit_chat()
        return self._wait_near(step.site)


def _cell_materials(cell) -> tuple[int, ...]:
    if cell is None:
        return ()
    if cell.kind == BLOCK:
        return (cell.a,)
    if cell.kind == STACK:
        return (cell.a, cell.b)
    return ()


def _manhattan(a: tuple[int, int], b: tuple[int, int]) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _dir_from_to(a: tuple[int, int], b: tuple[int, int]) -> str:
    dx, dy = b[0] - a[0], b[1] - a[1]
    for d, (ddx, ddy) in _DELTA.items():
        if (ddx, ddy) == (dx, dy):
            return d
    raise ValueError("cells not adjacent")


def _dir_from_to_rough(a: tuple[int, int], b: tuple[int, int]) -> str:
    dx, dy = b[0] - a[0], b[1] - a[1]
    if abs(dx) >= abs(dy):
        return "east" if dx > 0 else "west"
    return "south" if dy > 0 else "north"
