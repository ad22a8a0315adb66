"""Deterministic grid blocks-world.

A W x H grid with walls on the border. Mined materials come from persistent
source cells; hitting a source with the right tool yields a block into the
actor's inventory. Placing a block onto another block forms a stack of two;
if the unordered pair is the ingredient pair of some crafted material the
stack is immediately consumed and replaced by one block of the product,
otherwise the stack is inert and its top can be picked back up.

All transitions are pure: ``apply_action`` maps an immutable state and an
action to a new state plus events, and illegal actions become rejected
no-op events rather than exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .jsonutil import canonical_dumps
from .recipe import RecipeGraph, ToolAssignment
from .seeding import substream

TICK_MS = 250
FOV_RADIUS = 8
INVENTORY_CAP = 4
DEFAULT_W = 16
DEFAULT_H = 16

DIRECTIONS = ("north", "east", "south", "west")
_DELTA = {"north": (0, -1), "east": (1, 0), "south": (0, 1), "west": (-1, 0)}

EMPTY = "empty"
WALL = "wall"
SOURCE = "source"
BLOCK = "block"
STACK = "stack"


class LayoutError(ValueError):
    """World dimensions cannot accommodate the required placements."""


@dataclass(frozen=True)
class Cell:
    kind: str = EMPTY
    a: Optional[int] = None  # source/block material, or stack bottom
    b: Optional[int] = None  # stack top

    def token(self) -> str:
        if self.kind == SOURCE:
            return f"source:{self.a}"
        if self.kind == BLOCK:
            return f"block:{self.a}"
        if self.kind == STACK:
            return f"stack:{self.a}+{self.b}"
        return self.kind

    @staticmethod
    def from_token(tok: str) -> "Cell":
        if tok == EMPTY:
            return Cell()
        if tok == WALL:
            return Cell(WALL)
        kind, _, rest = tok.partition(":")
        if kind == SOURCE:
            return Cell(SOURCE, int(rest))
        if kind == BLOCK:
            return Cell(BLOCK, int(rest))
        if kind == STACK:
            bottom, top = rest.split("+")
            return Cell(STACK, int(bottom), int(top))
        raise ValueError(f"bad cell token {tok!r}")


_EMPTY_CELL = Cell()
_WALL_CELL = Cell(WALL)


@dataclass(frozen=True)
class Action:
    kind: str  # move | turn | hit | place | chat | noop
    actor: int = 0
    direction: Optional[str] = None
    material: Optional[int] = None
    text: Optional[str] = None

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "actor": self.actor}
        if self.direction is not None:
            d["direction"] = self.direction
        if self.material is not None:
            d["material"] = self.material
        if self.text is not None:
            d["text"] = self.text
        return d

    @staticmethod
    def from_dict(d: dict) -> "Action":
        return Action(
            kind=d["kind"],
            actor=d.get("actor", 0),
            direction=d.get("direction"),
            material=d.get("material"),
            text=d.get("text"),
        )


def move(actor: int, direction: str) -> Action:
    return Action("move", actor, direction=direction)


def turn(actor: int, direction: str) -> Action:
    return Action("turn", actor, direction=direction)


def hit(actor: int) -> Action:
    return Action("hit", actor)


def place(actor: int, material: int) -> Action:
    return Action("place", actor, material=material)


def chat(actor: int, text: str) -> Action:
    return Action("chat", actor, text=text)


def noop(actor: int) -> Action:
    return Action("noop", actor)


@dataclass(frozen=True)
class AgentState:
    player: int
    pos: tuple[int, int]
    facing: str
    inventory: tuple[int, ...] = ()
    tools: frozenset[int] = frozenset()
    last_action: Optional[Action] = None


@dataclass(frozen=True)
class Event:
    type: str  # action | chat
    actor: int
    payload: dict
    rejected: bool = False


@dataclass(frozen=True)
class WorldState:
    grid: tuple[tuple[Cell, ...], ...]  # grid[y][x]
    W: int
    H: int
    agents: tuple[AgentState, AgentState]
    graph: RecipeGraph
    clock_ms: int = 0
    goal_reached: bool = False

    def cell(self, x: int, y: int) -> Cell:
        return self.grid[y][x]

    def recipe_pairs(self) -> dict[tuple[int, int], int]:
        pairs = getattr(self, "_pairs", None)
        if pairs is None:
            pairs = {
                n.ingredients: n.material for n in self.graph.nodes if not n.is_mined
            }
            object.__setattr__(self, "_pairs", pairs)
        return pairs

    def agent_at(self, x: int, y: int) -> Optional[int]:
        for ag in self.agents:
            if ag.pos == (x, y):
                return ag.player
        return None


@dataclass(frozen=True)
class Observation:
    player: int
    clock_ms: int
    own: AgentState
    visible_cells: tuple[tuple[int, int, Cell], ...]
    partner_visible: bool
    partner_pos: Optional[tuple[int, int]] = None
    partner_facing: Optional[str] = None
    partner_last_action: Optional[Action] = None

    def to_dict(self) -> dict:
        d: dict = {
            "player": self.player,
            "clock_ms": self.clock_ms,
            "pos": list(self.own.pos),
            "facing": self.own.facing,
            "inventory": list(self.own.inventory),
            "tools": sorted(self.own.tools),
            "cells": [[x, y, c.token()] for x, y, c in self.visible_cells],
            "partner_visible": self.partner_visible,
        }
        if self.partner_visible:
            d["partner_pos"] = list(self.partner_pos)
            d["partner_facing"] = self.partner_facing
            if self.partner_last_action is not None:
                d["partner_last_action"] = self.partner_last_action.to_dict()
        return d

    def digest_source(self) -> str:
        return canonical_dumps(self.to_dict())


def spawn_world(
    graph: RecipeGraph,
    tools: ToolAssignment,
    seed: int,
    W: int = DEFAULT_W,
    H: int = DEFAULT_H,
) -> WorldState:
    """Lay out border walls, one source per mined material, and two agents."""
    if W < 8 or H < 8:
        raise LayoutError(f"world {W}x{H} too small, need at least 8x8")
    interior = [(x, y) for y in range(1, H - 1) for x in range(1, W - 1)]
    mines = sorted(graph.mines)
    need = len(mines) + 2
    if len(interior) < need:
        raise LayoutError(f"interior of {W}x{H} cannot fit {need} placements")

    rng = substream(seed, "world")
    spots = rng.sample(interior, need)
    rows = [
        [
            _WALL_CELL if x in (0, W - 1) or y in (0, H - 1) else _EMPTY_CELL
            for x in range(W)
        ]
        for y in range(H)
    ]
    for mat, (x, y) in zip(mines, spots):
        rows[y][x] = Cell(SOURCE, mat)

    agents = tuple(
        AgentState(
            player=i,
            pos=spots[len(mines) + i],
            facing=rng.choice(DIRECTIONS),
            tools=tools.player_tools[i],
        )
        for i in (0, 1)
    )
    grid = tuple(tuple(r) for r in rows)
    return WorldState(grid=grid, W=W, H=H, agents=agents, graph=graph)


def _with_cell(state: WorldState, x: int, y: int, cell: Cell) -> WorldState:
    row = list(state.grid[y])
    row[x] = cell
    grid = state.grid[:y] + (tuple(row),) + state.grid[y + 1:]
    return replace(state, grid=grid)


def _with_agent(state: WorldState, agent: AgentState) -> WorldState:
    agents = tuple(agent if a.player == agent.player else a for a in state.agents)
    return replace(state, agents=agents)


def facing_cell(agent: AgentState) -> tuple[int, int]:
    dx, dy = _DELTA[agent.facing]
    return (agent.pos[0] + dx, agent.pos[1] + dy)


def apply_action(state: WorldState, action: Action) -> tuple[WorldState, list[Event]]:
    """Total transition function. Illegal actions yield a rejected event."""
    agent = state.agents[action.actor]
    agent = replace(agent, last_action=action)
    state = _with_agent(state, agent)

    def rejected(reason: str) -> tuple[WorldState, list[Event]]:
        ev = Event(
            "action",
            action.actor,
            {"action": action.to_dict(), "reason": reason},
            rejected=True,
        )
        return state, [ev]

    def accepted(new_state: WorldState, effect: dict) -> tuple[WorldState, list[Event]]:
        ev = Event("action", action.actor, {"action": action.to_dict(), "effect": effect})
        return new_state, [ev]

    kind = action.kind
    if kind == "noop":
        return accepted(state, {})

    if kind == "chat":
        if not action.text:
            return rejected("empty-chat")
        return state, [Event("chat", action.actor, {"text": action.text})]

    if kind == "turn":
        if action.direction not in _DELTA:
            return rejected("bad-direction")
        agent = replace(agent, facing=action.direction)
        return accepted(_with_agent(state, agent), {"facing": action.direction})

    if kind == "move":
        if action.direction not in _DELTA:
            return rejected("bad-direction")
        dx, dy = _DELTA[action.direction]
        nx, ny = agent.pos[0] + dx, agent.pos[1] + dy
        agent = replace(agent, facing=action.direction)
        state = _with_agent(state, agent)
        if not (0 <= nx < state.W and 0 <= ny < state.H):
            return rejected("out-of-bounds")
        if state.cell(nx, ny).kind != EMPTY:
            return rejected("blocked")
        if state.agent_at(nx, ny) is not None:
            return rejected("occupied")
        agent = replace(agent, pos=(nx, ny))
        return accepted(_with_agent(state, agent), {"pos": [nx, ny]})

    if kind == "hit":
        x, y = facing_cell(agent)
        if not (0 <= x < state.W and 0 <= y < state.H):
            return rejected("out-of-bounds")
        cell = state.cell(x, y)
        if cell.kind == SOURCE:
            mat = cell.a
        elif cell.kind == BLOCK:
            mat = cell.a
        elif cell.kind == STACK:
            mat = cell.b
        else:
            return rejected("nothing-to-hit")
        if state.graph.tool_of(mat) not in agent.tools:
            return rejected("missing-tool")
        if len(agent.inventory) >= INVENTORY_CAP:
            return rejected("inventory-full")
        inv = tuple(sorted(agent.inventory + (mat,)))
        agent = replace(agent, inventory=inv)
        state = _with_agent(state, agent)
        if cell.kind == SOURCE:
            return accepted(state, {"mined": mat})
        if cell.kind == BLOCK:
            state = _with_cell(state, x, y, _EMPTY_CELL)
            return accepted(state, {"picked": mat})
        state = _with_cell(state, x, y, Cell(BLOCK, cell.a))
        return accepted(state, {"picked": mat, "from_stack": True})

    if kind == "place":
        mat = action.material
        if mat is None or mat not in agent.inventory:
            return rejected("not-in-inventory")
        x, y = facing_cell(agent)
        if not (0 <= x < state.W and 0 <= y < state.H):
            return rejected("out-of-bounds")
        if state.agent_at(x, y) is not None:
            return rejected("occupied")
        cell = state.cell(x, y)
        inv = list(agent.inventory)
        inv.remove(mat)
        agent = replace(agent, inventory=tuple(inv))
        if cell.kind == EMPTY:
            state = _with_cell(_with_agent(state, agent), x, y, Cell(BLOCK, mat))
            return accepted(state, {"placed": mat, "pos": [x, y]})
        if cell.kind == BLOCK:
            state = _with_agent(state, agent)
            pair = tuple(sorted((cell.a, mat)))
            product = state.recipe_pairs().get(pair)
            if product is None:
                state = _with_cell(state, x, y, Cell(STACK, cell.a, mat))
                return accepted(
                    state, {"placed": mat, "pos": [x, y], "stacked_on": cell.a}
                )
            state = _with_cell(state, x, y, Cell(BLOCK, product))
            if product == state.graph.goal:
                state = replace(state, goal_reached=True)
            return accepted(
                state,
                {
                    "placed": mat,
                    "pos": [x, y],
                    "combined": {"bottom": cell.a, "top": mat, "product": product},
                },
            )
        return rejected("cell-not-stackable")

    return rejected("unknown-action")


def advance_clock(state: WorldState, dt_ms: int = TICK_MS) -> WorldState:
    return replace(state, clock_ms=state.clock_ms + dt_ms)


def _cone_offsets() -> dict[str, tuple[tuple[int, int], ...]]:
    out = {}
    r = FOV_RADIUS
    for facing, (fx, fy) in _DELTA.items():
        offs = [(0, 0)]
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                d2 = dx * dx + dy * dy
                if d2 == 0 or d2 > r * r:
                    continue
                dot = fx * dx + fy * dy
                if dot > 0 and 4 * dot * dot >= d2:
                    offs.append((dx, dy))
        out[facing] = tuple(offs)
    return out


_CONE = _cone_offsets()


def visible_region(state: WorldState, player: int) -> set[tuple[int, int]]:
    """Cells in the 120 degree facing cone of radius 8, plus the agent's own cell."""
    agent = state.agents[player]
    ax, ay = agent.pos
    W, H = state.W, state.H
    return {
        (ax + dx, ay + dy)
        for dx, dy in _CONE[agent.facing]
        if 0 <= ax + dx < W and 0 <= ay + dy < H
    }


def observe(state: WorldState, player: int) -> Observation:
    region = visible_region(state, player)
    own = state.agents[player]
    partner = state.agents[1 - player]
    cells = tuple(
        (x, y, state.cell(x, y)) for (x, y) in sorted(region, key=lambda p: (p[1], p[0]))
    )
    if partner.pos in region:
        return Observation(
            player=player,
            clock_ms=state.clock_ms,
            own=own,
            visible_cells=cells,
            partner_visible=True,
            partner_pos=partner.pos,
            partner_facing=partner.facing,
            partner_last_action=partner.last_action,
        )
    return Observation(
        player=player,
        clock_ms=state.clock_ms,
        own=own,
        visible_cells=cells,
        partner_visible=False,
    )


def is_goal_reached(state: WorldState, graph: RecipeGraph) -> bool:
    """True iff a goal block exists anywhere: on the grid, in a stack, or held."""
    g = graph.goal
    for row in state.grid:
        for cell in row:
            if cell.kind == BLOCK and cell.a == g:
                return True
            if cell.kind == STACK and (cell.a == g or cell.b == g):
                return True
    return any(g in ag.inventory for ag in state.agents)


def material_census(state: WorldState) -> dict[int, int]:
    """Count of loose blocks per material: grid blocks, stack halves, inventories.

    Sources are not counted; they are infinite suppliers, not blocks.
    """
    counts: dict[int, int] = {}

    def add(m: Optional[int]) -> None:
        if m is not None:
            counts[m] = counts.get(m, 0) + 1

    for row in state.grid:
        for cell in row:
            if cell.kind == BLOCK:
                add(cell.a)
            elif cell.kind == STACK:
                add(cell.a)
                add(cell.b)
    for ag in state.agents:
        for m in ag.inventory:
            add(m)
    return counts
