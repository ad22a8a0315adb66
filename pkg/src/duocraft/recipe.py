"""Crafting plans: goal-directed recipe graphs, tool skills, and censored views.

A recipe graph is a DAG over materials. Mined materials come from
inexhaustible sources; every other material is crafted by combining exactly
two distinct ingredient blocks, which are consumed. Because combining
consumes its inputs, a material reused by several recipes must be crafted
once per use, so the number of combine operations needed for the goal
(``macro_step_count``) can exceed the number of crafted materials.

Asymmetry between the two players is expressed in two independent axes:

* knowledge: each player gets a view of the graph in which the ingredient
  and tool links of some crafted nodes are censored ("disparate"), or the
  full graph ("shared");
* skills: each player holds a set of tools; a material can only be mined,
  picked up, or placed by a player holding its tool.

The module also hosts the solvability closures used by the generator to
guarantee that every game is winnable jointly but not alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .jsonutil import canonical_dumps
from .seeding import substream

MINED = "mined"
CRAFTED = "crafted"
GOAL = "goal"

KNOWLEDGE_AXES = ("shared", "disparate")
SKILL_AXES = ("shared", "disparate")

DEFAULT_V = 21
DEFAULT_T = 6
DEFAULT_STEP_RANGE = (7, 11)
DEFAULT_MATERIAL_RANGE = (5, 10)
MAX_GENERATION_RETRIES = 10_000

_MATERIAL_NAMES = [
    "blue_wool", "yellow_wool", "cyan_wool", "black_wool", "orange_wool",
    "lime_wool", "purple_wool", "white_wool", "red_wool", "green_wool",
    "cobblestone", "soul_sand", "clay_block", "glass_block", "brick_block",
    "sandstone", "obsidian", "iron_block", "gold_block", "diamond_block",
    "emerald_block",
]

_TOOL_NAMES = [
    "wooden_pickaxe", "stone_axe", "iron_shovel", "golden_hoe",
    "diamond_sword", "shears",
]


class ConfigurationError(ValueError):
    """A vocabulary / range / config combination cannot satisfy the invariants."""


def material_names(V: int) -> list[str]:
    if V <= len(_MATERIAL_NAMES):
        return _MATERIAL_NAMES[:V]
    extra = [f"material_{i}" for i in range(len(_MATERIAL_NAMES), V)]
    return _MATERIAL_NAMES + extra


def tool_names(T: int) -> list[str]:
    if T <= len(_TOOL_NAMES):
        return _TOOL_NAMES[:T]
    extra = [f"tool_{i}" for i in range(len(_TOOL_NAMES), T)]
    return _TOOL_NAMES + extra


@dataclass(frozen=True)
class Material:
    id: int
    name: str
    kind: str  # MINED | CRAFTED | GOAL


@dataclass(frozen=True)
class Tool:
    id: int
    name: str


@dataclass(frozen=True)
class RecipeNode:
    material: int
    ingredients: tuple[int, ...]  # () for mined, sorted distinct pair otherwise
    tool: int
    parents: frozenset[int]

    @property
    def is_mined(self) -> bool:
        return not self.ingredients


@dataclass(frozen=True)
class RecipeGraph:
    """Complete plan. ``nodes`` are in breadth-first order from the goal, goal first."""

    nodes: tuple[RecipeNode, ...]
    goal: int
    mines: frozenset[int]
    macro_step_count: int
    V: int
    T: int

    def node(self, material: int) -> RecipeNode:
        return self._index()[material]

    def _index(self) -> dict[int, RecipeNode]:
        idx = getattr(self, "_node_index", None)
        if idx is None:
            idx = {n.material: n for n in self.nodes}
            object.__setattr__(self, "_node_index", idx)
        return idx

    @property
    def materials(self) -> list[Material]:
        names = material_names(self.V)
        out = []
        for n in self.nodes:
            if n.material == self.goal:
                kind = GOAL
            elif n.is_mined:
                kind = MINED
            else:
                kind = CRAFTED
            out.append(Material(n.material, names[n.material], kind))
        return out

    @property
    def crafted_ids(self) -> list[int]:
        return [n.material for n in self.nodes if not n.is_mined]

    def tool_of(self, material: int) -> int:
        return self.node(material).tool

    def demand(self) -> dict[int, int]:
        """Blocks of each material consumed or produced on the way to one goal block.

        BFS order is not topological when a node is reused by a deeper
        consumer, so process nodes only once all their consumers are done.
        """
        need = {n.material: 0 for n in self.nodes}
        need[self.goal] = 1
        pending = {n.material: len(n.parents) for n in self.nodes}
        ready = [self.goal]
        while ready:
            mat = ready.pop()
            for ing in self.node(mat).ingredients:
                need[ing] += need[mat]
                pending[ing] -= 1
                if pending[ing] == 0:
                    ready.append(ing)
        return need

    def required_tools(self) -> frozenset[int]:
        return frozenset(n.tool for n in self.nodes)


@dataclass(frozen=True)
class PartialPlan:
    """A player's censored view: ``hidden`` nodes keep their identity but lose
    their ingredient and tool links."""

    base: RecipeGraph
    hidden: frozenset[int]

    def knows_recipe(self, material: int) -> bool:
        return material not in self.hidden

    def visible_recipes(self) -> dict[int, tuple[tuple[int, ...], int]]:
        """material -> (ingredients, tool) for every non-censored crafted node."""
        return {
            n.material: (n.ingredients, n.tool)
            for n in self.base.nodes
            if not n.is_mined and n.material not in self.hidden
        }


@dataclass(frozen=True)
class GameConfig:
    skills: str = "shared"
    knowledge: str = "shared"
    seed: int = 0
    V: int = DEFAULT_V
    T: int = DEFAULT_T

    def __post_init__(self) -> None:
        if self.skills not in SKILL_AXES or self.knowledge not in KNOWLEDGE_AXES:
            raise ConfigurationError(
                f"invalid config axes: skills={self.skills!r} knowledge={self.knowledge!r}"
            )

    @property
    def name(self) -> str:
        return f"{self.skills}-{self.knowledge}"

    @classmethod
    def from_name(cls, name: str, seed: int = 0, V: int = DEFAULT_V, T: int = DEFAULT_T) -> "GameConfig":
        """Parse a ``<skills>-<knowledge>`` cell name, e.g. ``disparate-shared``."""
        try:
            skills, knowledge = name.split("-")
        except ValueError:
            raise ConfigurationError(f"bad config name {name!r}") from None
        return cls(skills=skills, knowledge=knowledge, seed=seed, V=V, T=T)


CONFIG_NAMES = [f"{s}-{k}" for s in SKILL_AXES for k in KNOWLEDGE_AXES]


@dataclass(frozen=True)
class ToolAssignment:
    material_tool: dict[int, int]
    player_tools: tuple[frozenset[int], frozenset[int]]
    required: frozenset[int]


def _default_material_range(V: int) -> tuple[int, int]:
    lo = max(3, min(5, V))
    hi = min(10, V)
    return (lo, hi)


def generate_recipe(
    seed: int,
    V: int = DEFAULT_V,
    T: int = DEFAULT_T,
    step_range: tuple[int, int] = DEFAULT_STEP_RANGE,
    material_range: tuple[int, int] | None = None,
) -> RecipeGraph:
    """Generate a random recipe graph with ``macro_step_count`` in ``step_range``.

    Deterministic in ``seed``. Raises ConfigurationError when the requested
    ranges are unsatisfiable within the retry budget.
    """
    if V < 3:
        raise ConfigurationError("need a vocabulary of at least 3 materials")
    lo, hi = step_range
    if not (1 <= lo <= hi <= V - 1):
        raise ConfigurationError(f"step_range {step_range} outside [1, V-1]")
    if T < 2:
        raise ConfigurationError("need at least 2 tools")
    if material_range is None:
        material_range = _default_material_range(V)
    m_lo, m_hi = material_range
    if not (3 <= m_lo <= m_hi <= V):
        raise ConfigurationError(f"material_range {material_range} outside [3, V]")

    rng = substream(seed, "recipe")
    for _ in range(MAX_GENERATION_RETRIES):
        graph = _attempt(rng, V, T, step_range, material_range)
        if graph is not None:
            return graph
    raise ConfigurationError(
        f"could not generate a graph for V={V} T={T} steps={step_range} "
        f"materials={material_range} within {MAX_GENERATION_RETRIES} retries"
    )


def _attempt(rng, V, T, step_range, material_range):
    lo, hi = step_range
    m_lo, m_hi = material_range

    n_total = rng.randint(m_lo, m_hi)
    # crafted count c: combine count is at least c and at most 2^c - 1, and
    # the deepest crafted node needs two mined ingredients (m >= 2), while
    # parent assignment leaves c + 1 open slots for m distinct mines.
    c_min = max(1, (n_total - 1 + 1) // 2)  # ensures m = n_total - c <= c + 1
    while (1 << c_min) - 1 < lo:
        c_min += 1
    c_max = min(n_total - 2, hi)
    if c_min > c_max:
        return None
    c = rng.randint(c_min, c_max)
    m = n_total - c

    ids = rng.sample(range(V), n_total)
    crafted = ids[:c]  # crafted[0] is the goal
    mined = ids[c:]

    # Ingredient slots: 2 per crafted node, indices refer into `crafted`.
    slots: list[list[int]] = [[] for _ in range(c)]

    # Every non-goal crafted node is consumed by an earlier-indexed node.
    for j in range(1, c):
        parents = [i for i in range(j) if len(slots[i]) < 2 and crafted[j] not in slots[i]]
        if not parents:
            return None
        slots[rng.choice(parents)].append(crafted[j])

    open_slots = [i for i in range(c) for _ in range(2 - len(slots[i]))]
    if len(open_slots) < m:
        return None
    rng.shuffle(open_slots)

    # Each mined material is used at least once.
    for k, mat in enumerate(mined):
        i = open_slots[k]
        if mat in slots[i]:
            return None
        slots[i].append(mat)

    # Remaining slots reuse existing materials: a deeper crafted node or any mine.
    for i in open_slots[m:]:
        choices = [crafted[j] for j in range(c) if j > i and crafted[j] not in slots[i]]
        choices += [mat for mat in mined if mat not in slots[i]]
        if not choices:
            return None
        slots[i].append(rng.choice(choices))

    pairs = [tuple(sorted(s)) for s in slots]
    if any(len(p) != 2 or p[0] == p[1] for p in pairs):
        return None
    if len(set(pairs)) != c:
        return None  # combine outcomes must be unambiguous

    # Demand propagation in index order (ingredients always have higher index).
    demand = [0] * c
    demand[0] = 1
    mined_demand = {mat: 0 for mat in mined}
    crafted_pos = {mat: j for j, mat in enumerate(crafted)}
    for i in range(c):
        for mat in pairs[i]:
            if mat in crafted_pos:
                demand[crafted_pos[mat]] += demand[i]
            else:
                mined_demand[mat] += demand[i]
    if 0 in demand:
        return None
    combine_count = sum(demand)
    if not (lo <= combine_count <= hi):
        return None

    tool_of = {mat: rng.randrange(T) for mat in ids}
    non_goal_tools = {tool_of[mat] for mat in ids[1:]}
    if len(non_goal_tools) < 2:
        return None  # disparate skill splits need two missable non-goal tools

    ingredients = {crafted[i]: pairs[i] for i in range(c)}
    parents: dict[int, set[int]] = {mat: set() for mat in ids}
    for i in range(c):
        for mat in pairs[i]:
            parents[mat].add(crafted[i])

    order = _bfs_order(crafted[0], ingredients)
    if len(order) != n_total:
        return None
    nodes = tuple(
        RecipeNode(
            material=mat,
            ingredients=ingredients.get(mat, ()),
            tool=tool_of[mat],
            parents=frozenset(parents[mat]),
        )
        for mat in order
    )
    return RecipeGraph(
        nodes=nodes,
        goal=crafted[0],
        mines=frozenset(mined),
        macro_step_count=combine_count,
        V=V,
        T=T,
    )


def _bfs_order(goal: int, ingredients: Mapping[int, tuple[int, ...]]) -> list[int]:
    order = [goal]
    seen = {goal}
    queue = [goal]
    while queue:
        mat = queue.pop(0)
        for ing in ingredients.get(mat, ()):
            if ing not in seen:
                seen.add(ing)
                order.append(ing)
                queue.append(ing)
    return order


def assign_tools(graph: RecipeGraph, config: GameConfig, seed: int) -> ToolAssignment:
    """Split the graph's required tools into per-player skill sets.

    Shared skills: both players hold every required tool. Disparate skills:
    proper nonempty subsets whose union covers the requirement, each player
    missing the tool of at least one non-goal material.
    """
    material_tool = {n.material: n.tool for n in graph.nodes}
    required = graph.required_tools()
    if config.skills == "shared":
        return ToolAssignment(material_tool, (required, required), required)

    non_goal_tools = {n.tool for n in graph.nodes if n.material != graph.goal}
    rng = substream(seed, "tools")
    tools_sorted = sorted(required)
    for _ in range(MAX_GENERATION_RETRIES):
        a, b = set(), set()
        for t in tools_sorted:
            lot = rng.randrange(3)
            if lot == 0:
                a.add(t)
            elif lot == 1:
                b.add(t)
            else:
                a.add(t)
                b.add(t)
        if not a or not b or a == required or b == required:
            continue
        if not (non_goal_tools - a) or not (non_goal_tools - b):
            continue
        return ToolAssignment(material_tool, (frozenset(a), frozenset(b)), required)
    raise ConfigurationError("could not satisfy disparate skill constraints")


def derive_partial_plans(
    graph: RecipeGraph, config: GameConfig, seed: int
) -> tuple[PartialPlan, PartialPlan]:
    """Censor each player's view of the graph.

    Shared knowledge hides nothing. Disparate knowledge partitions the
    crafted non-goal nodes into two nonempty hidden sets, one per player,
    so the union of the two views always reconstructs the full plan.
    """
    if config.knowledge == "shared":
        return PartialPlan(graph, frozenset()), PartialPlan(graph, frozenset())

    candidates = [n.material for n in graph.nodes if not n.is_mined and n.material != graph.goal]
    if len(candidates) < 2:
        raise ConfigurationError("graph too small to censor both players distinctly")
    rng = substream(seed, "plans")
    rng.shuffle(candidates)
    k_a = rng.randint(1, len(candidates) - 1)
    hidden_a = frozenset(candidates[:k_a])
    hidden_b = frozenset(candidates[k_a:])
    return PartialPlan(graph, hidden_a), PartialPlan(graph, hidden_b)


def _closure(
    graph: RecipeGraph,
    known: Mapping[int, tuple[tuple[int, ...], int]],
    tools: frozenset[int] | set[int],
) -> set[int]:
    """Materials creatable by forward chaining with the given knowledge and tools.

    A mined material is creatable when its tool is held; a crafted one when
    its recipe is known and both ingredients are creatable *and placeable*
    (an ingredient block must be hit and re-placed, so its tool is needed).
    """
    creatable: set[int] = set()
    changed = True
    while changed:
        changed = False
        for node in graph.nodes:
            mat = node.material
            if mat in creatable:
                continue
            if node.is_mined:
                ok = node.tool in tools
            else:
                rec = known.get(mat)
                if rec is None:
                    continue
                ings, _tool = rec
                ok = all(i in creatable and graph.tool_of(i) in tools for i in ings)
            if ok:
                creatable.add(mat)
                changed = True
    return creatable


def check_joint_solvable(
    graph: RecipeGraph,
    plans: tuple[PartialPlan, PartialPlan],
    tools: ToolAssignment,
) -> bool:
    known: dict[int, tuple[tuple[int, ...], int]] = {}
    for plan in plans:
        known.update(plan.visible_recipes())
    union = tools.player_tools[0] | tools.player_tools[1]
    return graph.goal in _closure(graph, known, union)


def check_solo_unsolvable(
    graph: RecipeGraph, plan: PartialPlan, player_tools: frozenset[int]
) -> bool:
    return graph.goal not in _closure(graph, plan.visible_recipes(), player_tools)


def generate_game(config: GameConfig) -> tuple[RecipeGraph, tuple[PartialPlan, PartialPlan], ToolAssignment]:
    """Graph + censored views + skills for one game, regenerating until the
    joint/solo solvability contract holds."""
    rng = substream(config.seed, "game")
    for _ in range(MAX_GENERATION_RETRIES):
        sub = rng.getrandbits(63)
        graph = generate_recipe(sub, V=config.V, T=config.T)
        tools = assign_tools(graph, config, sub)
        plans = derive_partial_plans(graph, config, sub)
        if not check_joint_solvable(graph, plans, tools):
            continue
        if config.skills == "disparate" or config.knowledge == "disparate":
            if not all(
                check_solo_unsolvable(graph, plans[i], tools.player_tools[i]) for i in (0, 1)
            ):
                continue
        return graph, plans, tools
    raise ConfigurationError(f"no solvable game for config {config.name}")


def serialize_plan_tuples(plan: PartialPlan) -> np.ndarray:
    """Encode a (possibly censored) plan as a matrix of node tuples.

    One row per node in breadth-first order (goal first, each node once).
    Row layout: material one-hot (V) | parent one-hot (V) | children
    multi-hot (V) | tool one-hot (T). The parent is the first node, in list
    order, whose *visible* ingredients include this node; censored and mined
    nodes carry zero children, and censored nodes also hide their tool.
    """
    graph = plan.base
    V, T = graph.V, graph.T
    width = 3 * V + T
    rows = np.zeros((len(graph.nodes), width), dtype=np.float64)

    parent_of: dict[int, int] = {}
    for node in graph.nodes:
        if node.material in plan.hidden:
            continue
        for ing in node.ingredients:
            parent_of.setdefault(ing, node.material)

    for r, node in enumerate(graph.nodes):
        mat = node.material
        rows[r, mat] = 1.0
        parent = parent_of.get(mat)
        if parent is not None:
            rows[r, V + parent] = 1.0
        if mat not in plan.hidden:
            for ing in node.ingredients:
                rows[r, 2 * V + ing] = 1.0
            rows[r, 3 * V + node.tool] = 1.0
    return rows


def graph_to_dict(graph: RecipeGraph) -> dict:
    names = material_names(graph.V)
    tnames = tool_names(graph.T)
    return {
        "version": 1,
        "V": graph.V,
        "T": graph.T,
        "goal": graph.goal,
        "mines": sorted(graph.mines),
        "macro_step_count": graph.macro_step_count,
        "nodes": [
            {
                "material": n.material,
                "name": names[n.material],
                "ingredients": list(n.ingredients),
                "tool": n.tool,
                "tool_name": tnames[n.tool],
                "parents": sorted(n.parents),
            }
            for n in graph.nodes
        ],
    }


def graph_from_dict(doc: dict) -> RecipeGraph:
    nodes = tuple(
        RecipeNode(
            material=nd["material"],
            ingredients=tuple(nd["ingredients"]),
            tool=nd["tool"],
            parents=frozenset(nd["parents"]),
        )
        for nd in doc["nodes"]
    )
    mines = frozenset(doc["mines"])
    return RecipeGraph(
        nodes=nodes,
        goal=doc["goal"],
        mines=mines,
        macro_step_count=doc["macro_step_count"],
        V=doc["V"],
        T=doc["T"],
    )


def graph_to_json(graph: RecipeGraph) -> str:
    """Canonical JSON document (sorted keys, UTF-8) for CLI output and log headers."""
    return canonical_dumps(graph_to_dict(graph))
