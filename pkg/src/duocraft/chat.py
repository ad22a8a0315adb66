"""Templated utterance grammar for agent dialogue.

Every chat message is an instance of a small set of templates. Each template
has a canonical line form (``ASK_RECIPE cyan_wool``) and three natural
paraphrases; both representations parse back to the same template, which
keeps the dialogue machine-readable for belief updates while still giving
the text encoder surface variation to chew on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from .recipe import material_names, tool_names

NO_TOOL = "no-tool"
NO_KNOWLEDGE = "no-knowledge"

KINDS = (
    "ask_recipe",
    "inform_recipe",
    "ask_action",
    "ask_doing",
    "inform_doing",
    "inform_done",
    "inform_cannot",
    "ack",
)


@dataclass(frozen=True)
class Template:
    kind: str
    m: Optional[int] = None
    a: Optional[int] = None
    b: Optional[int] = None
    tool: Optional[int] = None
    reason: Optional[str] = None


def ask_recipe(m: int) -> Template:
    return Template("ask_recipe", m=m)


def inform_recipe(m: int, a: int, b: int, tool: int) -> Template:
    return Template("inform_recipe", m=m, a=a, b=b, tool=tool)


def ask_action(m: int) -> Template:
    return Template("ask_action", m=m)


def ask_doing() -> Template:
    return Template("ask_doing")


def inform_doing(m: int) -> Template:
    return Template("inform_doing", m=m)


def inform_done(m: int) -> Template:
    return Template("inform_done", m=m)


def inform_cannot(m: int, reason: str) -> Template:
    return Template("inform_cannot", m=m, reason=reason)


def ack() -> Template:
    return Template("ack")


_PARAPHRASES: dict[tuple[str, Optional[str]], tuple[str, ...]] = {
    ("ask_recipe", None): (
        "how do i make {m}?",
        "do you know the recipe for {m}?",
        "what do i need to craft {m}?",
    ),
    ("inform_recipe", None): (
        "combine {a} and {b} to get {m}, you need the {tool} for it",
        "{m} comes from stacking {a} with {b}, handled by the {tool}",
        "to craft {m} put {b} on {a} and carry it with the {tool}",
    ),
    ("ask_action", None): (
        "can you hit the {m} for me?",
        "please take care of the {m}, my tools cannot touch it",
        "would you handle the {m}? i am not equipped for it",
    ),
    ("ask_doing", None): (
        "what are you working on?",
        "what are you doing right now?",
        "which task are you on at the moment?",
    ),
    ("inform_doing", None): (
        "i am working on {m}",
        "making {m} now",
        "currently busy with {m}",
    ),
    ("inform_done", None): (
        "i made {m}",
        "{m} is done",
        "finished the {m} just now",
    ),
    ("inform_cannot", NO_TOOL): (
        "i cannot hit {m}, no tool for it",
        "i lack the tool for {m}",
        "my tools do not work on {m}",
    ),
    ("inform_cannot", NO_KNOWLEDGE): (
        "i do not know how to make {m}",
        "no idea how {m} is made",
        "the recipe for {m} is missing from my plan",
    ),
    ("ack", None): (
        "ok",
        "got it",
        "understood",
    ),
}

N_VARIANTS = 3


class Grammar:
    """Renderer/parser bound to a (V, T) vocabulary."""

    def __init__(self, V: int, T: int):
        self.V = V
        self.T = T
        self.mat_name = material_names(V)
        self.tool_name = tool_names(T)
        self.mat_disp = [n.replace("_", " ") for n in self.mat_name]
        self.tool_disp = [n.replace("_", " ") for n in self.tool_name]
        self._mat_by_disp = {d: i for i, d in enumerate(self.mat_disp)}
        self._tool_by_disp = {d: i for i, d in enumerate(self.tool_disp)}
        self._mat_by_name = {n: i for i, n in enumerate(self.mat_name)}
        self._tool_by_name = {n: i for i, n in enumerate(self.tool_name)}
        self._patterns = [
            (kind, reason, re.compile(self._to_regex(text)))
            for (kind, reason), variants in _PARAPHRASES.items()
            for text in variants
        ]

    @staticmethod
    def _to_regex(fmt: str) -> str:
        out = ""
        for part in re.split(r"(\{[abm]\}|\{tool\})", fmt):
            if part.startswith("{"):
                out += f"(?P<{part[1:-1]}>[a-z0-9 ]+?)"
            else:
                out += re.escape(part)
        return out + r"\Z"

    def render_text(self, tpl: Template, variant: int = 0) -> str:
        variants = _PARAPHRASES[(tpl.kind, tpl.reason)]
        fmt = variants[variant % len(variants)]
        return fmt.format(
            m="" if tpl.m is None else self.mat_disp[tpl.m],
            a="" if tpl.a is None else self.mat_disp[tpl.a],
            b="" if tpl.b is None else self.mat_disp[tpl.b],
            tool="" if tpl.tool is None else self.tool_disp[tpl.tool],
        )

    def parse_text(self, text: str) -> Optional[Template]:
        text = text.strip().lower()
        for kind, reason, rx in self._patterns:
            match = rx.match(text)
            if not match:
                continue
            groups = match.groupdict()
            try:
                m = self._mat_by_disp[groups["m"]] if "m" in groups else None
                a = self._mat_by_disp[groups["a"]] if "a" in groups else None
                b = self._mat_by_disp[groups["b"]] if "b" in groups else None
                tool = self._tool_by_disp[groups["tool"]] if "tool" in groups else None
            except KeyError:
                continue
            return Template(kind, m=m, a=a, b=b, tool=tool, reason=reason)
        return None

    def render_line(self, tpl: Template) -> str:
        k = tpl.kind.upper()
        if tpl.kind == "ask_recipe":
            return f"{k} {self.mat_name[tpl.m]}"
        if tpl.kind == "inform_recipe":
            return (
                f"{k} {self.mat_name[tpl.m]} {self.mat_name[tpl.a]} "
                f"{self.mat_name[tpl.b]} {self.tool_name[tpl.tool]}"
            )
        if tpl.kind in ("ask_action", "inform_doing", "inform_done"):
            return f"{k} {self.mat_name[tpl.m]}"
        if tpl.kind == "inform_cannot":
            return f"{k} {self.mat_name[tpl.m]} {tpl.reason}"
        return k

    def parse_line(self, line: str) -> Optional[Template]:
        parts = line.strip().split()
        if not parts:
            return None
        kind = parts[0].lower()
        if kind not in KINDS:
            return None
        args = parts[1:]
        try:
            if kind == "ask_recipe" and len(args) == 1:
                return ask_recipe(self._mat_by_name[args[0]])
            if kind == "inform_recipe" and len(args) == 4:
                return inform_recipe(
                    self._mat_by_name[args[0]],
                    self._mat_by_name[args[1]],
                    self._mat_by_name[args[2]],
                    self._tool_by_name[args[3]],
                )
            if kind == "ask_action" and len(args) == 1:
                return ask_action(self._mat_by_name[args[0]])
            if kind == "ask_doing" and not args:
                return ask_doing()
            if kind == "inform_doing" and len(args) == 1:
                return inform_doing(self._mat_by_name[args[0]])
            if kind == "inform_done" and len(args) == 1:
                return inform_done(self._mat_by_name[args[0]])
            if kind == "inform_cannot" and len(args) == 2 and args[1] in (NO_TOOL, NO_KNOWLEDGE):
                return inform_cannot(self._mat_by_name[args[0]], args[1])
            if kind == "ack" and not args:
                return ack()
        except KeyError:
            return None
        return None
