"""Feature extraction: episode logs -> per-second model inputs.

Logs carry only inputs and digests, so the world trajectory is reconstructed
by replaying the log through a fresh game core and sampling each player's
observation once per second of unpaused clock time. Dialogue stays symbolic
here (token ids per one-second window); the trainable embedding lives in the
model. Question instances are the other-perspective popup questions, labeled
with the paired self-report of the subject player.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..agents import CURRENT_TASK
from ..chat import NO_KNOWLEDGE, Grammar
from ..recipe import serialize_plan_tuples
from ..session import GameCore, config_from_header, extract_inputs, parse_log
from ..world import BLOCK, DIRECTIONS, INVENTORY_CAP, SOURCE, STACK, Observation, observe

YMN_INDEX = {"yes": 0, "maybe": 1, "no": 2}

OOV = 0
SELF_MARK = 1
PARTNER_MARK = 2
_RESERVED = ("<oov>", "<self>", "<partner>")

EXTRA_DIMS = 16


def obs_dim(V: int) -> int:
    return 4 * V + EXTRA_DIMS


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Token table with reserved rows for OOV and speaker markers."""

    index: dict

    @staticmethod
    def build(texts: list[str]) -> "Vocabulary":
        index = {tok: i for i, tok in enumerate(_RESERVED)}
        for text in texts:
            for tok in tokenize(text):
                if tok not in index:
                    index[tok] = len(index)
        return Vocabulary(index)

    @property
    def size(self) -> int:
        return len(self.index)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, OOV) for tok in tokenize(text)]

    def to_list(self) -> list[str]:
        return [tok for tok, _ in sorted(self.index.items(), key=lambda kv: kv[1])]

    @staticmethod
    def from_list(tokens: list[str]) -> "Vocabulary":
        return Vocabulary({tok: i for i, tok in enumerate(tokens)})


def observation_vector(obs: Observation, V: int, W: int, H: int) -> np.ndarray:
    """Fixed-width symbolic rasterization of one player's field of view."""
    v = np.zeros(obs_dim(V))
    for _, _, cell in obs.visible_cells:
        if cell.kind == SOURCE:
            v[cell.a] += 1.0
        elif cell.kind == BLOCK:
            v[V + cell.a] += 1.0
        elif cell.kind == STACK:
            v[V + cell.a] += 1.0
            v[2 * V + cell.b] += 1.0
    for m in obs.own.inventory:
        v[3 * V + m] += 1.0
    k = 4 * V
    v[k + 0] = obs.own.pos[0] / W
    v[k + 1] = obs.own.pos[1] / H
    v[k + 2 + DIRECTIONS.index(obs.own.facing)] = 1.0
    v[k + 6] = 1.0 if obs.partner_visible else 0.0
    if obs.partner_visible and obs.partner_pos is not None:
        v[k + 7] = obs.partner_pos[0] / W
        v[k + 8] = obs.partner_pos[1] / H
        if obs.partner_facing is not None:
            v[k + 9 + DIRECTIONS.index(obs.partner_facing)] = 1.0
    v[k + 13] = len(obs.visible_cells) / (W * H)
    v[k + 14] = len(obs.own.inventory) / INVENTORY_CAP
    v[k + 15] = min(obs.clock_ms / 300_000.0, 2.0)
    return v


@dataclass
class EpisodeFeatures:
    """One replayed episode: per-player observation streams plus raw chat."""

    config: str
    seed: int
    V: int
    n_steps: int
    obs: tuple  # two arrays, each (n_steps, obs_dim)
    chats: list  # (ts_ms, speaker, text), ascending ts
    plans: tuple  # two arrays, each (n_nodes, 3V+T)
    duration_ms: int = 0
    questions: list = field(default_factory=list)  # question payload dicts
    answers: dict = field(default_factory=dict)  # qid -> value


def episode_features(lines: list[str]) -> EpisodeFeatures:
    """Replay a log and sample both players' observations at 1 Hz.

    Samples land on every whole second of unpaused clock time, starting with
    the spawn state at t=0; paused stretches contribute nothing because the
    clock does not advance while a popup is open.
    """
    header, events = parse_log(lines)
    config = config_from_header(header)
    core = GameCore(
        config,
        step_cap=header["step_cap"],
        W=header["world"]["W"],
        H=header["world"]["H"],
        command=header.get("command"),
    )
    V = config.V
    W, H = core.world.W, core.world.H
    samples: list[tuple[np.ndarray, np.ndarray]] = [
        tuple(observation_vector(observe(core.world, p), V, W, H) for p in (0, 1))
    ]
    for item in extract_inputs(events):
        if item[0] == "tick":
            core.step({0: item[1], 1: item[2]})
            if core.world.clock_ms % 1000 == 0:
                samples.append(
                    tuple(observation_vector(observe(core.world, p), V, W, H) for p in (0, 1))
                )
        else:
            core.submit_answer(item[1], item[2], item[3])

    chats = [
        (ev["ts_ms"], ev["actor"], ev["payload"]["text"])
        for ev in events
        if ev["type"] == "chat"
    ]
    questions = [ev["payload"] for ev in events if ev["type"] == "question"]
    answers = {
        ev["payload"]["qid"]: ev["payload"]["value"]
        for ev in events
        if ev["type"] == "answer"
    }
    obs0 = np.stack([s[0] for s in samples])
    obs1 = np.stack([s[1] for s in samples])
    return EpisodeFeatures(
        config=f"{config.skills}-{config.knowledge}",
        seed=config.seed,
        V=V,
        n_steps=len(samples),
        obs=(obs0, obs1),
        chats=chats,
        plans=tuple(serialize_plan_tuples(plan) for plan in core.plans),
        duration_ms=events[-1]["ts_ms"] if events else 0,
        questions=questions,
        answers=answers,
    )


def dialogue_bags(
    feats: EpisodeFeatures,
    player: int,
    vocab: Vocabulary,
    n_steps: int,
    cutoff_ms: Optional[int] = None,
) -> list[list[int]]:
    """Token bag per one-second window [t, t+1), from `player`'s perspective.

    Each utterance contributes a speaker marker plus its tokens. Chats at or
    after `cutoff_ms` are dropped, which empties the final window of a popup
    prefix: the popup fires exactly on the second boundary, so everything said
    after the resume shares that window but happened after the question.
    """
    bags: list[list[int]] = [[] for _ in range(n_steps)]
    for ts, speaker, text in feats.chats:
        step = ts // 1000
        if step >= n_steps:
            continue
        if cutoff_ms is not None and ts >= cutoff_ms:
            continue
        mark = SELF_MARK if speaker == player else PARTNER_MARK
        bags[step].append(mark)
        bags[step].extend(vocab.encode(text))
    return bags


EVIDENCE_DIMS = 8

_GRAMMARS: dict[tuple[int, int], Grammar] = {}


def _grammar(V: int, T: int) -> Grammar:
    key = (V, T)
    if key not in _GRAMMARS:
        _GRAMMARS[key] = Grammar(V, T)
    return _GRAMMARS[key]


def parse_chats(feats: "EpisodeFeatures") -> list[tuple]:
    """(ts, speaker, parsed template or None) for every chat in the episode.

    Parsing uses the same public utterance grammar the agents speak, so the
    extractor reads exactly what any listener of the dialogue could read.
    """
    g = _grammar(feats.V, feats.plans[0].shape[1] - 3 * feats.V)
    return [(ts, sp, g.parse_text(text)) for ts, sp, text in feats.chats]


def subject_dialogue_evidence(
    parsed: list[tuple], player: int, subject: int, asked_at_ms: int
) -> np.ndarray:
    """log1p counts of typed utterances about `subject` before `asked_at_ms`.

    Slots, with "partner" meaning the other speaker from `player`'s seat:
    partner asked for the recipe, partner announced completing it, partner
    said they cannot make it, partner stated its recipe, then the same
    ask/state pair for the player's own utterances, own completion
    announcements, and partner claiming it as their current task. A recipe
    request is the direct public signal that the speaker lacks the recipe,
    and a recipe statement teaches it to whoever hears it, so these tallies
    carry the knowledge-tracking evidence the pooled dialogue stream only
    holds implicitly.
    """
    v = np.zeros(EVIDENCE_DIMS)
    for ts, speaker, tpl in parsed:
        if ts >= asked_at_ms or tpl is None or tpl.m != subject:
            continue
        own = speaker == player
        if tpl.kind == "ask_recipe":
            v[4 if own else 0] += 1.0
        elif tpl.kind == "inform_done":
            v[6 if own else 1] += 1.0
        elif tpl.kind == "inform_cannot" and tpl.reason == NO_KNOWLEDGE:
            if not own:
                v[2] += 1.0
        elif tpl.kind == "inform_recipe":
            v[5 if own else 3] += 1.0
        elif tpl.kind == "inform_doing":
            if not own:
                v[7] += 1.0
    return np.log1p(v)


@dataclass(frozen=True)
class QuestionInstance:
    """One popup question bound to the asked player's input stream.

    Training instances are always other-perspective with the paired
    self-report as label; unlabeled instances (label -1) can still be
    batched for inference.
    """

    episode: int
    player: int  # the asked player, whose input stream the model consumes
    qid: str
    qtype: str
    subject: Optional[int]
    asked_at_ms: int
    t_end: int  # stream prefix length - 1; == asked_at_ms // 1000
    label: int
    label_text: str
    perspective: str = "other"


def answer_to_index(qtype: str, value: str, names: list[str], V: int) -> int:
    """Map an answer string to its class index in the question's space."""
    if qtype == CURRENT_TASK:
        if value == "nothing":
            return V
        return names.index(value)
    return YMN_INDEX[value]


def index_to_answer(qtype: str, index: int, names: list[str], V: int) -> str:
    if qtype == CURRENT_TASK:
        return "nothing" if index == V else names[index]
    return ("yes", "maybe", "no")[index]


def n_classes(qtype: str, V: int) -> int:
    return V + 1 if qtype == CURRENT_TASK else 3


def question_instances(
    feats: EpisodeFeatures, episode: int, names: list[str]
) -> list[QuestionInstance]:
    """Build labeled instances from one episode's answered question pairs.

    For each popup group the other-perspective question becomes an instance;
    its label is the answer the subject player reported about themself on the
    paired self-perspective question.
    """
    groups: dict[str, list[dict]] = {}
    for q in feats.questions:
        groups.setdefault(q["group"], []).append(q)
    out = []
    for group in sorted(groups):
        qs = groups[group]
        if len(qs) != 2:
            continue
        if any(q["qid"] not in feats.answers for q in qs):
            continue
        other = next((q for q in qs if q["perspective"] == "other"), None)
        self_q = next((q for q in qs if q["perspective"] == "self"), None)
        if other is None or self_q is None:
            continue
        value = feats.answers[self_q["qid"]]
        out.append(
            QuestionInstance(
                episode=episode,
                player=other["asked_to"],
                qid=other["qid"],
                qtype=other["type"],
                subject=other["subject"],
                asked_at_ms=other["asked_at_ms"],
                t_end=other["asked_at_ms"] // 1000,
                label=answer_to_index(other["type"], value, names, feats.V),
                label_text=value,
            )
        )
    return out
