"""Live session service: episodes hosted over a JSON message protocol.

The transport-free part is GameSession. Every inbound frame passes through a
ClientStream envelope check and then GameSession.handle(), which mutates the
wrapped GameCore and returns the outbound messages it produced, each addressed
to a player slot. Nothing in this layer touches sockets, so the whole protocol
is unit-testable.

create_app() adds the plumbing: an HTTP endpoint to open sessions, one
WebSocket endpoint per session, and a per-session asyncio lock so the session
object has a single writer. A background ticker advances the episode clock in
live mode (one 250 ms game tick per 250 ms of wall clock by default; the
interval is injectable, which is how headless tests and bots run fast).

See docs/protocol.md for the field-by-field message reference and golden
transcripts.
"""

from __future__ import annotations

import asyncio
import json
import os
import secrets
from collections import deque
from contextlib import asynccontextmanager
from dataclasses import dataclass
from typing import Iterable, Optional

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import PlainTextResponse

from .jsonutil import canonical_dumps
from .recipe import GameConfig, tool_names
from .session import DEFAULT_STEP_CAP, LOG_SUFFIX, GameCore, write_log
from .world import TICK_MS, Action, observe

PROTOCOL_VERSION = 1
MAX_SESSIONS = 64
MAX_QUEUED_ACTIONS = 8
MAX_CHAT_CHARS = 240
HEARTBEAT_SECONDS = 10.0

CLIENT_KINDS = ("join", "action", "chat", "answer")
SERVER_KINDS = (
    "welcome",
    "observation",
    "chat",
    "question",
    "pause",
    "resume",
    "end",
    "error",
)
ACTION_KINDS = ("move", "turn", "hit", "place", "chat", "noop")

# Keys that must never appear anywhere in outbound traffic: they belong to the
# server-side episode record, not to either player's view.
FORBIDDEN_KEYS = ("hidden", "seed", "material_tool")


class ProtocolError(Exception):
    """An inbound frame that violates the envelope or addressing rules."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class Outbound:
    """One server message addressed to a player slot."""

    player: int
    message: dict


class ClientStream:
    """Envelope validation for one client connection.

    Frames must be JSON objects carrying the session id, a strictly
    increasing non-negative integer ``seq``, and a known kind; the first
    accepted frame of a connection must be a join. A sequence number is
    consumed as soon as it validates, so a frame rejected for its kind or
    payload cannot be retried under the same number.
    """

    def __init__(self, session_id: str):
        self.session_id = session_id
        self.last_seq: Optional[int] = None
        self.player: Optional[int] = None

    def accept(self, message) -> dict:
        if not isinstance(message, dict):
            raise ProtocolError("malformed", "frame is not a JSON object")
        if message.get("session") != self.session_id:
            raise ProtocolError(
                "wrong-session", f"this connection serves session {self.session_id!r}"
            )
        seq = message.get("seq")
        if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
            raise ProtocolError("bad-seq", "seq must be a non-negative integer")
        if self.last_seq is not None and seq <= self.last_seq:
            raise ProtocolError(
                "out-of-order", f"seq {seq} not greater than {self.last_seq}"
            )
        self.last_seq = seq
        kind = message.get("kind")
        if kind not in CLIENT_KINDS:
            raise ProtocolError("unknown-kind", f"no such client message kind {kind!r}")
        if self.player is None and kind != "join":
            raise ProtocolError("not-joined", "first message must be a join")
        if self.player is not None and kind == "join":
            raise ProtocolError("already-joined", "connection already holds a slot")
        return message


def plan_view(core: GameCore, player: int) -> dict:
    """The player's censored recipe book.

    Every node keeps its identity; ingredients and tool appear only where the
    player knows the recipe. Mining tools are public knowledge (the skill
    asymmetry is about holding tools, not knowing them), so mined nodes always
    name their tool.
    """
    plan = core.plans[player]
    tnames = tool_names(core.config.T)
    nodes = []
    for node in core.graph.nodes:
        known = plan.knows_recipe(node.material)
        entry: dict = {
            "material": node.material,
            "name": core.names[node.material],
            "mined": node.is_mined,
            "known": known,
        }
        if node.is_mined or known:
            entry["tool"] = node.tool
            entry["tool_name"] = tnames[node.tool]
        if known and not node.is_mined:
            entry["ingredients"] = list(node.ingredients)
        nodes.append(entry)
    return {"goal": core.graph.goal, "goal_name": core.names[core.graph.goal], "nodes": nodes}


class GameSession:
    """One hosted episode: slots, queues, and the message protocol.

    All outbound messages are produced here and recorded in ``transcript``
    (player slot, message) in send order, which is what the censorship audit
    inspects. The caller is responsible for serializing access.
    """

    def __init__(
        self,
        session_id: str,
        config: GameConfig,
        step_cap: int = DEFAULT_STEP_CAP,
        tokens: Optional[tuple[str, str]] = None,
        command: Optional[str] = None,
    ):
        if tokens is None:
            tokens = (secrets.token_hex(8), secrets.token_hex(8))
        if len(tokens) != 2 or tokens[0] == tokens[1]:
            raise ValueError("sessions need two distinct join tokens")
        self.id = session_id
        self.core = GameCore(config, step_cap=step_cap, command=command)
        self.tokens = tuple(tokens)
        self.joined = [False, False]
        self.queues: tuple[deque, deque] = (deque(), deque())
        self.out_seq = [0, 0]
        self.transcript: list[Outbound] = []
        self.chat_log: list[dict] = []

    # ----------------------------------------------------------------- state

    @property
    def state(self) -> str:
        if self.core.ended:
            return "finished"
        if self.core.paused:
            return "paused"
        if all(self.joined):
            return "running"
        return "waiting"

    def descriptor(self, with_tokens: bool = False) -> dict:
        d = {
            "session": self.id,
            "protocol": PROTOCOL_VERSION,
            "state": self.state,
            "config": {
                "skills": self.core.config.skills,
                "knowledge": self.core.config.knowledge,
                "V": self.core.config.V,
                "T": self.core.config.T,
            },
            "players": [
                {"player": i, "joined": self.joined[i]} for i in (0, 1)
            ],
        }
        if with_tokens:
            d["tokens"] = list(self.tokens)
            d["seed"] = self.core.config.seed
        return d

    # -------------------------------------------------------------- outbound

    def _send(self, to: int, kind: str, **payload) -> Outbound:
        message = {
            "session": self.id,
            "seq": self.out_seq[to],
            "kind": kind,
            **payload,
        }
        self.out_seq[to] += 1
        out = Outbound(to, message)
        self.transcript.append(out)
        return out

    def bump_out_seq(self, player: int, floor: int) -> None:
        """Keep a reconnecting socket's stream monotone when pre-join errors
        already consumed sequence numbers on that connection."""
        if floor > self.out_seq[player]:
            self.out_seq[player] = floor

    def error(self, player: int, code: str, detail: str = "") -> Outbound:
        return self._send(player, "error", error=code, detail=detail)

    def observation_message(self, player: int) -> Outbound:
        obs = observe(self.core.world, player)
        return self._send(
            player,
            "observation",
            state=self.state,
            popup=self.core.popups_done,
            obs=obs.to_dict(),
        )

    # ------------------------------------------------------------------ join

    def resolve_token(self, token) -> int:
        if token not in self.tokens:
            raise ProtocolError("bad-token", "no player slot matches this token")
        return self.tokens.index(token)

    def join(self, token) -> tuple[int, list[Outbound]]:
        """Attach a token to its slot; returns the full resync bundle.

        A repeat join with the same token is a reconnect and replays the
        current state: welcome (with chat history), observation, and any
        open pause/questions addressed to this player.
        """
        player = self.resolve_token(token)
        fresh = not self.joined[player]
        self.joined[player] = True

        outs = [
            self._send(
                player,
                "welcome",
                protocol=PROTOCOL_VERSION,
                player=player,
                state=self.state,
                config={
                    "skills": self.core.config.skills,
                    "knowledge": self.core.config.knowledge,
                    "V": self.core.config.V,
                    "T": self.core.config.T,
                },
                world={"W": self.core.world.W, "H": self.core.world.H},
                step_cap=self.core.step_cap,
                plan=plan_view(self.core, player),
                tools=sorted(self.core.tools.player_tools[player]),
                tool_names=list(tool_names(self.core.config.T)),
                material_names=list(self.core.names),
                chat=list(self.chat_log),
            ),
            self.observation_message(player),
        ]
        if self.core.paused:
            outs.append(
                self._send(player, "pause", popup=self.core.popups_done - 1,
                           clock_ms=self.core.world.clock_ms)
            )
            for q in self.core.open_questions(player):
                outs.append(self._send(player, "question", question=q.to_dict()))
        if self.core.ended:
            outs.append(
                self._send(player, "end", success=self.core.success,
                           reason="goal" if self.core.success else "step-cap")
            )
        if fresh and all(self.joined) and not self.core.ended:
            # the second join starts the game; give the partner a snapshot
            # that already says "running"
            outs.append(self.observation_message(1 - player))
        return player, outs

    # -------------------------------------------------------------- handling

    def handle(self, player: int, message: dict) -> list[Outbound]:
        """Dispatch one validated client message; returns outbound messages.

        Game-state rejections (acting while paused, malformed payloads, bad
        answers) come back as error messages to the sender; the connection is
        never torn down for them.
        """
        kind = message.get("kind")
        if kind == "action":
            return self._handle_action(player, message.get("action"))
        if kind == "chat":
            return self._handle_chat(player, message.get("text"))
        if kind == "answer":
            return self._handle_answer(player, message.get("qid"), message.get("value"))
        raise ProtocolError("unknown-kind", f"no such client message kind {kind!r}")

    def _queue(self, player: int, action: Action) -> list[Outbound]:
        if self.core.ended:
            return [self.error(player, "ended", "the episode is over")]
        if len(self.queues[player]) >= MAX_QUEUED_ACTIONS:
            return [self.error(player, "queue-full", "too many unprocessed actions")]
        self.queues[player].append(action)
        return []

    def _handle_action(self, player: int, data) -> list[Outbound]:
        if not isinstance(data, dict):
            return [self.error(player, "bad-action", "action must be an object")]
        try:
            action = Action.from_dict(data)
        except (KeyError, TypeError):
            return [self.error(player, "bad-action", "unparseable action object")]
        if action.kind not in ACTION_KINDS:
            return [self.error(player, "bad-action", f"unknown kind {action.kind!r}")]
        if action.kind == "chat":
            return [self.error(player, "bad-action", "send chat as a chat message")]
        if self.core.paused:
            return [
                self.error(player, "paused", "actions are rejected while a popup is open")
            ]
        if action.actor != player:
            action = Action(
                action.kind,
                player,
                direction=action.direction,
                material=action.material,
                text=action.text,
            )
        return self._queue(player, action)

    def _handle_chat(self, player: int, text) -> list[Outbound]:
        if not isinstance(text, str) or not text.strip():
            return [self.error(player, "bad-chat", "chat needs non-empty text")]
        if len(text) > MAX_CHAT_CHARS:
            return [self.error(player, "bad-chat", f"chat longer than {MAX_CHAT_CHARS} chars")]
        # chat is an in-game action: it is applied (and echoed) on the next
        # tick, so a chat sent during a popup lands right after the resume
        return self._queue(player, Action("chat", player, text=text))

    def _handle_answer(self, player: int, qid, value) -> list[Outbound]:
        if not isinstance(qid, str) or not isinstance(value, str):
            return [self.error(player, "bad-answer", "answer needs string qid and value")]
        try:
            events = self.core.submit_answer(player, qid, value)
        except RuntimeError:
            return [self.error(player, "no-popup", "no popup is awaiting answers")]
        except KeyError:
            return [self.error(player, "bad-answer", f"no open question {qid!r} for you")]
        except ValueError:
            return [self.error(player, "bad-answer", f"value {value!r} not in the answer space")]
        outs = self._translate(events)
        if not self.core.paused:
            # both players finished the popup: follow the resume broadcast
            # with fresh snapshots so clients re-enable input immediately
            for p in (0, 1):
                outs.append(self.observation_message(p))
        return outs

    # ------------------------------------------------------------------ tick

    def tick(self) -> list[Outbound]:
        """Advance one game tick using the queued actions (noop when idle)."""
        if not all(self.joined):
            raise RuntimeError("cannot tick before both players join")
        actions = {}
        for player in (0, 1):
            if self.queues[player]:
                actions[player] = self.queues[player].popleft()
        outs = self._translate(self.core.step(actions))
        for player in (0, 1):
            outs.append(self.observation_message(player))
        return outs

    def _translate(self, events: Iterable[dict]) -> list[Outbound]:
        """Map episode-log events to addressed wire messages.

        Accepted world actions stay silent (the next observation carries the
        effect); answers stay private; digests are log-internal.
        """
        outs: list[Outbound] = []
        for ev in events:
            etype = ev["type"]
            payload = ev["payload"]
            if etype == "chat":
                entry = {"from": ev["actor"], "text": payload["text"], "ts_ms": ev["ts_ms"]}
                self.chat_log.append(entry)
                for p in (0, 1):
                    outs.append(self._send(p, "chat", **entry))
            elif etype == "action":
                if ev.get("rejected"):
                    outs.append(
                        self._send(
                            ev["actor"],
                            "error",
                            error="action-rejected",
                            detail=payload.get("reason", ""),
                            action=payload.get("action"),
                        )
                    )
            elif etype == "question":
                outs.append(
                    self._send(payload["asked_to"], "question", question=dict(payload))
                )
            elif etype == "pause":
                for p in (0, 1):
                    outs.append(
                        self._send(p, "pause", popup=payload["popup"], clock_ms=ev["ts_ms"])
                    )
            elif etype == "resume":
                for p in (0, 1):
                    outs.append(self._send(p, "resume", clock_ms=ev["ts_ms"]))
            elif etype == "end":
                for p in (0, 1):
                    outs.append(
                        self._send(
                            p, "end", success=payload["success"], reason=payload["reason"]
                        )
                    )
        return outs

    # ------------------------------------------------------------------ misc

    def log_lines(self) -> list[str]:
        return self.core.log_lines()


# ------------------------------------------------------------------- audit


def _iter_keys(obj):
    if isinstance(obj, dict):
        for key, value in obj.items():
            yield key
            yield from _iter_keys(value)
    elif isinstance(obj, (list, tuple)):
        for value in obj:
            yield from _iter_keys(value)


def audit_transcript(session: GameSession) -> list[str]:
    """Information-hygiene audit over every outbound message of a session.

    Checks, structurally, that each message to player i is derivable from that
    player's own view: plan payloads never carry a censored node's ingredients
    or tool, tool lists never exceed the player's own kit, questions only go
    to the player they were asked to, answers never appear at all, partner
    fields only appear when the observation claims visibility, and no message
    contains server-private keys (hidden sets, seeds, the tool map). Returns a
    list of violation descriptions; an empty list means the traffic is clean.
    """
    violations = []
    hidden = {p: set(session.core.plans[p].hidden) for p in (0, 1)}
    own_tools = {p: set(session.core.tools.player_tools[p]) for p in (0, 1)}
    for idx, out in enumerate(session.transcript):
        player, msg = out.player, out.message
        where = f"message {idx} ({msg.get('kind')}) to player {player}"
        for key in _iter_keys(msg):
            if key in FORBIDDEN_KEYS:
                violations.append(f"{where}: forbidden key {key!r}")
        kind = msg.get("kind")
        if kind not in SERVER_KINDS:
            violations.append(f"{where}: unknown server kind")
        if kind == "welcome":
            for node in msg["plan"]["nodes"]:
                if node["material"] in hidden[player]:
                    leaked = [k for k in ("ingredients", "tool", "tool_name") if k in node]
                    if node.get("known") or leaked:
                        violations.append(
                            f"{where}: censored node {node['material']} leaks {leaked}"
                        )
            if not set(msg["tools"]) <= own_tools[player]:
                violations.append(f"{where}: tool list exceeds player's own kit")
        elif kind == "observation":
            obs = msg["obs"]
            if obs.get("player") != player:
                violations.append(f"{where}: observation for the wrong player")
            if not set(obs.get("tools", ())) <= own_tools[player]:
                violations.append(f"{where}: observation tools exceed own kit")
            if not obs.get("partner_visible"):
                for key in ("partner_pos", "partner_facing", "partner_last_action"):
                    if key in obs:
                        violations.append(f"{where}: {key} present while partner hidden")
        elif kind == "question":
            if msg["question"].get("asked_to") != player:
                violations.append(f"{where}: question addressed to the other player")
        elif kind == "answer":
            violations.append(f"{where}: answers must never be sent on the wire")
    return violations


# ----------------------------------------------------------------- FastAPI


def create_app(
    tick_seconds: Optional[float] = None,
    out_dir: Optional[str] = None,
    max_sessions: int = MAX_SESSIONS,
):
    """Build the FastAPI app hosting live sessions.

    ``tick_seconds`` is the wall-clock interval between game ticks (defaults
    to one 250 ms tick per 250 ms wall, i.e. real-time; override via the
    DUOCRAFT_TICK_MS environment variable or directly for fast headless
    runs). Finished episode logs are written under ``out_dir`` when given (or
    DUOCRAFT_OUT), and are always available over GET /sessions/{id}/log.
    """
    if tick_seconds is None:
        tick_seconds = float(os.environ.get("DUOCRAFT_TICK_MS", str(TICK_MS))) / 1000.0
    if out_dir is None:
        out_dir = os.environ.get("DUOCRAFT_OUT") or None

    class Runtime:
        def __init__(self, session: GameSession):
            self.session = session
            self.lock = asyncio.Lock()
            self.sockets: dict[int, WebSocket] = {}
            self.ticker: Optional[asyncio.Task] = None
            self.last_sent: dict[int, float] = {}
            self.log_written = False

    runtimes: dict[str, Runtime] = {}

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for rt in runtimes.values():
            if rt.ticker is not None:
                rt.ticker.cancel()
            finish_log(rt)

    app = FastAPI(title="duocraft session server", lifespan=lifespan)
    app.state.runtimes = runtimes

    def get_runtime(session_id: str) -> Runtime:
        rt = runtimes.get(session_id)
        if rt is None:
            raise HTTPException(status_code=404, detail="no such session")
        return rt

    async def deliver(rt: Runtime, outs: list[Outbound]) -> None:
        loop = asyncio.get_running_loop()
        for out in outs:
            ws = rt.sockets.get(out.player)
            if ws is None:
                continue
            try:
                await ws.send_text(canonical_dumps(out.message))
                rt.last_sent[out.player] = loop.time()
            except Exception:
                rt.sockets.pop(out.player, None)

    def finish_log(rt: Runtime) -> None:
        if rt.log_written or not rt.session.core.ended or out_dir is None:
            return
        name = f"live-{rt.session.core.config.name}-{rt.session.id}{LOG_SUFFIX}"
        os.makedirs(out_dir, exist_ok=True)
        write_log(os.path.join(out_dir, name), rt.session.log_lines())
        rt.log_written = True

    async def run_session(rt: Runtime) -> None:
        loop = asyncio.get_running_loop()
        while True:
            await asyncio.sleep(tick_seconds)
            async with rt.lock:
                if rt.session.core.ended:
                    finish_log(rt)
                    return
                if rt.session.state == "running":
                    outs = rt.session.tick()
                else:
                    # waiting or paused: keep connections warm with a
                    # snapshot once they have been idle for the heartbeat
                    outs = []
                    now = loop.time()
                    for player, ws in list(rt.sockets.items()):
                        if now - rt.last_sent.get(player, 0.0) >= HEARTBEAT_SECONDS:
                            outs.append(rt.session.observation_message(player))
                if rt.session.core.ended:
                    finish_log(rt)
                await deliver(rt, outs)
                if rt.session.core.ended:
                    return

    @app.post("/sessions")
    async def open_session(body: dict):
        if len(runtimes) >= max_sessions:
            raise HTTPException(status_code=409, detail="session capacity exceeded")
        try:
            config = GameConfig(
                skills=body.get("skills", "shared"),
                knowledge=body.get("knowledge", "shared"),
                seed=int(body.get("seed", 0)),
                V=int(body.get("V", 22)),
                T=int(body.get("T", 3)),
            )
            session = GameSession(
                session_id=secrets.token_hex(6),
                config=config,
                step_cap=int(body.get("step_cap", DEFAULT_STEP_CAP)),
            )
        except Exception as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        runtimes[session.id] = Runtime(session)
        return session.descriptor(with_tokens=True)

    @app.get("/sessions/{session_id}")
    async def describe(session_id: str):
        return get_runtime(session_id).session.descriptor()

    @app.get("/sessions/{session_id}/log")
    async def episode_log(session_id: str):
        rt = get_runtime(session_id)
        async with rt.lock:
            text = "\n".join(rt.session.log_lines()) + "\n"
        return PlainTextResponse(text, media_type="application/jsonl")

    @app.get("/sessions/{session_id}/transcript")
    async def wire_transcript(session_id: str):
        rt = get_runtime(session_id)
        async with rt.lock:
            msgs = [[out.player, out.message] for out in rt.session.transcript]
        return {"messages": msgs}

    @app.websocket("/ws/{session_id}")
    async def websocket_endpoint(websocket: WebSocket, session_id: str):
        await websocket.accept()
        rt = runtimes.get(session_id)
        loop = asyncio.get_running_loop()
        stream = ClientStream(session_id)
        conn_seq = 0  # outbound counter for pre-join errors on this socket

        async def send_error(code: str, detail: str) -> None:
            nonlocal conn_seq
            if stream.player is not None and rt is not None:
                async with rt.lock:
                    out = rt.session.error(stream.player, code, detail)
                await deliver(rt, [out])
            else:
                await websocket.send_text(
                    canonical_dumps(
                        {
                            "session": session_id,
                            "seq": conn_seq,
                            "kind": "error",
                            "error": code,
                            "detail": detail,
                        }
                    )
                )
                conn_seq += 1

        if rt is None:
            await send_error("unknown-session", "open a session over POST /sessions first")
            await websocket.close(code=1008)
            return

        try:
            while True:
                try:
                    text = await websocket.receive_text()
                except WebSocketDisconnect:
                    break
                try:
                    data = json.loads(text)
                except ValueError:
                    await send_error("malformed-json", "frame is not valid JSON")
                    continue
                try:
                    message = stream.accept(data)
                except ProtocolError as exc:
                    await send_error(exc.code, exc.detail)
                    continue
                if message["kind"] == "join":
                    async with rt.lock:
                        try:
                            player = rt.session.resolve_token(message.get("token"))
                            rt.session.bump_out_seq(player, conn_seq)
                            player, outs = rt.session.join(message.get("token"))
                        except ProtocolError as exc:
                            err = exc
                        else:
                            err = None
                            stream.player = player
                            old = rt.sockets.get(player)
                            rt.sockets[player] = websocket
                            rt.last_sent[player] = loop.time()
                    if err is not None:
                        await send_error(err.code, err.detail)
                        continue
                    if old is not None and old is not websocket:
                        try:
                            await old.close(code=1000)
                        except Exception:
                            pass
                    await deliver(rt, outs)
                    if rt.ticker is None or rt.ticker.done():
                        rt.ticker = asyncio.create_task(run_session(rt))
                else:
                    async with rt.lock:
                        outs = rt.session.handle(stream.player, message)
                    await deliver(rt, outs)
        finally:
            if stream.player is not None and rt.sockets.get(stream.player) is websocket:
                rt.sockets.pop(stream.player, None)

    return app
