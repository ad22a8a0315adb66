"""Belief-inference network: multimodal per-second encoders, a causal
sequence core (stacked recurrent or masked self-attention), and one answer
head per question type.

Everything is plain numpy in float64 with hand-written backprop. Parameters
live in one flat dict so the optimizer, gradient checker, and checkpoint
serializer stay generic. Batches are grouped into equal-length buckets (a
question's prefix always ends on a popup boundary, so lengths cluster on a
few values) which keeps every bucket rectangular with no sequence padding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..agents import QUESTION_TYPES
from .features import (
    EVIDENCE_DIMS,
    EpisodeFeatures,
    QuestionInstance,
    Vocabulary,
    dialogue_bags,
    n_classes,
    obs_dim,
    parse_chats,
    subject_dialogue_evidence,
)
from .layers import (
    GRU,
    LSTM,
    MLP,
    AttentionBlock,
    EmbeddingBag,
    Linear,
    sinusoidal_positions,
)

MAGIC = b"DCBNET01"

CORES = ("rnn", "attn")
INPUT_MODES = ("d", "v", "dv")


@dataclass(frozen=True)
class ModelConfig:
    V: int
    T: int
    vocab_size: int
    core: str = "rnn"
    inputs: str = "dv"
    d_emb: int = 32
    d_plan: int = 32
    d_model: int = 64
    n_heads: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.core not in CORES:
            raise ValueError(f"unknown core {self.core!r}")
        if self.inputs not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.inputs!r}")

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.V)

    @property
    def plan_width(self) -> int:
        return 3 * self.V + self.T

    @property
    def q_dim(self) -> int:
        return len(QUESTION_TYPES) + self.V + 5 + EVIDENCE_DIMS + self.plan_width


def question_encoding(qtype: str, subject: Optional[int], perspective: str,
                      V: int, T: int, plan: Optional[np.ndarray] = None,
                      asked_at_ms: int = 0,
                      evidence: Optional[np.ndarray] = None) -> np.ndarray:
    """One-hot type, one-hot subject material (zeros if none), then a small
    scalar block, then the asked player's own plan row for the subject.

    The scalar block is [self bit, clock, censored fraction, subject recipe
    visible, subject is the goal, dialogue evidence]: where the question
    falls in the episode, how much of the asked player's recipe book is
    redacted (zero under shared knowledge, so the head can tell the
    knowledge conditions apart), what the book says about the subject, and
    the typed subject-mention tallies from `subject_dialogue_evidence`. The
    goal bit marks the one crafted material that censoring never touches.
    The plan row itself is appended last as the question-conditioned
    lookup: the head sees the subject's visible children and tool directly
    (or nothing when censored) instead of having to decode that from the
    pooled plan summary.
    """
    k = len(QUESTION_TYPES) + V
    scalars = 5 + EVIDENCE_DIMS
    q = np.zeros(k + scalars + 3 * V + T)
    q[QUESTION_TYPES.index(qtype)] = 1.0
    if subject is not None:
        q[len(QUESTION_TYPES) + subject] = 1.0
    q[k] = 1.0 if perspective == "self" else 0.0
    q[k + 1] = min(asked_at_ms / 300_000.0, 2.0)
    if plan is not None and len(plan):
        censored = np.all(plan[:, 2 * V:] == 0.0, axis=1)
        q[k + 2] = float(censored.mean())
        if subject is not None:
            rows = np.nonzero(plan[:, subject] == 1.0)[0]
            if rows.size:
                row = plan[rows[0]]
                crafted_visible = row[2 * V:3 * V].sum() > 0
                q[k + 3] = 1.0 if crafted_visible else 0.0
                if crafted_visible and row[V:2 * V].sum() == 0:
                    q[k + 4] = 1.0
                q[k + scalars:] = row
    if evidence is not None:
        q[k + 5:k + scalars] = evidence
    return q


# ------------------------------------------------------------------ batching


@dataclass
class Bucket:
    """Rectangular sub-batch: streams sharing one prefix length."""

    length: int  # L = t_end + 1
    obs: np.ndarray  # (S, L, obs_dim)
    tok_ids: np.ndarray  # flat token ids across all (stream, step) bags
    bag_ids: np.ndarray  # aligned bag index = s * L + t
    plan: np.ndarray  # (S, Nmax, plan_width)
    plan_mask: np.ndarray  # (S, Nmax) bool
    questions: list  # (row, instance, q_enc); label -1 marks unscored
    keys: list  # (episode, player) per row


def make_buckets(
    corpus: list[EpisodeFeatures],
    instances: list[QuestionInstance],
    vocab: Vocabulary,
    config: ModelConfig,
) -> list[Bucket]:
    """Group instances into equal-length buckets of deduplicated streams."""
    parsed: dict[int, list] = {}
    by_stream: dict[tuple, list[QuestionInstance]] = {}
    for inst in instances:
        by_stream.setdefault((inst.episode, inst.player, inst.t_end), []).append(inst)
    by_length: dict[int, list[tuple]] = {}
    for key in by_stream:
        by_length.setdefault(key[2] + 1, []).append(key)

    buckets = []
    for length in sorted(by_length):
        keys = sorted(by_length[length])
        obs_rows = []
        tok_ids: list[int] = []
        bag_ids: list[int] = []
        plans = []
        questions = []
        for s, (episode, player, t_end) in enumerate(keys):
            feats = corpus[episode]
            if config.inputs == "d":
                obs_rows.append(np.zeros((length, config.obs_dim)))
            else:
                obs_rows.append(feats.obs[player][:length])
            if config.inputs != "v":
                bags = dialogue_bags(feats, player, vocab, length,
                                     cutoff_ms=t_end * 1000)
                for t, bag in enumerate(bags):
                    tok_ids.extend(bag)
                    bag_ids.extend([s * length + t] * len(bag))
            plans.append(feats.plans[player])
            for inst in by_stream[(episode, player, t_end)]:
                evidence = None
                if inst.subject is not None:
                    if episode not in parsed:
                        parsed[episode] = parse_chats(feats)
                    evidence = subject_dialogue_evidence(
                        parsed[episode], player, inst.subject,
                        inst.asked_at_ms,
                    )
                q_enc = question_encoding(
                    inst.qtype, inst.subject, inst.perspective,
                    config.V, config.T, plan=feats.plans[player],
                    asked_at_ms=inst.asked_at_ms, evidence=evidence,
                )
                questions.append((s, inst, q_enc))
        n_max = max(p.shape[0] for p in plans)
        plan = np.zeros((len(keys), n_max, config.plan_width))
        plan_mask = np.zeros((len(keys), n_max), dtype=bool)
        for s, p in enumerate(plans):
            plan[s, : p.shape[0]] = p
            plan_mask[s, : p.shape[0]] = True
        buckets.append(
            Bucket(
                length=length,
                obs=np.stack(obs_rows),
                tok_ids=np.asarray(tok_ids, dtype=np.int64),
                bag_ids=np.asarray(bag_ids, dtype=np.int64),
                plan=plan,
                plan_mask=plan_mask,
                questions=questions,
                keys=[(k[0], k[1]) for k in keys],
            )
        )
    return buckets


# --------------------------------------------------------------------- model


class BeliefNet:
    """The assembled network; parameters live in `self.params`."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        if config.vocab_size != vocab.size:
            raise ValueError("config.vocab_size disagrees with the vocabulary")
        self.config = config
        self.vocab = vocab
        self.params: dict = {}
        rng = np.random.default_rng(config.seed)
        c = config
        self.bag = EmbeddingBag("dlg", c.vocab_size, c.d_emb, self.params, rng)
        self.obs_mlp = MLP("obs", c.obs_dim, c.d_model, c.d_emb, self.params, rng)
        self.plan_gru = GRU("plan", c.plan_width, c.d_plan, self.params, rng)
        fused = c.d_emb * 2 + c.d_plan
        self.fuse = Linear("fuse", fused, c.d_model, self.params, rng)
        if c.core == "rnn":
            self.rnn1 = LSTM("core1", c.d_model, c.d_model, self.params, rng)
            self.rnn2 = LSTM("core2", c.d_model, c.d_model, self.params, rng)
        else:
            self.blk1 = AttentionBlock("blk1", c.d_model, c.n_heads, self.params, rng)
            self.blk2 = AttentionBlock("blk2", c.d_model, c.n_heads, self.params, rng)
        self.heads = {
            qtype: MLP(
                f"head.{qtype}",
                c.d_model + c.q_dim,
                c.d_model,
                n_classes(qtype, c.V),
                self.params,
                rng,
            )
            for qtype in QUESTION_TYPES
        }

    # ------------------------------------------------------------- forward

    def core_states(self, params: dict, bucket: Bucket) -> tuple[np.ndarray, dict]:
        """Run encoders + sequence core over one bucket; states (S, L, d)."""
        c = self.config
        S, L, _ = bucket.obs.shape
        cache: dict = {}
        dlg_flat, cache["bag"] = self.bag.forward(
            params, bucket.tok_ids, bucket.bag_ids, S * L
        )
        dlg = dlg_flat.reshape(S, L, c.d_emb)
        obs_enc, cache["obs"] = self.obs_mlp.forward(params, bucket.obs)
        plan_h, cache["plan"] = self.plan_gru.forward(
            params, bucket.plan, bucket.plan_mask
        )
        plan_rep = np.broadcast_to(plan_h[:, None, :], (S, L, c.d_plan))
        fused_in = np.concatenate([obs_enc, dlg, plan_rep], axis=2)
        pre, cache["fuse"] = self.fuse.forward(params, fused_in)
        x = np.tanh(pre)
        cache["x"] = x
        full = np.ones((S, L), dtype=bool)
        if c.core == "rnn":
            h1, cache["rnn1"] = self.rnn1.forward(params, x, full)
            states, cache["rnn2"] = self.rnn2.forward(params, h1, full)
        else:
            xp = x + sinusoidal_positions(L, c.d_model)
            h1, cache["blk1"] = self.blk1.forward(params, xp)
            states, cache["blk2"] = self.blk2.forward(params, h1)
        return states, cache

    def core_states_backward(self, params: dict, grads: dict,
                             dstates: np.ndarray, bucket: Bucket,
                             cache: dict) -> None:
        c = self.config
        S, L, _ = bucket.obs.shape
        if c.core == "rnn":
            dh1 = self.rnn2.backward(params, grads, dstates, cache["rnn2"])
            dx = self.rnn1.backward(params, grads, dh1, cache["rnn1"])
        else:
            dh1 = self.blk2.backward(params, grads, dstates, cache["blk2"])
            dx = self.blk1.backward(params, grads, dh1, cache["blk1"])
        x = cache["x"]
        dpre = dx * (1.0 - x * x)
        dfused = self.fuse.backward(params, grads, dpre, cache["fuse"])
        d_obs_enc = dfused[:, :, : c.d_emb]
        d_dlg = dfused[:, :, c.d_emb : 2 * c.d_emb]
        d_plan_rep = dfused[:, :, 2 * c.d_emb :]
        self.obs_mlp.backward(params, grads, d_obs_enc, cache["obs"])
        self.bag.backward(
            params, grads, d_dlg.reshape(S * L, c.d_emb), cache["bag"]
        )
        self.plan_gru.backward(
            params, grads, d_plan_rep.sum(axis=1), cache["plan"]
        )

    def head_logits(self, params: dict, state: np.ndarray, qtype: str,
                    q_enc: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.concatenate([state, q_enc])
        return self.heads[qtype].forward(params, x[None, :])

    def bucket_logits(self, params: dict, bucket: Bucket
                      ) -> tuple[list[np.ndarray], dict]:
        """Logits for every question in the bucket, plus backward caches."""
        states, cache = self.core_states(params, bucket)
        logits = []
        head_caches = []
        for row, inst, q_enc in bucket.questions:
            z, hc = self.head_logits(params, states[row, -1], inst.qtype, q_enc)
            logits.append(z[0])
            head_caches.append(hc)
        cache["heads"] = head_caches
        cache["states_shape"] = states.shape
        return logits, cache

    # ---------------------------------------------------------------- loss

    def loss_and_grads(self, params: dict, buckets: list[Bucket]
                       ) -> tuple[float, dict, int]:
        """Mean cross-entropy over all labeled questions; analytic grads."""
        total_n = sum(
            1 for b in buckets for q in b.questions if q[1].label >= 0
        )
        if total_n == 0:
            raise ValueError("no labeled questions in batch")
        grads: dict = {}
        total_loss = 0.0
        for bucket in buckets:
            logits, cache = self.bucket_logits(params, bucket)
            dstates = np.zeros(cache["states_shape"])
            for i, (row, inst, q_enc) in enumerate(bucket.questions):
                if inst.label < 0:
                    continue
                p = softmax(logits[i])
                total_loss += -np.log(max(p[inst.label], 1e-300))
                dz = p.copy()
                dz[inst.label] -= 1.0
                dz /= total_n
                dx = self.heads[inst.qtype].backward(
                    params, grads, dz[None, :], cache["heads"][i]
                )
                dstates[row, -1] += dx[0, : self.config.d_model]
            self.core_states_backward(params, grads, dstates, bucket, cache)
        for name in params:
            if name not in grads:
                grads[name] = np.zeros_like(params[name])
        return total_loss / total_n, grads, total_n

    def predict(self, params: dict, buckets: list[Bucket]) -> list[int]:
        """Argmax class per question, aligned with bucket_instances order."""
        out = []
        for bucket in buckets:
            logits, _ = self.bucket_logits(params, bucket)
            out.extend(int(np.argmax(z)) for z in logits)
        return out


def bucket_instances(buckets: list[Bucket]) -> list[QuestionInstance]:
    """The question instances in the order predict() emits classes."""
    return [inst for b in buckets for _, inst, _ in b.questions]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


# ----------------------------------------------------------------- optimizer


class Adam:
    """Adaptive per-parameter gradient scaling, the usual moment estimates."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path: str, model: BeliefNet, extra: Optional[dict] = None) -> None:
    """Versioned binary container: magic, JSON metadata header, raw arrays."""
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "model": asdict(model.config),
        "vocab": model.vocab.to_list(),
        "params": manifest,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str) -> tuple[BeliefNet, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        (head_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header["format_version"] != 1:
            raise ValueError(f"unsupported format version {header['format_version']}")
        body = fh.read()
    config = ModelConfig(**header["model"])
    vocab = Vocabulary.from_list(header["vocab"])
    model = BeliefNet(config, vocab)
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype=entry["dtype"], count=count, offset=start)
        model.params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return model, header["extra"]
