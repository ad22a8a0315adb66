"""Training loop: stratified splits, batched epochs, early stop on
validation F1.

A batch is every labeled question of eight episodes; epochs reshuffle the
episode order deterministically from the run seed. The vocabulary is built
from the training split only, so validation and test tokens unseen in
training map to the shared OOV row.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

from ..agents import QUESTION_TYPES
from ..analysis import weighted_f1_fraction
from ..recipe import material_names
from ..seeding import child_seed
from .features import (
    EpisodeFeatures,
    QuestionInstance,
    Vocabulary,
    n_classes,
    question_instances,
)
from .model import Adam, BeliefNet, ModelConfig, bucket_instances, make_buckets

EPISODES_PER_BATCH = 4


@dataclass(frozen=True)
class TrainConfig:
    core: str = "rnn"
    inputs: str = "dv"
    seed: int = 0
    split_seed: int = 0  # kept apart so grid cells share one split
    lr: float = 2e-3
    max_epochs: int = 40
    patience: int = 8
    episodes_per_batch: int = EPISODES_PER_BATCH
    track_train_accuracy: bool = False  # adds train_acc to curves, stops at 1.0


@dataclass
class TrainResult:
    model: BeliefNet
    split: dict  # {"train": [...], "val": [...], "test": [...]}
    instances: dict  # split name -> list[QuestionInstance]
    curves: list  # one dict per epoch
    best_epoch: int
    val_f1: float


def split_corpus(corpus: list[EpisodeFeatures], seed: int = 0) -> dict:
    """60/20/20 split stratified by game length.

    Episodes are sorted by step count and sliced into runs of five; each run
    contributes three to train, one to validation, one to test, with the
    assignment order shuffled per run.
    """
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i].n_steps, i))
    rng = random.Random(child_seed(seed, "split"))
    split = {"train": [], "val": [], "test": []}
    for start in range(0, len(order), 5):
        block = order[start : start + 5]
        roles = ["train", "train", "train", "val", "test"][: len(block)]
        rng.shuffle(roles)
        for idx, role in zip(block, roles):
            split[role].append(idx)
    for key in split:
        split[key].sort()
    return split


def corpus_instances(
    corpus: list[EpisodeFeatures], episodes: list[int]
) -> list[QuestionInstance]:
    out = []
    for i in episodes:
        names = material_names(corpus[i].V)
        out.extend(question_instances(corpus[i], i, names))
    return out


def predict_instances(
    model: BeliefNet, corpus: list[EpisodeFeatures], instances: list[QuestionInstance]
) -> list[tuple[QuestionInstance, int]]:
    """(instance, predicted class) pairs; order follows bucket layout."""
    if not instances:
        return []
    buckets = make_buckets(corpus, instances, model.vocab, model.config)
    preds = model.predict(model.params, buckets)
    return list(zip(bucket_instances(buckets), preds))


def f1_by_type(
    pairs: list[tuple[QuestionInstance, int]], V: int
) -> dict[str, Fraction]:
    out = {}
    for qtype in QUESTION_TYPES:
        y_true = [inst.label for inst, _ in pairs if inst.qtype == qtype]
        y_pred = [p for inst, p in pairs if inst.qtype == qtype]
        if y_true:
            out[qtype] = weighted_f1_fraction(y_true, y_pred, n_classes(qtype, V))
    return out


def overall_f1(
    pairs: list[tuple[QuestionInstance, int]], V: int
) -> float:
    """Per-type weighted F1 combined with weights = instance counts."""
    per_type = f1_by_type(pairs, V)
    total = 0.0
    n = 0
    for qtype, f1 in per_type.items():
        k = sum(1 for inst, _ in pairs if inst.qtype == qtype)
        total += float(f1) * k
        n += k
    return total / n if n else 0.0


def train_model(
    corpus: list[EpisodeFeatures],
    config: TrainConfig,
    split: Optional[dict] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    if not corpus:
        raise ValueError("empty corpus")
    V = corpus[0].V
    if any(f.V != V for f in corpus):
        raise ValueError("mixed vocabulary sizes in corpus")
    T = corpus[0].plans[0].shape[1] - 3 * V

    if split is None:
        split = split_corpus(corpus, config.split_seed)
    instances = {
        name: corpus_instances(corpus, episodes) for name, episodes in split.items()
    }
    if not instances["train"]:
        raise ValueError("training split has no answered question pairs")

    vocab = Vocabulary.build(
        [text for i in split["train"] for _, _, text in corpus[i].chats]
    )
    mconfig = ModelConfig(
        V=V,
        T=T,
        vocab_size=vocab.size,
        core=config.core,
        inputs=config.inputs,
        seed=config.seed,
    )
    model = BeliefNet(mconfig, vocab)
    opt = Adam(model.params, lr=config.lr)
    order_rng = random.Random(child_seed(config.seed, "epoch-order"))

    by_episode: dict[int, list[QuestionInstance]] = {}
    for inst in instances["train"]:
        by_episode.setdefault(inst.episode, []).append(inst)
    train_episodes = sorted(by_episode)

    curves = []
    best_f1 = -1.0
    best_epoch = -1
    best_params: dict = {}
    for epoch in range(config.max_epochs):
        order = list(train_episodes)
        order_rng.shuffle(order)
        epoch_loss = 0.0
        epoch_n = 0
        for start in range(0, len(order), config.episodes_per_batch):
            chunk = order[start : start + config.episodes_per_batch]
            batch = [inst for ep in chunk for inst in by_episode[ep]]
            buckets = make_buckets(corpus, batch, vocab, mconfig)
            loss, grads, n = model.loss_and_grads(model.params, buckets)
            opt.step(model.params, grads)
            epoch_loss += loss * n
            epoch_n += n
        val_pairs = predict_instances(model, corpus, instances["val"])
        val_f1 = overall_f1(val_pairs, V)
        row = {
            "epoch": epoch,
            "train_loss": float(epoch_loss / max(epoch_n, 1)),
            "val_f1": val_f1,
        }
        for qtype, f1 in f1_by_type(val_pairs, V).items():
            row[f"val_f1_{qtype}"] = float(f1)
        if config.track_train_accuracy:
            train_pairs = predict_instances(model, corpus, instances["train"])
            row["train_acc"] = sum(
                int(p == inst.label) for inst, p in train_pairs
            ) / len(train_pairs)
        curves.append(row)
        if progress is not None:
            progress(row)
        if val_f1 > best_f1 or not val_pairs:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        elif epoch - best_epoch >= config.patience:
            break
        if config.track_train_accuracy and row["train_acc"] == 1.0:
            break
    if best_params:
        model.params = best_params
    return TrainResult(
        model=model,
        split=split,
        instances=instances,
        curves=curves,
        best_epoch=best_epoch,
        val_f1=best_f1,
    )
