"""Tag-prediction fine-tuning for all three model variants.

Every observed (entity, tag) pair is a positive example weighted by its
vote count (or log thereof); per entity, a fixed fraction of the tag
vocabulary is sampled as negatives, excluding that entity's known
positives. Entity embeddings stay frozen throughout: their gradient rows
are zeroed before every optimizer step, and since fine-tuning starts from
fresh optimizer state the rows remain bit-identical.

The full variant trains its binary classifier head with logistic loss on
[CLS] entity [SEP] tag [SEP] rows. Dual and hybrid keep their architecture
and instead softmax over encoded candidate tags against the frozen entity
embedding.

Two evaluation protocols: "closed" holds out entities, "open" holds out a
slice of the tag vocabulary (held-out tags never enter a training batch).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff
from .autodiff import Tensor
from .encoder import (ModelParams, encode_rows, encode_tensors, entity_matrix,
                      entity_row, pad_rows, sentence_row, wrap_tensors)
from .errors import DataError
from .numerics import AdamState, adam_step
from .objectives import _normalize_rows
from .text import TagVotes, Vocabulary, tokenize

log = logging.getLogger(__name__)

WEIGHT_MODES = ("linear", "log1p")
PROTOCOLS = ("closed", "open")


@dataclass
class FinetuneConfig:
    negative_rate: float = 0.10     # fraction of the tag vocabulary per entity
    weight_mode: str = "log1p"
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.2
    protocol: str = "closed"
    score_scale: float = 4.0

    def validate(self) -> None:
        if not 0.0 < self.negative_rate <= 1.0:
            raise DataError("negative_rate must be in (0, 1]")
        if self.weight_mode not in WEIGHT_MODES:
            raise DataError(f"unknown weight mode {self.weight_mode!r}")
        if self.protocol not in PROTOCOLS:
            raise DataError(f"unknown protocol {self.protocol!r}")
        if self.epochs < 0 or not 0.0 < self.holdout_fraction < 1.0:
            raise DataError("bad epochs or holdout_fraction")


def example_weight(votes: int, mode: str = "log1p") -> float:
    """Positive-pair weight: the vote count, or log(1 + votes)."""
    if votes < 1:
        raise DataError(f"positive example needs votes >= 1, got {votes}")
    if mode == "linear":
        return float(votes)
    if mode == "log1p":
        return float(np.log1p(votes))
    raise DataError(f"unknown weight mode {mode!r}")


def sample_negatives(entity_id: str, tag_vocab: Sequence[str],
                     positives: Iterable[str], rate: float,
                     rng: np.random.Generator) -> list[str]:
    """Draw ``floor(rate * len(tag_vocab))`` tags uniformly, never positives."""
    if not 0.0 < rate <= 1.0:
        raise DataError("negative rate must be in (0, 1]")
    pool = sorted(set(tag_vocab) - set(positives))
    if not pool:
        warnings.warn(f"no negative candidates left for {entity_id}")
        return []
    count = min(int(rate * len(tag_vocab)), len(pool))
    picked = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(picked)]


def split_holdout(items: Sequence[str], fraction: float,
                  rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Deterministic (train, held-out) split; both halves sorted."""
    items = sorted(items)
    n_hold = max(1, int(round(fraction * len(items))))
    if n_hold >= len(items):
        raise DataError("holdout fraction leaves no training items")
    perm = rng.permutation(len(items))
    held = sorted(items[i] for i in perm[:n_hold])
    train = sorted(items[i] for i in perm[n_hold:])
    return train, held


@dataclass
class FinetuneResult:
    params: ModelParams
    used_tags: set[str] = field(default_factory=set)
    metrics: list[dict] = field(default_factory=list)


def _frozen_entity_grad_zero(params: ModelParams, grads: dict[str, np.ndarray]) -> None:
    cfg = params.config
    if cfg.variant == "full":
        grads["token_emb"][cfg.word_vocab_size:] = 0.0
    else:
        grads["entity_table"][:] = 0.0


def _tag_tokens(tag: str, vocab: Vocabulary) -> list[int]:
    return tokenize(tag, vocab)


def _step_data(votes: TagVotes, entity_id: str, allowed_tags: set[str] | None,
               config: FinetuneConfig, rng: np.random.Generator,
               ) -> tuple[list[tuple[str, float]], list[str]]:
    """Weighted positives and sampled negatives for one entity step."""
    vocab_tags = ([t for t in votes.tags if t in allowed_tags]
                  if allowed_tags is not None else votes.tags)
    positives = [(t, example_weight(c, config.weight_mode))
                 for t, c in votes.positives(entity_id)
                 if allowed_tags is None or t in allowed_tags]
    if not positives:
        return [], []
    negatives = sample_negatives(entity_id, vocab_tags,
                                 [t for t, _ in positives],
                                 config.negative_rate, rng)
    return positives, negatives


def binary_tag_graph(pt, config, input_ids, segment_ids, pad_mask,
                     labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted logistic loss of the CLS classifier over (entity, tag) rows."""
    hidden, _ = encode_tensors(pt, config, input_ids, segment_ids, pad_mask)
    logits = (hidden[:, 0] @ pt["cls_w"] + pt["cls_b"]).reshape(len(labels))
    sign = autodiff.constant(np.asarray(1.0 - 2.0 * labels, dtype=logits.dtype))
    per_example = autodiff.softplus(logits * sign)
    w = np.asarray(weights, dtype=per_example.dtype)
    return (per_example * autodiff.constant(w)).sum() / float(w.sum())


def softmax_tag_graph(pt, config, input_ids, segment_ids, pad_mask,
                      entity_index: int, positive_count: int,
                      weights: np.ndarray, score_scale: float) -> Tensor:
    """Weighted tag-softmax loss: positives first, shared negatives after."""
    hidden, _ = encode_tensors(pt, config, input_ids, segment_ids, pad_mask)
    n_candidates = input_ids.shape[0]
    cand_n = _normalize_rows(hidden[:, 0], "tag")
    ent = pt["entity_table"][np.asarray([entity_index])]
    ent_n = _normalize_rows(ent, "entity")
    scores = (cand_n @ ent_n.transpose(1, 0)).reshape(n_candidates) * score_scale
    neg_idx = list(range(positive_count, n_candidates))
    losses = []
    for p in range(positive_count):
        picked = scores[np.asarray([p] + neg_idx)]
        logp = autodiff.log_softmax(picked, axis=-1)
        losses.append(logp[np.asarray([0])] * -1.0)
    w = np.asarray(weights, dtype=scores.dtype)
    stacked = autodiff.concat(losses, axis=0)
    return (stacked * autodiff.constant(w)).sum() / float(w.sum())


def finetune_full(params: ModelParams, votes: TagVotes, config: FinetuneConfig,
                  vocab: Vocabulary, train_entities: Sequence[str] | None = None,
                  allowed_tags: set[str] | None = None) -> FinetuneResult:
    """Binary-classification fine-tuning of the full variant's CLS head."""
    config.validate()
    if params.config.variant != "full":
        raise DataError("finetune_full needs a full-variant checkpoint")
    params = params.copy()
    cfg = params.config
    if train_entities is None:
        train_entities = votes.entity_ids()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    state = AdamState.for_params(params.tensors, lr=config.lr)
    result = FinetuneResult(params)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_entities))
        epoch_loss, steps = 0.0, 0
        for i in order:
            entity_id = train_entities[i]
            positives, negatives = _step_data(votes, entity_id, allowed_tags, config, rng)
            if not positives:
                continue
            ent_token = vocab.entity_token(entity_id)
            rows, segs, labels, weights = [], [], [], []
            for tag, weight in positives:
                row, seg = entity_row(ent_token, _tag_tokens(tag, vocab), cfg)
                rows.append(row); segs.append(seg); labels.append(1.0); weights.append(weight)
                result.used_tags.add(tag)
            for tag in negatives:
                row, seg = entity_row(ent_token, _tag_tokens(tag, vocab), cfg)
                rows.append(row); segs.append(seg); labels.append(0.0); weights.append(1.0)
                result.used_tags.add(tag)
            ids, seg_arr, mask = pad_rows(rows, segs)
            pt = wrap_tensors(params, trainable=True)
            loss = binary_tag_graph(pt, cfg, ids, seg_arr, mask,
                                    np.asarray(labels), np.asarray(weights))
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in pt.items()}
            _frozen_entity_grad_zero(params, grads)
            adam_step(params.tensors, grads, state)
            epoch_loss += float(loss.data)
            steps += 1
        result.metrics.append({"epoch": epoch + 1,
                               "loss": epoch_loss / max(steps, 1)})
        log.info("epoch %d  loss %.4f", epoch + 1, epoch_loss / max(steps, 1))
    return result


def finetune_dual(params: ModelParams, votes: TagVotes, config: FinetuneConfig,
                  vocab: Vocabulary, train_entities: Sequence[str] | None = None,
                  allowed_tags: set[str] | None = None) -> FinetuneResult:
    """Tag-softmax fine-tuning shared by the dual and hybrid variants.

    Per positive (entity, tag): cross-entropy of the tag under a softmax
    over the tag plus the entity's sampled negatives, candidates encoded by
    the text encoder and scored against the frozen entity embedding by
    scaled cosine.
    """
    config.validate()
    if params.config.variant not in ("dual", "hybrid"):
        raise DataError("finetune_dual needs a dual- or hybrid-variant checkpoint")
    params = params.copy()
    cfg = params.config
    if train_entities is None:
        train_entities = votes.entity_ids()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    state = AdamState.for_params(params.tensors, lr=config.lr)
    result = FinetuneResult(params)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_entities))
        epoch_loss, steps = 0.0, 0
        for i in order:
            entity_id = train_entities[i]
            positives, negatives = _step_data(votes, entity_id, allowed_tags, config, rng)
            if not positives or not negatives:
                continue  # a lone candidate is a certainty: zero loss, no step
            candidates = [t for t, _ in positives] + negatives
            result.used_tags.update(candidates)
            rows, segs = zip(*(sentence_row(_tag_tokens(t, vocab), cfg)
                               for t in candidates))
            ids, seg_arr, mask = pad_rows(list(rows), list(segs))
            pt = wrap_tensors(params, trainable=True)
            loss = softmax_tag_graph(pt, cfg, ids, seg_arr, mask,
                                     vocab.entity_index(entity_id), len(positives),
                                     np.asarray([w for _, w in positives]),
                                     config.score_scale)
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in pt.items()}
            _frozen_entity_grad_zero(params, grads)
            adam_step(params.tensors, grads, state)
            epoch_loss += float(loss.data)
            steps += 1
        result.metrics.append({"epoch": epoch + 1,
                               "loss": epoch_loss / max(steps, 1)})
        log.info("epoch %d  loss %.4f", epoch + 1, epoch_loss / max(steps, 1))
    return result


def run_finetune(params: ModelParams, votes: TagVotes, config: FinetuneConfig,
                 vocab: Vocabulary, train_entities: Sequence[str] | None = None,
                 allowed_tags: set[str] | None = None) -> FinetuneResult:
    """Dispatch to the variant's fine-tuning strategy."""
    if params.config.variant == "full":
        return finetune_full(params, votes, config, vocab, train_entities, allowed_tags)
    return finetune_dual(params, votes, config, vocab, train_entities, allowed_tags)


# -- scoring ---------------------------------------------------------------------


def predict_tag_scores(params: ModelParams, vocab: Vocabulary, entity_id: str,
                       tags: Sequence[str], score_scale: float = 4.0) -> np.ndarray:
    """Score every tag for one entity; higher means more relevant.

    Full variant: classifier-head probability in (0, 1). Dual/hybrid:
    scaled cosine between the entity embedding and the encoded tag. Scores
    are comparable across tags for one entity; evaluation consumes ranks.
    """
    cfg = params.config
    index = vocab.entity_index(entity_id)  # raises for unknown entities
    if cfg.variant == "full":
        ent_token = vocab.entity_token(entity_id)
        rows, segs = zip(*(entity_row(ent_token, _tag_tokens(t, vocab), cfg)
                           for t in tags))
        hidden, _ = encode_rows(list(rows), list(segs), params)
        logits = hidden[:, 0] @ params.tensors["cls_w"] + params.tensors["cls_b"]
        return expit(logits.reshape(-1))
    rows, segs = zip(*(sentence_row(_tag_tokens(t, vocab), cfg) for t in tags))
    hidden, _ = encode_rows(list(rows), list(segs), params)
    cls = hidden[:, 0]
    cls_n = cls / np.linalg.norm(cls, axis=1, keepdims=True)
    ent = entity_matrix(params)[index]
    ent_n = ent / np.linalg.norm(ent)
    return score_scale * (cls_n @ ent_n)


def score_tag_matrix(params: ModelParams, vocab: Vocabulary,
                     entities: Sequence[str], tags: Sequence[str],
                     score_scale: float = 4.0) -> dict[str, dict[str, float]]:
    """predict_tag_scores for many entities, keyed entity -> tag -> score."""
    out: dict[str, dict[str, float]] = {}
    for entity_id in entities:
        scores = predict_tag_scores(params, vocab, entity_id, tags, score_scale)
        out[entity_id] = {t: float(s) for t, s in zip(tags, scores)}
    return out


def export_predictions(path: str | Path, scores: Mapping[str, Mapping[str, float]]) -> None:
    """TSV of (entity_id, tag, score), entities sorted, scores descending."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity_id\ttag\tscore\n")
        for entity_id in sorted(scores):
            ranked = sorted(scores[entity_id].items(), key=lambda kv: (-kv[1], kv[0]))
            for tag, score in ranked:
                fh.write(f"{entity_id}\t{tag}\t{score:.8g}\n")
