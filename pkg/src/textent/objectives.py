"""Self-supervised training objectives and the pretraining loop.

Three losses over the shared encoder:

  dual    in-batch-negative softmax over scaled cosine scores between each
          sentence's CLS vector and the batch's (unique) entity embeddings
  full    masked-token cross-entropy on [CLS] entity [SEP] sentence [SEP]
          rows: an entity term (rows whose entity token was masked) plus a
          weighted word term, both over the entity-extended vocabulary
  hybrid  the dual term plus a masked-word term whose prediction input is
          the hidden state concatenated with the row's entity embedding

Cosine scores are multiplied by a score scale before the softmax; raw
cosines in [-1, 1] make the softmax nearly flat. The scale is monotone, so
it never changes how entities rank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .encoder import (ENTITY_POSITION, ModelConfig, ModelParams, encode_tensors,
                      entity_row, hybrid_head_tensors, init_params,
                      mlm_head_tensors, save_checkpoint, sentence_row,
                      wrap_tensors)
from .errors import DataError, NumericError, TrainingDiverged
from .numerics import AdamState, adam_step
from .text import CLS, MASK, PAD, SEP, CorpusExample, Vocabulary

log = logging.getLogger(__name__)

NEVER_MASKED = (PAD, CLS, SEP, MASK)


@dataclass
class TrainingConfig:
    batch_size: int = 32
    word_mask_rate: float = 0.15
    entity_mask_rate: float = 0.5
    loss_mix: float = 1.0       # weight of the masked-word term
    score_scale: float = 4.0    # cosine multiplier before the softmax
    steps: int = 2000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0   # 0: final checkpoint only
    log_every: int = 100

    def validate(self) -> None:
        if self.batch_size < 1 or self.steps < 0:
            raise DataError("batch_size must be >= 1 and steps >= 0")
        for name in ("word_mask_rate", "entity_mask_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must be in [0, 1]")
        if self.loss_mix < 0:
            raise DataError("loss_mix must be >= 0")
        if self.score_scale <= 0:
            raise DataError("score_scale must be > 0")


@dataclass
class MaskedBatch:
    input_ids: np.ndarray                 # [B, L], PAD-padded
    segment_ids: np.ndarray               # [B, L]
    pad_mask: np.ndarray                  # [B, L] bool, True at real tokens
    mask_positions: list[np.ndarray]      # per row: masked word positions
    mask_labels: list[np.ndarray]         # per row: original ids there
    entity_rows: np.ndarray               # [B] entity indices
    entity_masked: np.ndarray             # [B] bool (full layout only)

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


def mask_tokens(tokens: Sequence[int], rate: float,
                rng: np.random.Generator,
                maskable: Sequence[bool] | None = None,
                ) -> tuple[list[int], list[int], list[int]]:
    """Independently mask each eligible position with probability ``rate``.

    By default every non-special token is eligible; pass ``maskable`` to
    restrict further (e.g. to the sentence span of a structured row).
    Returns (masked tokens, positions, original labels).
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError("mask rate must be in [0, 1]")
    masked = list(tokens)
    if maskable is None:
        maskable = [t not in NEVER_MASKED for t in masked]
    draws = rng.random(len(masked))
    positions = [i for i in range(len(masked)) if maskable[i] and draws[i] < rate]
    labels = [masked[i] for i in positions]
    for i in positions:
        masked[i] = MASK
    return masked, positions, labels


def build_batch(examples: Sequence[CorpusExample], vocab: Vocabulary,
                config: ModelConfig, rng: np.random.Generator | None = None,
                word_mask_rate: float = 0.0, entity_mask_rate: float = 0.0,
                ) -> MaskedBatch:
    """Pad a batch of corpus examples into the variant's input layout."""
    if not examples:
        raise DataError("empty batch")
    if rng is None and (word_mask_rate > 0 or entity_mask_rate > 0):
        raise DataError("masking requires an rng")
    rows, segs, positions, labels, ent_idx, ent_masked = [], [], [], [], [], []
    for ex in examples:
        idx = vocab.entity_index(ex.entity_id)
        ent_idx.append(idx)
        if config.variant == "full":
            row, seg = entity_row(config.entity_token_id(idx), ex.tokens, config)
            first_word = ENTITY_POSITION + 2
            masked_entity = bool(entity_mask_rate and rng.random() < entity_mask_rate)
            if masked_entity:
                row[ENTITY_POSITION] = MASK
        else:
            row, seg = sentence_row(ex.tokens, config)
            first_word = 1
            masked_entity = False
        ent_masked.append(masked_entity)
        if word_mask_rate > 0:
            eligible = [first_word <= i < len(row) - 1 and row[i] != MASK
                        for i in range(len(row))]
            row, pos, lab = mask_tokens(row, word_mask_rate, rng, maskable=eligible)
        else:
            pos, lab = [], []
        rows.append(row)
        segs.append(seg)
        positions.append(np.asarray(pos, dtype=np.int64))
        labels.append(np.asarray(lab, dtype=np.int64))
    L = max(len(r) for r in rows)
    B = len(rows)
    input_ids = np.full((B, L), PAD, dtype=np.int64)
    segment_ids = np.zeros((B, L), dtype=np.int64)
    pad_mask = np.zeros((B, L), dtype=bool)
    for i, (row, seg) in enumerate(zip(rows, segs)):
        input_ids[i, : len(row)] = row
        segment_ids[i, : len(seg)] = seg
        pad_mask[i, : len(row)] = True
    return MaskedBatch(input_ids, segment_ids, pad_mask, positions, labels,
                       np.asarray(ent_idx, dtype=np.int64),
                       np.asarray(ent_masked, dtype=bool))


# -- losses -----------------------------------------------------------------------


@dataclass
class LossOutput:
    value: float
    entity_term: float
    mlm_term: float
    grads: dict[str, np.ndarray] | None = field(repr=False, default=None)


def _collect_grads(pt: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in pt.items()}


def _normalize_rows(t: Tensor, what: str) -> Tensor:
    norms_sq = (t * t).sum(axis=-1, keepdims=True)
    if np.any(norms_sq.data < 1e-16):
        raise NumericError(f"zero-norm {what} vector in cosine scoring")
    return t / autodiff.sqrt(norms_sq)


def _unique_candidates(entity_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse duplicate entities, keeping first-appearance order."""
    uniq, first = np.unique(entity_rows, return_index=True)
    order = np.argsort(first)
    candidates = uniq[order]
    position = {int(e): i for i, e in enumerate(candidates)}
    targets = np.asarray([position[int(e)] for e in entity_rows], dtype=np.int64)
    return candidates, targets


def _dual_term(pt: dict[str, Tensor], hidden: Tensor, batch: MaskedBatch,
               score_scale: float) -> Tensor:
    cls = hidden[:, 0]
    candidates, targets = _unique_candidates(batch.entity_rows)
    cand_vecs = pt["entity_table"][candidates]
    scores = (_normalize_rows(cls, "sentence") @
              _normalize_rows(cand_vecs, "entity").transpose(1, 0)) * score_scale
    logp = autodiff.log_softmax(scores, axis=-1)
    picked = logp[np.arange(batch.size), targets]
    return -picked.mean()


def _masked_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = autodiff.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def _flat_gather(hidden: Tensor, row_idx: np.ndarray, col_idx: np.ndarray) -> Tensor:
    B, L, H = hidden.shape
    return hidden.reshape(B * L, H)[row_idx * L + col_idx]


def _word_mask_indices(batch: MaskedBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.concatenate([np.full(len(p), i, dtype=np.int64)
                           for i, p in enumerate(batch.mask_positions)] or
                          [np.zeros(0, dtype=np.int64)])
    cols = np.concatenate([p for p in batch.mask_positions] or [np.zeros(0, dtype=np.int64)])
    labels = np.concatenate([l for l in batch.mask_labels] or [np.zeros(0, dtype=np.int64)])
    return rows, cols, labels


def dual_graph(pt: dict[str, Tensor], config: ModelConfig,
               batch: MaskedBatch, score_scale: float) -> Tensor:
    """The dual objective as a live graph over parameter tensors."""
    hidden, _ = encode_tensors(pt, config, batch.input_ids,
                               batch.segment_ids, batch.pad_mask)
    return _dual_term(pt, hidden, batch, score_scale)


def dual_loss(batch: MaskedBatch, params: ModelParams, score_scale: float = 4.0,
              compute_grads: bool = True) -> LossOutput:
    """In-batch-negative softmax loss; the candidate set is the batch's
    unique entities, so a batch of one is a free win (loss 0)."""
    pt = wrap_tensors(params, trainable=compute_grads)
    loss = dual_graph(pt, params.config, batch, score_scale)
    grads = None
    if compute_grads:
        loss.backward()
        grads = _collect_grads(pt)
    value = float(loss.data)
    return LossOutput(value, entity_term=value, mlm_term=0.0, grads=grads)


def full_graph(pt: dict[str, Tensor], config: ModelConfig, batch: MaskedBatch,
               loss_mix: float) -> tuple[Tensor | None, float, float]:
    """Total graph plus the realized (entity, word) term values.

    Returns (None, 0, 0) when nothing is masked anywhere.
    """
    ent_rows = np.flatnonzero(batch.entity_masked)
    w_rows, w_cols, w_labels = _word_mask_indices(batch)
    if len(ent_rows) == 0 and len(w_rows) == 0:
        return None, 0.0, 0.0
    hidden, _ = encode_tensors(pt, config, batch.input_ids,
                               batch.segment_ids, batch.pad_mask)
    terms: list[Tensor] = []
    entity_term = 0.0
    mlm_term = 0.0
    if len(ent_rows):
        h = _flat_gather(hidden, ent_rows,
                         np.full(len(ent_rows), ENTITY_POSITION, dtype=np.int64))
        ent_labels = np.asarray(
            [config.entity_token_id(int(e)) for e in batch.entity_rows[ent_rows]],
            dtype=np.int64)
        ce = _masked_ce(mlm_head_tensors(pt, h), ent_labels)
        entity_term = float(ce.data)
        terms.append(ce)
    if len(w_rows):
        h = _flat_gather(hidden, w_rows, w_cols)
        ce = _masked_ce(mlm_head_tensors(pt, h), w_labels)
        mlm_term = float(ce.data)
        if loss_mix != 0.0:
            terms.append(ce * loss_mix)
    if not terms:
        return None, entity_term, mlm_term
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return total, entity_term, mlm_term


def full_loss(batch: MaskedBatch, params: ModelParams, loss_mix: float = 1.0,
              compute_grads: bool = True) -> LossOutput:
    """Entity-prediction plus masked-word cross-entropy over the extended
    vocabulary; each term is averaged over its own count and an absent term
    contributes zero."""
    pt = wrap_tensors(params, trainable=compute_grads)
    total, entity_term, mlm_term = full_graph(pt, params.config, batch, loss_mix)
    if total is None:
        grads = ({k: np.zeros_like(v) for k, v in params.tensors.items()}
                 if compute_grads else None)
        return LossOutput(0.0, entity_term, mlm_term, grads)
    grads = None
    if compute_grads:
        total.backward()
        grads = _collect_grads(pt)
    return LossOutput(float(total.data), entity_term, mlm_term, grads)


def hybrid_loss(batch: MaskedBatch, params: ModelParams, loss_mix: float = 1.0,
                score_scale: float = 4.0, compute_grads: bool = True) -> LossOutput:
    """Dual term plus masked-word cross-entropy through the concat head.

    With no masked positions (or loss_mix 0) this equals the dual loss on
    the same rows exactly.
    """
    pt = wrap_tensors(params, trainable=compute_grads)
    total, entity_term, mlm_term = hybrid_graph(pt, params.config, batch,
                                                loss_mix, score_scale)
    grads = None
    if compute_grads:
        total.backward()
        grads = _collect_grads(pt)
    return LossOutput(float(total.data), entity_term, mlm_term, grads)


def hybrid_graph(pt: dict[str, Tensor], config: ModelConfig, batch: MaskedBatch,
                 loss_mix: float, score_scale: float
                 ) -> tuple[Tensor, float, float]:
    hidden, _ = encode_tensors(pt, config, batch.input_ids,
                               batch.segment_ids, batch.pad_mask)
    total = _dual_term(pt, hidden, batch, score_scale)
    entity_term = float(total.data)
    mlm_term = 0.0
    w_rows, w_cols, w_labels = _word_mask_indices(batch)
    if len(w_rows):
        h = _flat_gather(hidden, w_rows, w_cols)
        ent_vecs = pt["entity_table"][batch.entity_rows[w_rows]]
        joined = autodiff.concat([h, ent_vecs], axis=-1)
        ce = _masked_ce(hybrid_head_tensors(pt, joined), w_labels)
        mlm_term = float(ce.data)
        if loss_mix != 0.0:
            total = total + ce * loss_mix
    return total, entity_term, mlm_term


def _wrap_rows(rows: np.ndarray) -> Tensor:
    return autodiff.constant(rows)


def entity_prediction_accuracy(batch: MaskedBatch, params: ModelParams,
                               restrict_to_entities: bool = True) -> float:
    """Fraction of masked entity tokens recovered by the tied MLM head.

    With ``restrict_to_entities`` the argmax runs over the entity block
    only; otherwise over the whole extended vocabulary.
    """
    cfg = params.config
    rows = np.flatnonzero(batch.entity_masked)
    if len(rows) == 0:
        return float("nan")
    pt = wrap_tensors(params, trainable=False)
    hidden, _ = encode_tensors(pt, cfg, batch.input_ids, batch.segment_ids,
                               batch.pad_mask)
    h = _wrap_rows(hidden.data[rows, ENTITY_POSITION])
    logits = mlm_head_tensors(pt, h).data
    truth = np.asarray([cfg.entity_token_id(int(e)) for e in batch.entity_rows[rows]])
    if restrict_to_entities:
        pred = logits[:, cfg.word_vocab_size:].argmax(axis=1) + cfg.word_vocab_size
    else:
        pred = logits.argmax(axis=1)
    return float(np.mean(pred == truth))


# -- pretraining loop ----------------------------------------------------------------


def variant_loss(batch: MaskedBatch, params: ModelParams, cfg: TrainingConfig,
                 compute_grads: bool = True) -> LossOutput:
    v = params.config.variant
    if v == "dual":
        return dual_loss(batch, params, cfg.score_scale, compute_grads)
    if v == "full":
        return full_loss(batch, params, cfg.loss_mix, compute_grads)
    if v == "hybrid":
        return hybrid_loss(batch, params, cfg.loss_mix, cfg.score_scale, compute_grads)
    raise DataError(f"unknown variant {v!r}")


def _batch_rates(variant: str, cfg: TrainingConfig) -> tuple[float, float]:
    if variant == "dual":
        return 0.0, 0.0
    if variant == "full":
        return cfg.word_mask_rate, cfg.entity_mask_rate
    return cfg.word_mask_rate, 0.0


def pretrain(corpus: Sequence[CorpusExample], vocab: Vocabulary,
             model_config: ModelConfig, train_config: TrainingConfig,
             out_dir=None) -> tuple[ModelParams, list[dict]]:
    """Shuffled mini-batch training; deterministic for a fixed seed.

    Returns the trained parameters and one metrics row per step. Aborts
    with TrainingDiverged (naming the step and batch entities) if the loss
    goes non-finite.
    """
    if not corpus:
        raise DataError("empty corpus")
    train_config.validate()
    model_config.validate()
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    rng_init = np.random.default_rng(seeds[0])
    rng_data = np.random.default_rng(seeds[1])
    params = init_params(model_config, rng_init)
    state = AdamState.for_params(params.tensors, lr=train_config.lr,
                                 beta1=train_config.beta1, beta2=train_config.beta2,
                                 eps=train_config.adam_eps)
    if train_config.batch_size == 1 and model_config.variant in ("dual", "hybrid"):
        log.warning("batch_size=1 leaves no in-batch negatives; the entity term is 0")

    word_rate, ent_rate = _batch_rates(model_config.variant, train_config)
    n = len(corpus)
    order = rng_data.permutation(n)
    cursor = 0
    metrics: list[dict] = []
    for step in range(1, train_config.steps + 1):
        if cursor + train_config.batch_size > n:
            order = rng_data.permutation(n)
            cursor = 0
        take = order[cursor: cursor + train_config.batch_size]
        cursor += train_config.batch_size
        examples = [corpus[i] for i in take]
        batch = build_batch(examples, vocab, model_config, rng=rng_data,
                            word_mask_rate=word_rate, entity_mask_rate=ent_rate)
        out = variant_loss(batch, params, train_config)
        if not np.isfinite(out.value):
            ids = sorted({ex.entity_id for ex in examples})
            raise TrainingDiverged(f"non-finite loss at step {step}; batch entities: {ids}")
        adam_step(params.tensors, out.grads, state)
        metrics.append({"step": step, "loss": out.value,
                        "loss_entity": out.entity_term, "loss_mlm": out.mlm_term})
        if train_config.log_every and step % train_config.log_every == 0:
            recent = [m["loss"] for m in metrics[-train_config.log_every:]]
            log.info("step %d  loss %.4f", step, float(np.mean(recent)))
        if (out_dir is not None and train_config.checkpoint_every
                and step % train_config.checkpoint_every == 0):
            save_checkpoint(params, Path(out_dir) / f"step_{step:06d}")
    if out_dir is not None:
        save_checkpoint(params, out_dir)
    return params, metrics
