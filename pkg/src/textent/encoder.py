"""Miniature transformer encoder with entity embeddings and output heads.

The encoder is a standard bidirectional transformer: summed token/position/
segment embeddings through layer norm, then post-norm residual blocks of
multi-head self-attention and a GELU feed-forward. Three model variants
share it:

  dual    separate entity embedding table, scored against the CLS output
          by cosine similarity
  full    entity tokens live inside an extended input vocabulary and
          cross-attend with sentence tokens; masked-token prediction uses
          a projection tied to the input embedding matrix
  hybrid  dual's separate table, plus a second masked-token head whose
          input is the hidden state concatenated with the entity embedding
          (its projection is untied: the input width differs)

Checkpoints are a JSON manifest next to one raw little-endian float file
per named tensor; loading validates every shape against the config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from . import autodiff
from .autodiff import Tensor
from .errors import DataError, NumericError
from .text import CLS, PAD, SEP, Vocabulary

VARIANTS = ("dual", "full", "hybrid")

NORM_FLOOR = 1e-8  # cosine denominators below this are treated as zero vectors


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn_hidden: int = 256
    max_seq_len: int = 64
    vocab_size: int = 0
    entity_count: int = 0
    entity_dim: int = 64
    variant: str = "dual"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise DataError(f"unknown variant {self.variant!r}")
        if self.hidden % self.heads != 0:
            raise DataError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.layers < 0 or self.heads < 1 or self.hidden < 2:
            raise DataError("bad encoder dimensions")
        if self.vocab_size < 5:
            raise DataError("vocab_size must cover the reserved specials")
        if self.entity_count < 1:
            raise DataError("entity_count must be >= 1")
        if self.variant == "full":
            if self.entity_dim != self.hidden:
                raise DataError("full variant requires entity_dim == hidden")
            if self.vocab_size <= self.entity_count:
                raise DataError("full variant stores entity tokens inside vocab_size")
        else:
            # cosine compatibility pairs entity rows with the CLS vector
            if self.entity_dim != self.hidden:
                raise DataError("dual/hybrid compatibility requires entity_dim == hidden")

    @property
    def word_vocab_size(self) -> int:
        """Input ids below this are word/special tokens."""
        if self.variant == "full":
            return self.vocab_size - self.entity_count
        return self.vocab_size

    def entity_token_id(self, entity_index: int) -> int:
        if self.variant != "full":
            raise DataError("entity tokens only exist in the full variant")
        if not 0 <= entity_index < self.entity_count:
            raise DataError(f"entity index {entity_index} out of range")
        return self.word_vocab_size + entity_index

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, variant: str, **overrides) -> "ModelConfig":
        """Desk-scale config sized to a vocabulary (entities included)."""
        size = len(vocab) if variant == "full" else vocab.word_size
        cfg = cls(vocab_size=size, entity_count=vocab.entity_count, variant=variant,
                  **overrides)
        cfg.validate()
        return cfg

    @classmethod
    def paper_scale(cls, vocab: Vocabulary, variant: str) -> "ModelConfig":
        """The 12-layer, 12-head, 768-wide configuration. Not for CI."""
        return cls.for_vocab(vocab, variant, layers=12, heads=12, hidden=768,
                             ffn_hidden=3072, max_seq_len=512, entity_dim=768)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f, v = config.hidden, config.ffn_hidden, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "token_emb": (v, h),
        "pos_emb": (config.max_seq_len, h),
        "seg_emb": (2, h),
        "emb_ln_g": (h,),
        "emb_ln_b": (h,),
    }
    for i in range(config.layers):
        pre = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            shapes[pre + f"attn_{name}_w"] = (h, h)
            shapes[pre + f"attn_{name}_b"] = (h,)
        shapes[pre + "attn_ln_g"] = (h,)
        shapes[pre + "attn_ln_b"] = (h,)
        shapes[pre + "ffn_w1"] = (h, f)
        shapes[pre + "ffn_b1"] = (f,)
        shapes[pre + "ffn_w2"] = (f, h)
        shapes[pre + "ffn_b2"] = (h,)
        shapes[pre + "ffn_ln_g"] = (h,)
        shapes[pre + "ffn_ln_b"] = (h,)
    if config.variant in ("dual", "hybrid"):
        shapes["entity_table"] = (config.entity_count, config.entity_dim)
    if config.variant in ("full", "hybrid"):
        # transform (dense + GELU + norm), then a projection tied to token_emb
        shapes["mlm_dense_w"] = (h, h)
        shapes["mlm_dense_b"] = (h,)
        shapes["mlm_ln_g"] = (h,)
        shapes["mlm_ln_b"] = (h,)
        shapes["mlm_out_b"] = (v,)
    if config.variant == "hybrid":
        # same structure over the concatenated input; projection is untied
        shapes["hyb_dense_w"] = (h + config.entity_dim, h)
        shapes["hyb_dense_b"] = (h,)
        shapes["hyb_ln_g"] = (h,)
        shapes["hyb_ln_b"] = (h,)
        shapes["hyb_out_w"] = (h, v)
        shapes["hyb_out_b"] = (v,)
    if config.variant == "full":
        shapes["cls_w"] = (h, 1)
        shapes["cls_b"] = (1,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


@dataclass
class ModelParams:
    """Every learnable tensor of one model, keyed by name."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0,
                dtype=np.float32, init_std: float = 0.02) -> ModelParams:
    """Truncated-normal initialization (cut at two standard deviations)."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("_ln_g"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(("_b", "_ln_b")):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = _trunc_normal(rng, shape, init_std, dtype)
    if "entity_table" in tensors:
        norms = np.linalg.norm(tensors["entity_table"], axis=1)
        if not np.all(norms > 0):
            raise NumericError("entity table initialized with a zero row")
    return ModelParams(config, tensors)


# -- forward pass ---------------------------------------------------------------


@dataclass
class EncoderOutput:
    hidden_states: np.ndarray            # [seq_len, hidden]
    cls_vector: np.ndarray               # hidden_states[0]
    attention: list[np.ndarray] | None = None  # per layer: [heads, L, L]


def encode_tensors(pt: Mapping[str, Tensor], config: ModelConfig,
                   input_ids: np.ndarray, segment_ids: np.ndarray,
                   pad_mask: np.ndarray | None = None,
                   collect_attention: bool = False
                   ) -> tuple[Tensor, list[np.ndarray]]:
    """Autodiff forward pass over a padded batch.

    ``input_ids``/``segment_ids`` are [batch, seq]; ``pad_mask`` is a bool
    array marking real (non-PAD) positions. Returns hidden states
    [batch, seq, hidden] plus per-layer attention probabilities when asked.
    """
    ids = np.asarray(input_ids)
    segs = np.asarray(segment_ids)
    B, L = ids.shape
    if L > config.max_seq_len:
        raise DataError(f"sequence length {L} exceeds max_seq_len {config.max_seq_len}")
    dtype = pt["token_emb"].data.dtype

    x = pt["token_emb"][ids] + pt["pos_emb"][np.arange(L)] + pt["seg_emb"][segs]
    x = autodiff.layer_norm(x, pt["emb_ln_g"], pt["emb_ln_b"])

    bias = None
    if pad_mask is not None:
        bias = np.where(pad_mask, 0.0, -1e9).astype(dtype).reshape(B, 1, 1, L)

    nh = config.heads
    hd = config.hidden // nh
    scale = 1.0 / np.sqrt(hd)
    attn_maps: list[np.ndarray] = []
    for i in range(config.layers):
        pre = f"layer{i}."

        def _project(name):
            p = x @ pt[pre + f"attn_{name}_w"] + pt[pre + f"attn_{name}_b"]
            return p.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)

        q, k, v = _project("q"), _project("k"), _project("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if bias is not None:
            scores = scores + autodiff.constant(bias)
        probs = autodiff.softmax(scores, axis=-1)
        if collect_attention:
            attn_maps.append(probs.data.copy())
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, config.hidden)
        attn_out = ctx @ pt[pre + "attn_o_w"] + pt[pre + "attn_o_b"]
        x = autodiff.layer_norm(x + attn_out, pt[pre + "attn_ln_g"], pt[pre + "attn_ln_b"])
        inner = autodiff.gelu(x @ pt[pre + "ffn_w1"] + pt[pre + "ffn_b1"])
        ffn_out = inner @ pt[pre + "ffn_w2"] + pt[pre + "ffn_b2"]
        x = autodiff.layer_norm(x + ffn_out, pt[pre + "ffn_ln_g"], pt[pre + "ffn_ln_b"])
    return x, attn_maps


def wrap_tensors(params: ModelParams, trainable: bool = True) -> dict[str, Tensor]:
    make = autodiff.parameter if trainable else autodiff.constant
    return {k: make(v) for k, v in params.tensors.items()}


def _check_ids(ids: Sequence[int], config: ModelConfig) -> None:
    for pos, tid in enumerate(ids):
        if not 0 <= tid < config.vocab_size:
            raise DataError(f"token id {tid} out of range at position {pos}")


def encode(tokens: Sequence[int], segments: Sequence[int], params: ModelParams,
           collect_attention: bool = False) -> EncoderOutput:
    """Encode one sequence; deterministic in params and input."""
    if len(tokens) != len(segments):
        raise DataError("tokens and segments must have equal length")
    if not tokens:
        raise DataError("cannot encode an empty sequence")
    config = params.config
    _check_ids(tokens, config)
    pt = wrap_tensors(params, trainable=False)
    ids = np.asarray([tokens], dtype=np.int64)
    segs = np.asarray([segments], dtype=np.int64)
    hidden, attn = encode_tensors(pt, config, ids, segs,
                                  collect_attention=collect_attention)
    states = hidden.data[0]
    return EncoderOutput(hidden_states=states, cls_vector=states[0],
                         attention=[a[0] for a in attn] if collect_attention else None)


def pad_rows(rows: Sequence[Sequence[int]], segments: Sequence[Sequence[int]]
             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad variable-length rows into [B, L] arrays plus a real-token mask."""
    B = len(rows)
    L = max(len(r) for r in rows)
    ids = np.full((B, L), PAD, dtype=np.int64)
    segs = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, (row, seg) in enumerate(zip(rows, segments)):
        ids[i, : len(row)] = row
        segs[i, : len(seg)] = seg
        mask[i, : len(row)] = True
    return ids, segs, mask


def encode_rows(rows: Sequence[Sequence[int]], segments: Sequence[Sequence[int]],
                params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradient-free batched forward; returns hidden [B, L, H] and pad mask."""
    ids, segs, mask = pad_rows(rows, segments)
    pt = wrap_tensors(params, trainable=False)
    hidden, _ = encode_tensors(pt, params.config, ids, segs, mask)
    return hidden.data, mask


def sentence_row(tokens: Sequence[int], config: ModelConfig) -> tuple[list[int], list[int]]:
    """[CLS] sentence [SEP] with zero segments (dual/hybrid layout)."""
    body = list(tokens)[: config.max_seq_len - 2]
    row = [CLS] + body + [SEP]
    return row, [0] * len(row)


def entity_row(entity_token: int, tokens: Sequence[int], config: ModelConfig
               ) -> tuple[list[int], list[int]]:
    """[CLS] entity [SEP] sentence [SEP]; entity carries segment 0."""
    body = list(tokens)[: config.max_seq_len - 4]
    row = [CLS, entity_token, SEP] + body + [SEP]
    segs = [0, 0, 0] + [1] * (len(body) + 1)
    return row, segs


ENTITY_POSITION = 1  # index of the entity token in entity_row sequences


# -- entity embeddings and heads -------------------------------------------------


def entity_matrix(params: ModelParams) -> np.ndarray:
    """[entity_count, entity_dim] embedding rows (a view, not a copy)."""
    cfg = params.config
    if cfg.variant == "full":
        return params.tensors["token_emb"][cfg.word_vocab_size:]
    return params.tensors["entity_table"]


def embed_entity(entity_index: int, params: ModelParams) -> np.ndarray:
    if not 0 <= entity_index < params.config.entity_count:
        raise DataError(f"entity index {entity_index} out of range")
    return entity_matrix(params)[entity_index]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise NumericError("zero-norm vector in cosine similarity")
    return float(np.dot(a, b) / (na * nb))


def compatibility(entity_index: int, tokens: Sequence[int], params: ModelParams) -> float:
    """Cosine between the entity embedding and the sentence CLS encoding."""
    row, segs = sentence_row(tokens, params.config)
    out = encode(row, segs, params)
    return cosine(embed_entity(entity_index, params), out.cls_vector)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * 0.7071067811865476))


def _norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-12) * gain + bias


def mlm_head_tensors(pt: Mapping[str, Tensor], h: Tensor) -> Tensor:
    """Tied masked-token head on the graph: transform, then token_emb.T."""
    t = autodiff.gelu(h @ pt["mlm_dense_w"] + pt["mlm_dense_b"])
    t = autodiff.layer_norm(t, pt["mlm_ln_g"], pt["mlm_ln_b"])
    return t @ pt["token_emb"].transpose(1, 0) + pt["mlm_out_b"]


def hybrid_head_tensors(pt: Mapping[str, Tensor], joined: Tensor) -> Tensor:
    """Untied masked-token head over concat(hidden, entity embedding)."""
    t = autodiff.gelu(joined @ pt["hyb_dense_w"] + pt["hyb_dense_b"])
    t = autodiff.layer_norm(t, pt["hyb_ln_g"], pt["hyb_ln_b"])
    return t @ pt["hyb_out_w"] + pt["hyb_out_b"]


def mlm_logits(hidden_states: np.ndarray, positions: Sequence[int],
               params: ModelParams) -> np.ndarray:
    """Masked-token logits over the vocabulary, one row per position.

    A dense + GELU + layer-norm transform feeds a projection tied to the
    input embedding matrix, plus a learned bias.
    """
    if "mlm_out_b" not in params.tensors:
        raise DataError(f"variant {params.config.variant!r} has no tied MLM head")
    positions = list(positions)
    L = hidden_states.shape[0]
    for p in positions:
        if not 0 <= p < L:
            raise DataError(f"masked position {p} outside sequence of length {L}")
    if not positions:
        return np.zeros((0, params.config.vocab_size), dtype=hidden_states.dtype)
    t = params.tensors
    x = _gelu_np(hidden_states[positions] @ t["mlm_dense_w"] + t["mlm_dense_b"])
    x = _norm_np(x, t["mlm_ln_g"], t["mlm_ln_b"])
    return x @ t["token_emb"].T + t["mlm_out_b"]


def hybrid_mlm_logits(hidden_states: np.ndarray, entity_vec: np.ndarray,
                      positions: Sequence[int], params: ModelParams) -> np.ndarray:
    """Masked-token logits from hidden state concatenated with the entity.

    Mirrors the tied head's transform but over the wider input, with its
    own (untied) output projection.
    """
    cfg = params.config
    if "hyb_dense_w" not in params.tensors:
        raise DataError(f"variant {cfg.variant!r} has no hybrid MLM head")
    if entity_vec.shape != (cfg.entity_dim,):
        raise DataError(f"entity vector has shape {entity_vec.shape}, "
                        f"expected ({cfg.entity_dim},)")
    positions = list(positions)
    if not positions:
        return np.zeros((0, cfg.vocab_size), dtype=hidden_states.dtype)
    t = params.tensors
    h = hidden_states[positions]
    joined = np.concatenate([h, np.tile(entity_vec, (len(positions), 1))], axis=1)
    x = _gelu_np(joined @ t["hyb_dense_w"] + t["hyb_dense_b"])
    x = _norm_np(x, t["hyb_ln_g"], t["hyb_ln_b"])
    return x @ t["hyb_out_w"] + t["hyb_out_b"]


def classifier_logit(cls_vector: np.ndarray, params: ModelParams) -> float:
    if "cls_w" not in params.tensors:
        raise DataError(f"variant {params.config.variant!r} has no binary classifier head")
    return float(cls_vector @ params.tensors["cls_w"] + params.tensors["cls_b"])


# -- checkpoints ------------------------------------------------------------------


_MANIFEST = "manifest.json"


def save_checkpoint(params: ModelParams, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    dtype = next(iter(params.tensors.values())).dtype
    code = "<f8" if dtype == np.float64 else "<f4"
    manifest = {
        "format": "textent-checkpoint",
        "version": 1,
        "config": asdict(params.config),
        "dtype": code,
        "tensors": {},
    }
    for name, arr in sorted(params.tensors.items()):
        fname = f"tensors/{name}.bin"
        arr.astype(code).tofile(directory / fname)
        manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
    with open(directory / _MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(directory: str | Path) -> ModelParams:
    directory = Path(directory)
    try:
        with open(directory / _MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no checkpoint manifest in {directory}") from exc
    config = ModelConfig(**manifest["config"])
    config.validate()
    code = manifest["dtype"]
    shapes = expected_shapes(config)
    listed = set(manifest["tensors"])
    if listed != set(shapes):
        missing = sorted(set(shapes) - listed)
        extra = sorted(listed - set(shapes))
        raise DataError(f"checkpoint tensors do not match config "
                        f"(missing {missing}, unexpected {extra})")
    tensors = {}
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        if shape != shapes[name]:
            raise DataError(f"tensor '{name}' has shape {shape}, expected {shapes[name]}")
        data = np.fromfile(directory / meta["file"], dtype=code)
        if data.size != int(np.prod(shape)):
            raise DataError(f"tensor '{name}' file has {data.size} values, "
                            f"expected {int(np.prod(shape))}")
        native = np.float64 if code == "<f8" else np.float32
        tensors[name] = data.reshape(shape).astype(native)
    return ModelParams(config, tensors)
