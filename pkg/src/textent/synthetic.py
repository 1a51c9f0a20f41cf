"""Deterministic synthetic entity-attribute corpus generator.

Each entity owns a fixed set of attribute words drawn from one topic
cluster of the attribute vocabulary, plus a few off-cluster distractor
words. Sentences mix the entity's attribute/distractor words with filler
noise. Tag votes count, per true attribute, how many of the entity's
sentences mention it; distractor mentions earn no votes, which is what
makes the tag labels more than a word-count readout. Queries are fresh
shuffles of an entity's full attribute set with that entity as the unique
relevant answer.

Everything is a pure function of the spec (including its seed): same spec,
byte-identical world.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import DataError
from .text import (CorpusExample, Query, TagVotes, Vocabulary, build_vocab,
                   extend_with_entities)

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Knobs for the generated world; all counts must be >= 1."""

    entities: int = 100
    attribute_vocab: int = 200
    attributes_per_entity: int = 20
    sentences_per_entity: int = 50
    words_per_sentence: int = 10
    noise_ratio: float = 0.3
    seed: int = 0
    clusters: int = 5
    distractor_ratio: float = 0.25  # distractors per entity, as a fraction of attributes

    def validate(self) -> None:
        for name in ("entities", "attribute_vocab", "attributes_per_entity",
                     "sentences_per_entity", "words_per_sentence", "clusters"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if not 0.0 <= self.noise_ratio < 1.0:
            raise DataError("noise_ratio must be in [0, 1)")
        if self.attribute_vocab < self.attributes_per_entity:
            raise DataError("attribute vocabulary smaller than attributes per entity")
        if self.attribute_vocab // self.clusters < self.attributes_per_entity:
            raise DataError("cluster size smaller than attributes per entity")

    @property
    def distractors_per_entity(self) -> int:
        return int(round(self.distractor_ratio * self.attributes_per_entity))


@dataclass
class SyntheticWorld:
    """Generated corpus plus the exact ground truth behind it."""

    spec: SyntheticWorldSpec
    corpus: list[CorpusExample]
    vocab: Vocabulary
    attributes: dict[str, list[str]]
    distractors: dict[str, list[str]]
    queries: list[Query]
    votes: TagVotes
    sentences: dict[str, list[list[str]]] = field(repr=False, default_factory=dict)

    @property
    def entity_ids(self) -> list[str]:
        return sorted(self.attributes)


def _make_words(rng: np.random.Generator, count: int, taken: set[str],
                syllables: int = 3) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        word = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                       for _ in range(syllables))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def generate_synthetic(spec: SyntheticWorldSpec) -> SyntheticWorld:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    taken: set[str] = set()
    attr_words = _make_words(rng, spec.attribute_vocab, taken)
    filler_words = _make_words(rng, max(50, spec.attribute_vocab // 2), taken)

    cluster_size = spec.attribute_vocab // spec.clusters
    cluster_of = np.minimum(np.arange(spec.attribute_vocab) // cluster_size,
                            spec.clusters - 1)
    n_distr = spec.distractors_per_entity
    if n_distr and spec.attribute_vocab - cluster_size < n_distr:
        raise DataError("not enough off-cluster tags for distractors")

    entity_ids = [f"e{i:04d}" for i in range(spec.entities)]
    attributes: dict[str, list[str]] = {}
    distractors: dict[str, list[str]] = {}
    seen_sets: set[frozenset[int]] = set()
    for eid in entity_ids:
        while True:
            cluster = int(rng.integers(spec.clusters))
            members = np.flatnonzero(cluster_of == cluster)
            attr_idx = rng.choice(members, size=spec.attributes_per_entity, replace=False)
            key = frozenset(int(i) for i in attr_idx)
            if key not in seen_sets:
                seen_sets.add(key)
                break
        attributes[eid] = [attr_words[i] for i in sorted(attr_idx)]
        if n_distr:
            outside = np.flatnonzero(cluster_of != cluster)
            distr_idx = rng.choice(outside, size=n_distr, replace=False)
            distractors[eid] = [attr_words[i] for i in sorted(distr_idx)]
        else:
            distractors[eid] = []

    sentences: dict[str, list[list[str]]] = {}
    votes = TagVotes(tags=list(attr_words))
    for eid in entity_ids:
        pool = attributes[eid] + distractors[eid]
        rows: list[list[str]] = []
        for _ in range(spec.sentences_per_entity):
            words = []
            for _ in range(spec.words_per_sentence):
                if rng.random() < spec.noise_ratio:
                    words.append(filler_words[int(rng.integers(len(filler_words)))])
                else:
                    words.append(pool[int(rng.integers(len(pool)))])
            rows.append(words)
        sentences[eid] = rows
        for tag in attributes[eid]:
            mention_count = sum(1 for row in rows if tag in row)
            if mention_count:
                votes.add(eid, tag, mention_count)

    queries = []
    for eid in entity_ids:
        order = rng.permutation(len(attributes[eid]))
        queries.append(Query(" ".join(attributes[eid][i] for i in order), [eid]))

    vocab = build_vocab((row for rows in sentences.values() for row in rows), min_freq=1)
    vocab = extend_with_entities(vocab, entity_ids)
    corpus = [CorpusExample(eid, [vocab.lookup(w) for w in row])
              for eid in entity_ids for row in sentences[eid]]
    return SyntheticWorld(spec=spec, corpus=corpus, vocab=vocab,
                          attributes=attributes, distractors=distractors,
                          queries=queries, votes=votes, sentences=sentences)
