"""Document model, DocRED-format parsing, mention markers, synthetic corpora.

A corpus file is line-delimited JSON: a header line
``{"format": "docrel-corpus", "version": 1, "num_docs": N}`` followed by one
serialized document per line (see ``document_to_dict`` for the schema).

Marker tokens are two reserved ids (``MARKER_START``, ``MARKER_END``), chosen
negative so they can never collide with vocabulary ids, which are always
non-negative. Deleting all marker tokens from a marked sequence recovers the
original flat token sequence exactly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

MARKER_START = -1
MARKER_END = -2

CORPUS_FORMAT = "docrel-corpus"
CORPUS_VERSION = 1

# Entity types used by the public DocRED release.
DOCRED_TYPES = {"PER": 0, "ORG": 1, "LOC": 2, "TIME": 3, "NUM": 4, "MISC": 5}


class CorpusError(ValueError):
    """Malformed record, invariant violation, or bad generator config."""


@dataclass(frozen=True)
class Mention:
    """One textual occurrence of an entity: a half-open token span."""

    sent_index: int
    start: int
    end: int
    entity_id: int


@dataclass(frozen=True)
class Entity:
    entity_id: int
    entity_type: int
    mentions: tuple[Mention, ...]


@dataclass(frozen=True)
class RelationFact:
    head: int
    tail: int
    relation: int


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: tuple[tuple[int, ...], ...]
    entities: tuple[Entity, ...]
    gold_facts: frozenset[RelationFact]

    def validate(self) -> "Document":
        for ent_idx, ent in enumerate(self.entities):
            if ent.entity_id != ent_idx:
                raise CorpusError(f"{self.doc_id}: entity {ent_idx} carries id {ent.entity_id}")
            if not ent.mentions:
                raise CorpusError(f"{self.doc_id}: entity {ent_idx} has no mentions")
            for m_idx, m in enumerate(ent.mentions):
                if m.entity_id != ent_idx:
                    raise CorpusError(
                        f"{self.doc_id}: entity {ent_idx} mention {m_idx} owned by {m.entity_id}"
                    )
                if not (0 <= m.sent_index < len(self.sentences)):
                    raise CorpusError(
                        f"{self.doc_id}: entity {ent_idx} mention {m_idx} in missing "
                        f"sentence {m.sent_index}"
                    )
                sent_len = len(self.sentences[m.sent_index])
                if not (0 <= m.start < m.end <= sent_len):
                    raise CorpusError(
                        f"{self.doc_id}: entity {ent_idx} mention {m_idx} span "
                        f"[{m.start},{m.end}) exceeds sentence {m.sent_index} "
                        f"length {sent_len}"
                    )
        for sent in self.sentences:
            for tok in sent:
                if tok < 0:
                    raise CorpusError(f"{self.doc_id}: negative token id {tok} (reserved)")
        for f in self.gold_facts:
            if f.head == f.tail:
                raise CorpusError(f"{self.doc_id}: fact with head == tail ({f.head})")
            for side in (f.head, f.tail):
                if not (0 <= side < len(self.entities)):
                    raise CorpusError(f"{self.doc_id}: fact references entity {side}")
            if f.relation < 0:
                raise CorpusError(f"{self.doc_id}: negative relation id {f.relation}")
        return self

    def num_pairs(self) -> int:
        m = len(self.entities)
        return m * (m - 1)


def ordered_pairs(num_entities: int) -> list[tuple[int, int]]:
    """All ordered entity pairs (h, t), h != t, in head-major order."""
    return [(h, t) for h in range(num_entities) for t in range(num_entities) if h != t]


@dataclass(frozen=True)
class MarkedDocument:
    """Flat token sequence with marker tokens around every mention span.

    ``mention_starts`` maps (entity_id, mention_index) to the flat index of
    that mention's start-marker token.
    """

    tokens: tuple[int, ...]
    mention_starts: dict[tuple[int, int], int]
    doc: Document


# -- DocRED ingestion ------------------------------------------------------


def token_id(token: str) -> int:
    """Stable non-negative id for a surface token (crc32 of utf-8 bytes)."""
    return zlib.crc32(token.encode("utf-8"))


def parse_docred(
    record: Mapping,
    relation_map: Mapping[str, int] | None = None,
    type_map: Mapping[str, int] | None = None,
) -> Document:
    """Build a Document from one DocRED-style JSON record.

    The record must have ``title``, ``sents`` (token strings per sentence) and
    ``vertexSet``; ``labels`` is optional. Relation names are resolved through
    ``relation_map`` (name -> id); integer relation ids pass through directly.
    Identical facts are deduplicated silently; unknown relation or entity-type
    names and out-of-bounds spans are errors.
    """
    if type_map is None:
        type_map = DOCRED_TYPES
    try:
        title = record["title"]
        sents = record["sents"]
        vertex_set = record["vertexSet"]
    except KeyError as exc:
        raise CorpusError(f"record missing field {exc}") from exc

    sentences = tuple(tuple(token_id(tok) for tok in sent) for sent in sents)

    entities = []
    for ent_idx, vertex in enumerate(vertex_set):
        if not vertex:
            raise CorpusError(f"{title}: entity {ent_idx} has no mentions")
        mentions = []
        ent_type_name = vertex[0].get("type", "MISC")
        if ent_type_name not in type_map:
            raise CorpusError(f"{title}: unknown entity type {ent_type_name!r}")
        for m_idx, m in enumerate(vertex):
            sent_id = m["sent_id"]
            start, end = m["pos"]
            if not (0 <= sent_id < len(sentences)):
                raise CorpusError(
                    f"{title}: entity {ent_idx} mention {m_idx} in missing sentence {sent_id}"
                )
            if not (0 <= start < end <= len(sentences[sent_id])):
                raise CorpusError(
                    f"{title}: entity {ent_idx} mention {m_idx} span [{start},{end}) "
                    f"exceeds sentence {sent_id} length {len(sentences[sent_id])}"
                )
            mentions.append(Mention(sent_id, start, end, ent_idx))
        entities.append(Entity(ent_idx, type_map[ent_type_name], tuple(mentions)))

    facts = set()
    for label in record.get("labels", ()):
        rel = label["r"]
        if isinstance(rel, str):
            if relation_map is None or rel not in relation_map:
                raise CorpusError(f"{title}: unknown relation name {rel!r}")
            rel = relation_map[rel]
        facts.add(RelationFact(label["h"], label["t"], int(rel)))

    return Document(title, sentences, tuple(entities), frozenset(facts)).validate()


# -- serialization ---------------------------------------------------------


def document_to_dict(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "sentences": [list(s) for s in doc.sentences],
        "entities": [
            {
                "type": e.entity_type,
                "mentions": [[m.sent_index, m.start, m.end] for m in e.mentions],
            }
            for e in doc.entities
        ],
        "facts": sorted([f.head, f.tail, f.relation] for f in doc.gold_facts),
    }


def document_from_dict(d: Mapping) -> Document:
    entities = tuple(
        Entity(
            i,
            e["type"],
            tuple(Mention(s, a, b, i) for s, a, b in e["mentions"]),
        )
        for i, e in enumerate(d["entities"])
    )
    facts = frozenset(RelationFact(h, t, r) for h, t, r in d["facts"])
    return Document(
        d["doc_id"],
        tuple(tuple(s) for s in d["sentences"]),
        entities,
        facts,
    ).validate()


def save_corpus(path, docs: Sequence[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "num_docs": len(docs)}
        fh.write(json.dumps(header) + "\n")
        for doc in docs:
            fh.write(json.dumps(document_to_dict(doc), sort_keys=True) + "\n")


def load_corpus(path) -> list[Document]:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CorpusError(f"{path}: empty corpus file")
        header = json.loads(header_line)
        if header.get("format") != CORPUS_FORMAT:
            raise CorpusError(f"{path}: not a {CORPUS_FORMAT} file")
        if header.get("version") != CORPUS_VERSION:
            raise CorpusError(f"{path}: unsupported corpus version {header.get('version')}")
        docs = [document_from_dict(json.loads(line)) for line in fh if line.strip()]
    if header.get("num_docs") is not None and header["num_docs"] != len(docs):
        raise CorpusError(f"{path}: header says {header['num_docs']} docs, found {len(docs)}")
    return docs


# -- marker insertion --------------------------------------------------------


def insert_markers(doc: Document) -> MarkedDocument:
    """Insert start/end marker tokens around every mention span.

    Markers are inserted in order of (span start ascending, span end
    descending), so outer spans open before nested inner spans; at a shared
    boundary position, closing markers precede opening markers. Exactly
    duplicated spans are tie-broken by (entity_id, mention_index) so the
    output is deterministic.
    """
    offsets = []
    total = 0
    for sent in doc.sentences:
        offsets.append(total)
        total += len(sent)
    flat = [tok for sent in doc.sentences for tok in sent]

    # Events keyed so sorting yields the insertion discipline above.
    # kind 0 = end marker, 1 = start marker; ends sort before starts at a
    # shared position, inner spans close first, outer spans open first.
    events = []
    for ent in doc.entities:
        for m_idx, m in enumerate(ent.mentions):
            s = offsets[m.sent_index] + m.start
            e = offsets[m.sent_index] + m.end
            key = (ent.entity_id, m_idx)
            events.append((s, 1, -e, key))
            events.append((e, 0, -s, key))
    events.sort()

    tokens: list[int] = []
    mention_starts: dict[tuple[int, int], int] = {}
    ev_i = 0
    for pos in range(total + 1):
        while ev_i < len(events) and events[ev_i][0] == pos:
            _, kind, _, key = events[ev_i]
            if kind == 1:
                mention_starts[key] = len(tokens)
                tokens.append(MARKER_START)
            else:
                tokens.append(MARKER_END)
            ev_i += 1
        if pos < total:
            tokens.append(flat[pos])

    return MarkedDocument(tuple(tokens), mention_starts, doc)


def strip_markers(tokens: Iterable[int]) -> list[int]:
    return [t for t in tokens if t not in (MARKER_START, MARKER_END)]


# -- synthetic corpora -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for planted-relation documents.

    Token id layout inside ``[0, vocab_size)``: ids ``[0, num_relations)`` are
    per-relation trigger tokens; each entity draws a distinct name token and
    filler is sampled from ``[num_relations, vocab_size)``. A planted fact
    (h, r, t) writes ``name_h  trigger_r  name_t`` contiguously, either inside
    one sentence or straddling a sentence boundary, so the relation and its
    direction are decodable from the tokens around the chosen mentions.
    ``fact_rate`` scales with document size: each document plants
    ``round(fact_rate * entities_per_doc)`` facts.
    """

    num_docs: int
    vocab_size: int = 64
    num_relations: int = 4
    entities_per_doc: int = 4
    mentions_per_entity: int = 2
    seed: int = 0
    fact_rate: float = 0.5
    inter_prob: float = 0.5
    num_entity_types: int = 3
    trigger_copies: int = 2
    chain_rate: float = 0.0

    def validate(self) -> "SynthConfig":
        if self.entities_per_doc < 2:
            raise CorpusError("entities_per_doc must be at least 2")
        if self.vocab_size < self.num_relations + self.entities_per_doc + 1:
            raise CorpusError(
                "vocab_size too small to reserve trigger ids and distinct entity names"
            )
        if self.num_relations < 1 or self.num_entity_types < 1:
            raise CorpusError("need at least one relation and one entity type")
        if self.mentions_per_entity < 1:
            raise CorpusError("mentions_per_entity must be at least 1")
        if self.fact_rate < 0:
            raise CorpusError("fact_rate must be non-negative")
        if self.trigger_copies < 1:
            raise CorpusError("trigger_copies must be at least 1")
        if self.chain_rate < 0:
            raise CorpusError("chain_rate must be non-negative")
        if self.chain_rate > 0 and self.entities_per_doc < 3:
            raise CorpusError("chain planting needs at least 3 entities per document")
        return self


def synth_corpus(cfg: SynthConfig) -> list[Document]:
    """Deterministic planted-relation corpus; byte-identical for equal cfg."""
    cfg.validate()
    return [_synth_document(cfg, i) for i in range(cfg.num_docs)]


def _synth_document(cfg: SynthConfig, doc_index: int) -> Document:
    rng = np.random.default_rng([cfg.seed, doc_index])
    m = cfg.entities_per_doc
    filler_lo = cfg.num_relations

    names = rng.choice(
        np.arange(filler_lo, cfg.vocab_size), size=m, replace=False
    ).tolist()
    # Filler never reuses this document's name tokens, so a name occurrence
    # always marks a real mention.
    filler_pool = np.array(
        [t for t in range(filler_lo, cfg.vocab_size) if t not in set(names)]
    )

    def filler(k: int) -> list[int]:
        return filler_pool[rng.integers(0, len(filler_pool), size=k)].tolist()
    types = rng.integers(0, cfg.num_entity_types, size=m).tolist()

    # Chain facts first: two planted legs (h, r1, o), (o, r2, t) plus an
    # unplanted closing fact (h, (r1 + r2) mod R, t) that is only inferable
    # from the legs. Their pairs are reserved before ordinary facts are drawn.
    planted: list[RelationFact] = []
    unplanted: list[RelationFact] = []
    used_pairs: set[tuple[int, int]] = set()
    whole, frac = divmod(cfg.chain_rate, 1.0)
    n_chains = int(whole) + (1 if frac > 0 and rng.random() < frac else 0)
    for _ in range(n_chains):
        for _attempt in range(20):
            h, o, t = (int(x) for x in rng.choice(m, size=3, replace=False))
            triple = [(h, o), (o, t), (h, t)]
            if not any(p in used_pairs for p in triple):
                r1 = int(rng.integers(0, cfg.num_relations))
                r2 = int(rng.integers(0, cfg.num_relations))
                planted.append(RelationFact(h, o, r1))
                planted.append(RelationFact(o, t, r2))
                unplanted.append(RelationFact(h, t, (r1 + r2) % cfg.num_relations))
                used_pairs.update(triple)
                break

    n_facts = int(round(cfg.fact_rate * m))
    all_pairs = [p for p in ordered_pairs(m) if p not in used_pairs]
    n_facts = min(n_facts, len(all_pairs))
    pair_idx = rng.choice(len(all_pairs), size=n_facts, replace=False)
    facts = planted + [
        RelationFact(all_pairs[i][0], all_pairs[i][1], int(rng.integers(0, cfg.num_relations)))
        for i in pair_idx
    ]

    # Sentence blocks are built first, then shuffled as units so inter-sentence
    # fact halves stay adjacent in the flattened token sequence.
    # Each block: (list of sentences, list of (local_sent, start, end, entity)).
    blocks: list[tuple[list[list[int]], list[tuple[int, int, int, int]]]] = []
    mentions_used = {e: 0 for e in range(m)}

    def trig_block(r: int) -> list[int]:
        return [r] * cfg.trigger_copies

    for fact in facts:
        h, t, r = fact.head, fact.tail, fact.relation
        a = int(rng.integers(1, 4))
        b = int(rng.integers(1, 4))
        k = cfg.trigger_copies
        if rng.random() < cfg.inter_prob:
            sent1 = filler(a) + [names[h]] + trig_block(r)
            sent2 = trig_block(r) + [names[t]] + filler(b)
            blocks.append(
                (
                    [sent1, sent2],
                    [(0, a, a + 1, h), (1, k, k + 1, t)],
                )
            )
        else:
            sent = filler(a) + [names[h]] + trig_block(r) + [names[t]] + filler(b)
            blocks.append(
                (
                    [sent],
                    [(0, a, a + 1, h), (0, a + 1 + k, a + 2 + k, t)],
                )
            )
        mentions_used[h] += 1
        mentions_used[t] += 1

    for e in range(m):
        missing = max(cfg.mentions_per_entity, 1) - mentions_used[e]
        for _ in range(max(missing, 0)):
            a = int(rng.integers(1, 4))
            b = int(rng.integers(1, 4))
            sent = filler(a) + [names[e]] + filler(b)
            blocks.append(([sent], [(0, a, a + 1, e)]))

    order = rng.permutation(len(blocks))
    sentences: list[tuple[int, ...]] = []
    mention_lists: dict[int, list[Mention]] = {e: [] for e in range(m)}
    for bi in order:
        block_sents, block_mentions = blocks[bi]
        base = len(sentences)
        sentences.extend(tuple(s) for s in block_sents)
        for local_sent, s, e_, ent in block_mentions:
            mention_lists[ent].append(Mention(base + local_sent, s, e_, ent))

    entities = tuple(
        Entity(e, types[e], tuple(mention_lists[e])) for e in range(m)
    )
    doc = Document(
        f"synth-{cfg.seed}-{doc_index:05d}",
        tuple(sentences),
        entities,
        frozenset(facts) | frozenset(unplanted),
    )
    return doc.validate()


# -- relabeling helper (equivariance checks) --------------------------------


def permute_entities(doc: Document, perm: Sequence[int]) -> Document:
    """Relabel entity indices: old index i becomes perm[i]. Types and mentions
    travel with their entities; facts are relabeled accordingly."""
    m = len(doc.entities)
    if sorted(perm) != list(range(m)):
        raise CorpusError("perm must be a permutation of entity indices")
    new_entities: list[Entity | None] = [None] * m
    for ent in doc.entities:
        ni = perm[ent.entity_id]
        new_entities[ni] = Entity(
            ni,
            ent.entity_type,
            tuple(replace(mm, entity_id=ni) for mm in ent.mentions),
        )
    facts = frozenset(
        RelationFact(perm[f.head], perm[f.tail], f.relation) for f in doc.gold_facts
    )
    return Document(doc.doc_id, doc.sentences, tuple(new_entities), facts).validate()
