"""Triplet-set scoring: micro F1 and its filtered variants.

A triplet is (doc_id, head, tail, relation); it is correct only when all four
components match a gold triplet. The "no relation" outcome is the absence of
a triplet, so none of these sets contain a placeholder relation.

Conventions for empty denominators: precision over an empty prediction set is
1 when gold is also empty, else 0; recall mirrors this for empty gold. F1 is
0 whenever precision + recall is 0.
"""

from __future__ import annotations

from typing import Iterable, Mapping

from .corpus import Document

Triplet = tuple[str, int, int, int]
FactKey = tuple[frozenset, frozenset, int]


class MetricsError(ValueError):
    pass


def micro_f1(pred: set[Triplet], gold: set[Triplet]) -> dict:
    tp = len(pred & gold)
    if pred:
        precision = tp / len(pred)
    else:
        precision = 1.0 if not gold else 0.0
    if gold:
        recall = tp / len(gold)
    else:
        recall = 1.0 if not pred else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": tp,
        "pred_count": len(pred),
        "gold_count": len(gold),
    }


# -- training-fact exclusion --------------------------------------------------


def entity_name_key(doc: Document, entity_idx: int) -> frozenset:
    """An entity's identity across documents: the set of its mention surfaces
    (token-id tuples). For synthetic corpora each entity has one distinct name
    token, so this reduces to that id."""
    ent = doc.entities[entity_idx]
    return frozenset(
        tuple(doc.sentences[m.sent_index][m.start : m.end]) for m in ent.mentions
    )


def build_train_fact_keys(train_docs: Iterable[Document]) -> set[FactKey]:
    keys = set()
    for doc in train_docs:
        for f in doc.gold_facts:
            keys.add(
                (entity_name_key(doc, f.head), entity_name_key(doc, f.tail), f.relation)
            )
    return keys


def _fact_key(corpus: Mapping[str, Document], triplet: Triplet) -> FactKey:
    doc_id, h, t, r = triplet
    if doc_id not in corpus:
        raise MetricsError(f"triplet references unknown document {doc_id!r}")
    doc = corpus[doc_id]
    return (entity_name_key(doc, h), entity_name_key(doc, t), r)


def ign_f1(
    pred: set[Triplet],
    gold: set[Triplet],
    train_facts: set[FactKey],
    corpus: Mapping[str, Document],
) -> dict:
    """Micro F1 after removing triplets whose fact also occurs in training."""
    if not train_facts:
        return micro_f1(pred, gold)
    pred_kept = {t for t in pred if _fact_key(corpus, t) not in train_facts}
    gold_kept = {t for t in gold if _fact_key(corpus, t) not in train_facts}
    return micro_f1(pred_kept, gold_kept)


# -- sentence-locality split --------------------------------------------------


def is_intra(corpus: Mapping[str, Document], triplet: Triplet) -> bool:
    """True when some head mention and some tail mention share a sentence."""
    doc_id, h, t, _ = triplet
    if doc_id not in corpus:
        raise MetricsError(f"triplet references unknown document {doc_id!r}")
    doc = corpus[doc_id]
    head_sents = {m.sent_index for m in doc.entities[h].mentions}
    tail_sents = {m.sent_index for m in doc.entities[t].mentions}
    return bool(head_sents & tail_sents)


def intra_inter_f1(
    pred: set[Triplet], gold: set[Triplet], corpus: Mapping[str, Document]
) -> dict:
    pred_intra = {t for t in pred if is_intra(corpus, t)}
    gold_intra = {t for t in gold if is_intra(corpus, t)}
    return {
        "intra": micro_f1(pred_intra, gold_intra),
        "inter": micro_f1(pred - pred_intra, gold - gold_intra),
    }


# -- two-hop restriction ------------------------------------------------------


def two_hop_restriction(facts: set[Triplet], mode: str = "all") -> set[Triplet]:
    """Facts participating in a two-hop chain within one document.

    A chain is (h, r1, o), (o, r2, t), (h, r3, t) all present in ``facts``;
    ``all`` keeps all three members, ``r3`` keeps only the closing fact.
    """
    if mode not in ("all", "r3"):
        raise MetricsError(f"unknown infer-eval mode {mode!r}")
    by_doc: dict[str, set[Triplet]] = {}
    for t in facts:
        by_doc.setdefault(t[0], set()).add(t)
    kept: set[Triplet] = set()
    for doc_facts in by_doc.values():
        by_head: dict[int, list[Triplet]] = {}
        by_pair: dict[tuple[int, int], list[Triplet]] = {}
        for f in doc_facts:
            by_head.setdefault(f[1], []).append(f)
            by_pair.setdefault((f[1], f[2]), []).append(f)
        for f1 in doc_facts:
            h, o = f1[1], f1[2]
            for f2 in by_head.get(o, ()):
                t_ = f2[2]
                for f3 in by_pair.get((h, t_), ()):
                    if mode == "all":
                        kept.update((f1, f2, f3))
                    else:
                        kept.add(f3)
    return kept


def infer_f1(pred: set[Triplet], gold: set[Triplet], mode: str = "all") -> dict:
    """Micro F1 over the two-hop restriction of both sets.

    When gold has no chain instances the score is 0 with ``no_instances``
    set, so callers can distinguish "failed" from "not applicable".
    """
    gold_r = two_hop_restriction(gold, mode)
    pred_r = two_hop_restriction(pred, mode)
    out = micro_f1(pred_r, gold_r)
    out["no_instances"] = not gold_r
    if not gold_r:
        out["f1"] = 0.0
    return out


# -- aggregate report ---------------------------------------------------------


def full_report(
    pred: set[Triplet],
    gold: set[Triplet],
    corpus: Mapping[str, Document],
    train_facts: set[FactKey] | None = None,
    infer_mode: str = "all",
) -> dict:
    """The metrics bundle the evaluation path emits as JSON."""
    main = micro_f1(pred, gold)
    split = intra_inter_f1(pred, gold, corpus)
    ign = ign_f1(pred, gold, train_facts or set(), corpus)
    inf = infer_f1(pred, gold, mode=infer_mode)
    return {
        "f1": main["f1"],
        "precision": main["precision"],
        "recall": main["recall"],
        "ign_f1": ign["f1"],
        "intra_f1": split["intra"]["f1"],
        "inter_f1": split["inter"]["f1"],
        "infer_f1": inf["f1"],
        "infer_no_instances": inf["no_instances"],
        "counts": {
            "tp": main["tp"],
            "pred": main["pred_count"],
            "gold": main["gold_count"],
            "gold_intra": split["intra"]["gold_count"],
            "gold_inter": split["inter"]["gold_count"],
            "gold_infer": inf["gold_count"],
        },
    }
