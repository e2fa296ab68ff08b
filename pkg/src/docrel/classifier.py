"""Relation logits, the adaptive-threshold loss, and the decision rule.

Logit layout: indices [0, R) are relation categories and index R is the
learned threshold category TH. Training and prediction both operate on raw
logits; the logistic transform is exposed separately for probability
reporting only.

The loss splits a pair's categories into positives P (its gold relations) and
negatives N (the rest). It pushes every positive logit above TH via a softmax
over P + {TH} and pushes TH above every negative via a softmax over N + {TH}:

    loss = sum_{r in P} [lse(logits[P + TH]) - logit_r]
           + lse(logits[N + TH]) - logit_TH

With no positives the first group is empty and only the TH-vs-negatives term
remains. Adding a constant to all logits changes nothing; a pair is predicted
to hold relation r exactly when logit_r > logit_TH (ties are negative).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ClassifierError(ValueError):
    pass


@dataclass
class ClassifierParams:
    """Two affine layers with a tanh between; output width R + 1."""

    W_a: Tensor  # (2d + d_node) x d
    b_a: Tensor  # d
    W_b: Tensor  # d x (R + 1)
    b_b: Tensor  # R + 1


@dataclass
class PairLogits:
    logits: Tensor
    pair: tuple[int, int]

    @property
    def num_relations(self) -> int:
        return self.logits.shape[-1] - 1


def logits_rows(features: Tensor, params: ClassifierParams) -> Tensor:
    """Logit rows for a batch: tanh(feat @ W_a + b_a) @ W_b + b_b."""
    hidden = ad.tanh(features @ params.W_a + params.b_a)
    return hidden @ params.W_b + params.b_b


def pair_logits(
    e_head,
    e_tail,
    p_final,
    params: ClassifierParams,
    pair: tuple[int, int] = (0, 1),
) -> PairLogits:
    """Logits for one pair from [e_head; e_tail; final node vector]."""
    feat = ad.concat([ad.as_tensor(e_head), ad.as_tensor(e_tail), ad.as_tensor(p_final)])
    row = logits_rows(ad.reshape(feat, (1, -1)), params)
    return PairLogits(ad.reshape(row, (-1,)), pair)


def probabilities(pl: PairLogits) -> np.ndarray:
    """Per-relation logistic probabilities (reporting only)."""
    return 1.0 / (1.0 + np.exp(-pl.logits.data))


def atl_loss(pl: PairLogits | Tensor, gold: set[int]) -> Tensor:
    """Adaptive-threshold loss of one pair's logits against its gold set."""
    logits = pl.logits if isinstance(pl, PairLogits) else ad.as_tensor(pl)
    width = logits.shape[-1]
    th = width - 1
    gold = set(gold)
    if th in gold:
        raise ClassifierError(f"threshold category {th} cannot be a gold relation")
    for r in gold:
        if not (0 <= r < th):
            raise ClassifierError(f"gold relation {r} outside [0, {th})")
    pos = sorted(gold)
    neg = sorted(set(range(th)) - gold)

    neg_block = ad.take(logits, neg + [th])
    loss = ad.logsumexp(neg_block) - ad.take(logits, [th]).sum()
    if pos:
        pos_block = ad.take(logits, pos + [th])
        loss = loss + float(len(pos)) * ad.logsumexp(pos_block) - ad.take(logits, pos).sum()
    return loss


def predict(pl: PairLogits) -> set[int]:
    """Relations scoring strictly above the threshold logit."""
    data = pl.logits.data if isinstance(pl, PairLogits) else np.asarray(pl)
    th = data[-1]
    return {int(r) for r in np.nonzero(data[:-1] > th)[0]}


# -- prediction dump ----------------------------------------------------------

PREDICTIONS_HEADER = "doc_id\thead\ttail\trelation\tscore"


def write_predictions(path, records) -> None:
    """Tab-delimited dump, one (doc_id, head, tail, relation, score) per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for doc_id, h, t, r, score in records:
            fh.write(f"{doc_id}\t{h}\t{t}\t{r}\t{score:.10g}\n")


def read_predictions(path) -> list[tuple[str, int, int, int, float]]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != PREDICTIONS_HEADER:
            raise ClassifierError(f"{path}: unexpected header {header!r}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            doc_id, h, t, r, score = line.rstrip("\n").split("\t")
            out.append((doc_id, int(h), int(t), int(r), float(score)))
    return out
