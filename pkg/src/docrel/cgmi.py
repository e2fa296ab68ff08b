"""Context-guided mention integration.

For an ordered entity pair, the two entities' token-attention profiles are
multiplied elementwise and renormalized into a pair context distribution ``a``
over tokens; ``c = sum_j a_j * H_j`` is the pair context vector. That context
then acts as the query of a single-head cross-attention over each entity's
mention embeddings (the H rows at mention start markers), producing
pair-specific head and tail entity vectors.

The context computation involves no trainable weights and is plain numpy; the
cross-attention is differentiable in (W_Q, W_K) and the mention rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Entity
from .encoder import EncodedDocument


@dataclass
class AttentionParams:
    """Query/key maps of the mention cross-attention; both d x d."""

    W_Q: Tensor
    W_K: Tensor


@dataclass
class PairContext:
    c: np.ndarray
    a: np.ndarray
    degenerate: bool = False


@dataclass
class PairEntityEmbedding:
    e_head: Tensor
    e_tail: Tensor
    alpha_head: Tensor
    alpha_tail: Tensor
    context: PairContext


def mention_rows(enc: EncodedDocument, entity: Entity) -> np.ndarray:
    """H rows at the entity's mention start markers, one row per mention."""
    idx = [enc.mention_starts[(entity.entity_id, j)] for j in range(len(entity.mentions))]
    return enc.H[idx]


def entity_attention(enc: EncodedDocument, entity: Entity) -> np.ndarray:
    """Mean of the attention rows at the entity's mention start markers."""
    if not entity.mentions:
        raise ValueError(f"entity {entity.entity_id} has no mentions")
    idx = [enc.mention_starts[(entity.entity_id, j)] for j in range(len(entity.mentions))]
    return enc.A[idx].mean(axis=0)


def pair_context(enc: EncodedDocument, head: Entity, tail: Entity) -> PairContext:
    """Multiply the two entity attention profiles and renormalize.

    The product is symmetric in (head, tail). If the profiles have disjoint
    support the product sums to zero; the fallback is a uniform distribution
    over the union of both entities' mention start rows, flagged as degenerate
    so evaluations can count occurrences.
    """
    if head.entity_id == tail.entity_id:
        raise ValueError("pair_context requires two distinct entities")
    raw = entity_attention(enc, head) * entity_attention(enc, tail)
    total = raw.sum()
    if total == 0.0:
        rows = sorted(
            {enc.mention_starts[(e.entity_id, j)] for e in (head, tail) for j in range(len(e.mentions))}
        )
        a = np.zeros(enc.n)
        a[rows] = 1.0 / len(rows)
        return PairContext(a @ enc.H, a, degenerate=True)
    a = raw / total
    return PairContext(a @ enc.H, a, degenerate=False)


def integrate_mentions(
    c,
    rows,
    params: AttentionParams,
) -> tuple[Tensor, Tensor]:
    """Cross-attend from the pair context to one entity's mention rows.

    score_i = <W_Q c, W_K row_i> / sqrt(d); weights = softmax(scores);
    returns (sum_i weights_i * row_i, weights). Accepts numpy arrays or
    tensors for ``c`` and ``rows`` (p x d).
    """
    c = ad.as_tensor(c)
    rows = ad.as_tensor(rows)
    p, d = rows.shape
    if p < 1:
        raise ValueError("integrate_mentions needs at least one mention row")
    q = params.W_Q @ c
    keys = rows @ ad.transpose(params.W_K)
    scores = (keys @ q) * (1.0 / np.sqrt(d))
    weights = ad.softmax(scores)
    pooled = weights @ rows
    return pooled, weights


def pair_entities(
    enc: EncodedDocument,
    head: Entity,
    tail: Entity,
    params: AttentionParams,
) -> PairEntityEmbedding:
    """Pair-specific head and tail vectors, sharing one (W_Q, W_K)."""
    ctx = pair_context(enc, head, tail)
    e_head, alpha_head = integrate_mentions(ctx.c, mention_rows(enc, head), params)
    e_tail, alpha_tail = integrate_mentions(ctx.c, mention_rows(enc, tail), params)
    return PairEntityEmbedding(e_head, e_tail, alpha_head, alpha_tail, ctx)


def mean_pool(rows) -> Tensor:
    """Plain mention averaging; the ablation fallback for integrate_mentions."""
    rows = ad.as_tensor(rows)
    return ad.tmean(rows, axis=0)
