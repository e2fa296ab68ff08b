"""Entity-pair nodes, the shared-entity graph, and attention message passing.

Node construction: the pair-specific head/tail vectors and the pair context
are fused through tanh affine maps and a group bilinear interaction, then
concatenated with per-entity-type feature rows into the initial node vector.
Nodes are all ordered entity pairs; two nodes are adjacent iff they share at
least one entity. Each layer aggregates neighbor embeddings with dot-product
attention, maps the aggregate through a feed-forward block, and applies a
residual connection with layer normalization.

The group bilinear comes in two selectable readings:

* ``vector`` (default): per group i, block_i = logistic(z_h^i * (W_p^i z_t^i))
  elementwise; blocks concatenate back to a d-vector.
* ``scalar``: logistic(sum_i z_h^i . (W_p^i z_t^i)), a single value. This is
  the literal one-number reading; it starves the downstream layers, so it is
  kept only as a comparison variant.

Likewise the message summand is selectable: ``neighbor`` aggregates the
neighbors' embeddings (default); ``self`` aggregates the receiving node's own
embedding, which collapses to an attention-independent message and is kept
only for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYERNORM_EPS = 1e-5

BILINEAR_MODES = ("vector", "scalar")
SUMMAND_MODES = ("neighbor", "self")


class GraphError(ValueError):
    pass


@dataclass
class PairNodeParams:
    """Weights of the node constructor.

    W_h, W_t fuse the entity vectors, W_c1, W_c2 fuse the context (all d x d);
    W_p holds k group matrices of shape (d/k, d/k); coref_table has one
    d_coref row per entity type.
    """

    W_h: Tensor
    W_t: Tensor
    W_c1: Tensor
    W_c2: Tensor
    W_p: list[Tensor]
    coref_table: Tensor


@dataclass
class GnnLayerParams:
    W_r: Tensor
    Q: Tensor
    K: Tensor
    ffn_W1: Tensor
    ffn_b1: Tensor
    ffn_W2: Tensor
    ffn_b2: Tensor
    ln_scale: Tensor
    ln_shift: Tensor


@dataclass
class PairGraph:
    """Topology over ordered entity pairs (embeddings are attached by runs)."""

    nodes: list[tuple[int, int]]
    index: dict[tuple[int, int], int]
    adjacency: list[list[int]]
    layer_embeddings: list[np.ndarray] | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def neighbor_mask(self) -> np.ndarray:
        mask = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for u, nbrs in enumerate(self.adjacency):
            mask[u, nbrs] = True
        return mask


def build_graph(num_entities: int) -> PairGraph:
    """All ordered pairs as nodes, edges between pairs sharing an entity."""
    if num_entities < 2:
        raise GraphError(f"need at least 2 entities, got {num_entities}")
    nodes = [(h, t) for h in range(num_entities) for t in range(num_entities) if h != t]
    index = {p: i for i, p in enumerate(nodes)}
    # Pairs containing entity e, for both slots.
    incident: list[list[int]] = [[] for _ in range(num_entities)]
    for i, (h, t) in enumerate(nodes):
        incident[h].append(i)
        incident[t].append(i)
    adjacency = []
    for i, (h, t) in enumerate(nodes):
        nbrs = set(incident[h]) | set(incident[t])
        nbrs.discard(i)
        adjacency.append(sorted(nbrs))
    return PairGraph(nodes, index, adjacency)


def _group_views(z: Tensor, k: int) -> list[Tensor]:
    d = z.shape[-1]
    size = d // k
    return [ad.col_slice(z, i * size, (i + 1) * size) for i in range(k)]


def pair_embedding_rows(
    e_head: Tensor,
    e_tail: Tensor,
    c: Tensor,
    params: PairNodeParams,
    k: int,
    mode: str = "vector",
) -> Tensor:
    """Group-bilinear pair embeddings for a batch of pairs (rows)."""
    if mode not in BILINEAR_MODES:
        raise GraphError(f"unknown bilinear mode {mode!r}")
    d = e_head.shape[-1]
    if d % k != 0:
        raise GraphError(f"dimension {d} not divisible by {k} groups")
    z_h = ad.tanh(e_head @ ad.transpose(params.W_h) + c @ ad.transpose(params.W_c1))
    z_t = ad.tanh(e_tail @ ad.transpose(params.W_t) + c @ ad.transpose(params.W_c2))
    h_groups = _group_views(z_h, k)
    t_groups = _group_views(z_t, k)
    if mode == "vector":
        blocks = [
            ad.sigmoid(h_groups[i] * (t_groups[i] @ ad.transpose(params.W_p[i])))
            for i in range(k)
        ]
        return ad.concat(blocks, axis=1)
    acc = None
    for i in range(k):
        term = ad.tsum(h_groups[i] * (t_groups[i] @ ad.transpose(params.W_p[i])), axis=1, keepdims=True)
        acc = term if acc is None else acc + term
    return ad.sigmoid(acc)


def pair_embedding(
    e_head,
    e_tail,
    c,
    params: PairNodeParams,
    k: int,
    mode: str = "vector",
) -> Tensor:
    """Single-pair convenience wrapper around ``pair_embedding_rows``."""
    out = pair_embedding_rows(
        ad.reshape(ad.as_tensor(e_head), (1, -1)),
        ad.reshape(ad.as_tensor(e_tail), (1, -1)),
        ad.reshape(ad.as_tensor(c), (1, -1)),
        params,
        k,
        mode,
    )
    return ad.reshape(out, (-1,))


def init_node_rows(
    p: Tensor,
    head_types: list[int],
    tail_types: list[int],
    params: PairNodeParams,
) -> Tensor:
    """[coref(head type); pair embedding; coref(tail type)] per row."""
    num_types = params.coref_table.shape[0]
    for ty in list(head_types) + list(tail_types):
        if not (0 <= ty < num_types):
            raise GraphError(f"unknown entity type id {ty} (table has {num_types})")
    head_rows = ad.take(params.coref_table, head_types)
    tail_rows = ad.take(params.coref_table, tail_types)
    return ad.concat([head_rows, p, tail_rows], axis=1)


def init_node(p, head_type: int, tail_type: int, params: PairNodeParams) -> Tensor:
    out = init_node_rows(
        ad.reshape(ad.as_tensor(p), (1, -1)), [head_type], [tail_type], params
    )
    return ad.reshape(out, (-1,))


def _layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=-1, keepdims=True)
    return centered / ad.sqrt(var + LAYERNORM_EPS) * scale + shift


def gnn_layer(
    P: Tensor,
    graph: PairGraph,
    params: GnnLayerParams,
    summand: str = "neighbor",
) -> Tensor:
    """One round of neighborhood attention with residual + layer norm.

    score(u, v) = <Q P_v, K P_u> over v in N(u); alpha = row softmax over
    neighbors; message_u = W_r sum_v alpha_uv P_v (or P_u under ``self``);
    out_u = LayerNorm(P_u + FFN(message_u)).
    """
    if summand not in SUMMAND_MODES:
        raise GraphError(f"unknown summand mode {summand!r}")
    mask = graph.neighbor_mask()
    bias = np.where(mask, 0.0, -1e30)
    QP = P @ ad.transpose(params.Q)
    KP = P @ ad.transpose(params.K)
    scores = (KP @ ad.transpose(QP)) + bias
    alpha = ad.softmax(scores, axis=-1)
    if summand == "neighbor":
        agg = alpha @ P
    else:
        agg = ad.tsum(alpha, axis=1, keepdims=True) * P
    msg = agg @ ad.transpose(params.W_r)
    hidden = ad.tanh(msg @ ad.transpose(params.ffn_W1) + params.ffn_b1)
    f = hidden @ ad.transpose(params.ffn_W2) + params.ffn_b2
    return _layer_norm(P + f, params.ln_scale, params.ln_shift)


def neighborhood_attention(
    P_data: np.ndarray, graph: PairGraph, params: GnnLayerParams
) -> np.ndarray:
    """Attention rows (full matrix, zeros off-neighborhood) for inspection."""
    QP = P_data @ params.Q.data.T
    KP = P_data @ params.K.data.T
    scores = KP @ QP.T
    mask = graph.neighbor_mask()
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    e[~mask] = 0.0
    return e / e.sum(axis=1, keepdims=True)


def run_gnn(
    P0: Tensor,
    graph: PairGraph,
    layers: list[GnnLayerParams],
    summand: str = "neighbor",
    record: bool = False,
) -> Tensor:
    """Sequential composition of layers; zero layers returns P0 unchanged."""
    P = P0
    if record:
        graph.layer_embeddings = [np.array(P.data)]
    for lp in layers:
        P = gnn_layer(P, graph, lp, summand=summand)
        if record:
            graph.layer_embeddings.append(np.array(P.data))
    return P
