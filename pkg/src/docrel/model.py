"""End-to-end model assembly: configuration, parameters, forward passes.

The trainable state is the mention cross-attention maps, the pair-node
constructor (including the entity-type feature table), the per-layer graph
weights, and the classifier head. Every scalar has a stable position in a
flat vector (``ModelParams.flatten``), which is what the optimizer, the
checkpoint format, and finite-difference checking operate on.

Encoder outputs are fixed inputs here, so everything that depends only on
(H, A) is precomputed once per document into ``DocFeatures`` and reused
across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cgmi import AttentionParams, integrate_mentions, mean_pool, mention_rows, pair_context
from .classifier import ClassifierParams, logits_rows, atl_loss
from .corpus import Document
from .encoder import EncodedDocument
from .pairgraph import (
    BILINEAR_MODES,
    SUMMAND_MODES,
    GnnLayerParams,
    PairGraph,
    PairNodeParams,
    build_graph,
    init_node_rows,
    pair_embedding_rows,
    run_gnn,
)

POOLING_MODES = ("context", "mean")

# Reference configuration at full scale: hidden width 768, three graph
# layers, encoder fine-tuning rate 2e-5. The encoder is stubbed here so its
# rate is recorded but unused; a real encoder integration should honor it.
FULL_SCALE_HIDDEN = 768
ENCODER_LR = 2e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    groups: int = 4
    gnn_layers: int = 3
    num_relations: int = 4
    num_entity_types: int = 3
    d_coref: int | None = None
    bilinear: str = "vector"
    gnn_summand: str = "neighbor"
    pooling: str = "context"

    def validate(self) -> "ModelConfig":
        if self.d < 1 or self.d % self.groups != 0:
            raise ConfigError(f"dimension {self.d} not divisible by {self.groups} groups")
        if self.bilinear not in BILINEAR_MODES:
            raise ConfigError(f"bilinear must be one of {BILINEAR_MODES}")
        if self.gnn_summand not in SUMMAND_MODES:
            raise ConfigError(f"gnn_summand must be one of {SUMMAND_MODES}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.num_relations < 1:
            raise ConfigError("num_relations must be positive")
        if self.gnn_layers < 0:
            raise ConfigError("gnn_layers must be non-negative")
        if self.coref_dim < 1:
            raise ConfigError("d_coref must be positive")
        return self

    @property
    def coref_dim(self) -> int:
        return self.d_coref if self.d_coref is not None else max(self.d // 6, 1)

    @property
    def pair_dim(self) -> int:
        return self.d if self.bilinear == "vector" else 1

    @property
    def node_dim(self) -> int:
        return self.pair_dim + 2 * self.coref_dim

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "groups": self.groups,
            "gnn_layers": self.gnn_layers,
            "num_relations": self.num_relations,
            "num_entity_types": self.num_entity_types,
            "d_coref": self.coref_dim,
            "bilinear": self.bilinear,
            "gnn_summand": self.gnn_summand,
            "pooling": self.pooling,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d).validate()


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random semi-orthogonal matrix: the smaller dimension is orthonormal."""
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


@dataclass
class ModelParams:
    config: ModelConfig
    attention: AttentionParams
    pairnode: PairNodeParams
    gnn: list[GnnLayerParams]
    classifier: ClassifierParams

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [
            ("cgmi.W_Q", self.attention.W_Q),
            ("cgmi.W_K", self.attention.W_K),
            ("pairnode.W_h", self.pairnode.W_h),
            ("pairnode.W_t", self.pairnode.W_t),
            ("pairnode.W_c1", self.pairnode.W_c1),
            ("pairnode.W_c2", self.pairnode.W_c2),
        ]
        out += [(f"pairnode.W_p.{i}", w) for i, w in enumerate(self.pairnode.W_p)]
        out.append(("pairnode.coref", self.pairnode.coref_table))
        for l, lp in enumerate(self.gnn):
            out += [
                (f"gnn.{l}.W_r", lp.W_r),
                (f"gnn.{l}.Q", lp.Q),
                (f"gnn.{l}.K", lp.K),
                (f"gnn.{l}.ffn_W1", lp.ffn_W1),
                (f"gnn.{l}.ffn_b1", lp.ffn_b1),
                (f"gnn.{l}.ffn_W2", lp.ffn_W2),
                (f"gnn.{l}.ffn_b2", lp.ffn_b2),
                (f"gnn.{l}.ln_scale", lp.ln_scale),
                (f"gnn.{l}.ln_shift", lp.ln_shift),
            ]
        out += [
            ("clf.W_a", self.classifier.W_a),
            ("clf.b_a", self.classifier.b_a),
            ("clf.W_b", self.classifier.W_b),
            ("clf.b_b", self.classifier.b_b),
        ]
        return out

    @property
    def size(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def flat_index(self) -> list[tuple[str, int, tuple[int, ...]]]:
        """(name, offset, shape) for every tensor, in flat order."""
        out = []
        off = 0
        for name, t in self.named_tensors():
            out.append((name, off, t.data.shape))
            off += t.data.size
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for _, t in self.named_tensors()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ConfigError(f"flat vector has {vec.size} values, model has {self.size}")
        off = 0
        for _, t in self.named_tensors():
            n = t.data.size
            t.data = vec[off : off + n].reshape(t.data.shape).copy()
            off += n

    def grads_flat(self) -> np.ndarray:
        parts = []
        for _, t in self.named_tensors():
            if t.grad is None:
                parts.append(np.zeros(t.data.size))
            else:
                parts.append(t.grad.ravel().copy())
        return np.concatenate(parts)

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def name_of_flat_index(self, idx: int) -> str:
        for name, off, shape in self.flat_index():
            size = int(np.prod(shape)) if shape else 1
            if off <= idx < off + size:
                return f"{name}[{idx - off}]"
        raise IndexError(idx)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Random orthogonal weights, zero biases, unit layer-norm scales."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0xD0C])
    d, k = cfg.d, cfg.groups
    dn = cfg.node_dim

    def mat(rows, cols):
        return Tensor.param(orthogonal(rng, rows, cols))

    def zeros(n):
        return Tensor.param(np.zeros(n))

    attention = AttentionParams(W_Q=mat(d, d), W_K=mat(d, d))
    pairnode = PairNodeParams(
        W_h=mat(d, d),
        W_t=mat(d, d),
        W_c1=mat(d, d),
        W_c2=mat(d, d),
        W_p=[mat(d // k, d // k) for _ in range(k)],
        coref_table=mat(cfg.num_entity_types, cfg.coref_dim),
    )
    gnn = [
        GnnLayerParams(
            W_r=mat(dn, dn),
            Q=mat(dn, dn),
            K=mat(dn, dn),
            ffn_W1=mat(dn, dn),
            ffn_b1=zeros(dn),
            ffn_W2=mat(dn, dn),
            ffn_b2=zeros(dn),
            ln_scale=Tensor.param(np.ones(dn)),
            ln_shift=zeros(dn),
        )
        for _ in range(cfg.gnn_layers)
    ]
    classifier = ClassifierParams(
        W_a=mat(2 * d + dn, d),
        b_a=zeros(d),
        W_b=mat(d, cfg.num_relations + 1),
        b_b=zeros(cfg.num_relations + 1),
    )
    return ModelParams(cfg, attention, pairnode, gnn, classifier)


# -- per-document feature cache ---------------------------------------------


@dataclass
class PairFeature:
    head: int
    tail: int
    c: np.ndarray
    a: np.ndarray
    degenerate: bool
    head_rows: np.ndarray
    tail_rows: np.ndarray
    head_type: int
    tail_type: int
    gold: frozenset[int]


@dataclass
class DocFeatures:
    doc_id: str
    num_entities: int
    pairs: list[PairFeature]
    graph: PairGraph


def document_features(doc: Document, enc: EncodedDocument, cfg: ModelConfig) -> DocFeatures:
    """Everything the trainable forward needs, precomputed from (H, A)."""
    gold_by_pair: dict[tuple[int, int], set[int]] = {}
    for f in doc.gold_facts:
        if f.relation >= cfg.num_relations:
            raise ConfigError(
                f"{doc.doc_id}: relation {f.relation} outside model range "
                f"[0, {cfg.num_relations})"
            )
        gold_by_pair.setdefault((f.head, f.tail), set()).add(f.relation)

    graph = build_graph(len(doc.entities))
    pairs = []
    for h, t in graph.nodes:
        head, tail = doc.entities[h], doc.entities[t]
        ctx = pair_context(enc, head, tail)
        pairs.append(
            PairFeature(
                head=h,
                tail=t,
                c=ctx.c,
                a=ctx.a,
                degenerate=ctx.degenerate,
                head_rows=mention_rows(enc, head),
                tail_rows=mention_rows(enc, tail),
                head_type=head.entity_type,
                tail_type=tail.entity_type,
                gold=frozenset(gold_by_pair.get((h, t), ())),
            )
        )
    return DocFeatures(doc.doc_id, len(doc.entities), pairs, graph)


# -- forward passes -----------------------------------------------------------


def forward_logits(feat: DocFeatures, params: ModelParams) -> Tensor:
    """Logit matrix (pairs x (R+1)) for one document."""
    cfg = params.config
    e_heads, e_tails = [], []
    for pf in feat.pairs:
        if cfg.pooling == "context":
            e_h, _ = integrate_mentions(pf.c, pf.head_rows, params.attention)
            e_t, _ = integrate_mentions(pf.c, pf.tail_rows, params.attention)
        else:
            e_h = mean_pool(pf.head_rows)
            e_t = mean_pool(pf.tail_rows)
        e_heads.append(e_h)
        e_tails.append(e_t)
    E_h = ad.stack(e_heads)
    E_t = ad.stack(e_tails)
    C = Tensor.constant(np.stack([pf.c for pf in feat.pairs]))
    P = pair_embedding_rows(E_h, E_t, C, params.pairnode, cfg.groups, cfg.bilinear)
    node0 = init_node_rows(
        P,
        [pf.head_type for pf in feat.pairs],
        [pf.tail_type for pf in feat.pairs],
        params.pairnode,
    )
    final = run_gnn(node0, feat.graph, params.gnn, summand=cfg.gnn_summand)
    return logits_rows(ad.concat([E_h, E_t, final], axis=1), params.classifier)


def document_loss(feat: DocFeatures, params: ModelParams) -> Tensor:
    """Mean adaptive-threshold loss over the document's ordered pairs."""
    logits = forward_logits(feat, params)
    total = None
    for i, pf in enumerate(feat.pairs):
        row = ad.reshape(ad.take(logits, [i]), (-1,))
        l = atl_loss(row, set(pf.gold))
        total = l if total is None else total + l
    return total * (1.0 / len(feat.pairs))


def predict_document(feat: DocFeatures, params: ModelParams) -> set[tuple[int, int, int]]:
    """Positive-relation decisions {(head, tail, relation)} for one document."""
    with ad.no_grad():
        logits = forward_logits(feat, params).data
    th = logits[:, -1]
    out = set()
    for i, pf in enumerate(feat.pairs):
        for r in np.nonzero(logits[i, :-1] > th[i])[0]:
            out.add((pf.head, pf.tail, int(r)))
    return out


def predict_scores(
    feat: DocFeatures, params: ModelParams
) -> list[tuple[int, int, int, float]]:
    """(head, tail, relation, probability) for every predicted positive."""
    with ad.no_grad():
        logits = forward_logits(feat, params).data
    probs = 1.0 / (1.0 + np.exp(-logits))
    out = []
    for i, pf in enumerate(feat.pairs):
        th = logits[i, -1]
        for r in np.nonzero(logits[i, :-1] > th)[0]:
            out.append((pf.head, pf.tail, int(r), float(probs[i, r])))
    return out
