"""Training: loss over batches, gradients, AdamW with warmup/cosine schedule,
finite-difference gradient checking, and checkpoint files.

All training arithmetic is float64; model sizes here are desk scale, so the
finite-difference tolerance (relative error 1e-4 at step 1e-5) is meaningful
and checked for every parameter.

Checkpoint file layout (little-endian):

    0   magic ``b"DRELCKP1"``
    8   uint32 header length L
    12  header: L bytes of UTF-8 JSON with keys
        {"version", "config", "count", "layout", "has_opt", "step", "meta"}
    12+L    float64 flat parameter vector, ``count`` values
    then, if has_opt: float64 first moments, float64 second moments
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Document, SynthConfig, insert_markers, synth_corpus
from .encoder import DEFAULT_OVERLAP, DEFAULT_WINDOW, encode_windows
from .model import (
    ConfigError,
    DocFeatures,
    ModelConfig,
    ModelParams,
    document_features,
    document_loss,
    init_params,
    predict_document,
)

CKPT_MAGIC = b"DRELCKP1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_frac: float = 0.1
    epochs: int = 200
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10
    early_stop_f1: float | None = None
    max_steps: int | None = None

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be non-negative, batch_size >= 1, epochs >= 0")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ConfigError("warmup_frac must lie in [0, 1)")
        return self


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_head: float) -> float:
    """Linear ramp to lr_head over the warmup, then cosine decay to zero."""
    if total_steps <= 0:
        return lr_head
    if warmup_steps > 0 and step < warmup_steps:
        return lr_head * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return lr_head * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n))


def optimizer_step(
    params_flat: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    step: int,
    cfg: TrainConfig,
    total_steps: int,
) -> tuple[np.ndarray, AdamState]:
    """One decoupled-weight-decay Adam update at the scheduled rate.

    The weight-decay term is multiplied by the scheduled rate, so step 0 of a
    warmed-up run leaves parameters exactly unchanged.
    """
    warmup_steps = int(round(cfg.warmup_frac * total_steps))
    lr = lr_at(step, total_steps, warmup_steps, cfg.lr)
    t = step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params_flat - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * params_flat)
    return new, AdamState(m, v)


# -- loss and gradients -------------------------------------------------------


def forward_loss(batch: list[DocFeatures], params: ModelParams) -> tuple[Tensor, list[Tensor]]:
    """Mean per-document loss over a batch, plus the per-document losses.

    A non-finite result triggers a checked re-run that names the first
    offending operation.
    """
    if not batch:
        raise TrainingError("empty batch")
    per_doc = [document_loss(feat, params) for feat in batch]
    total = per_doc[0]
    for l in per_doc[1:]:
        total = total + l
    loss = total * (1.0 / len(batch))
    if not np.isfinite(loss.data):
        with ad.finite_checks():
            for feat in batch:
                document_loss(feat, params)
        raise TrainingError("loss is non-finite but no op flagged; inputs degenerate?")
    return loss, per_doc


def backward(loss: Tensor, params: ModelParams) -> np.ndarray:
    """Flat gradient vector; parameters untouched by the loss get zeros."""
    params.zero_grads()
    loss.backward()
    return params.grads_flat()


# -- gradient checking --------------------------------------------------------

GRADCHECK_MODEL = ModelConfig(
    d=8, groups=2, gnn_layers=1, num_relations=2, num_entity_types=2, d_coref=2
)
GRADCHECK_SYNTH = SynthConfig(
    num_docs=1,
    vocab_size=24,
    num_relations=2,
    entities_per_doc=3,
    mentions_per_entity=2,
    num_entity_types=2,
    fact_rate=0.67,
)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    num_checked: int
    num_params: int
    non_finite: int

    @property
    def ok(self) -> bool:
        return self.non_finite == 0 and self.max_rel_err <= 1e-4


def gradcheck(
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    step: float = 1e-5,
    sample_fraction: float = 1.0,
    _grad_mutator=None,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    Builds one synthetic document and a random parameter vector, then checks
    every flat index (or a seeded random subset of at least 25% when
    ``sample_fraction`` < 1). Relative error is |a - f| / max(|a|, |f|, 1e-6);
    non-finite difference quotients are counted, never skipped silently.
    """
    cfg = (model_cfg or GRADCHECK_MODEL).validate()
    synth_cfg = SynthConfig(
        **{
            **GRADCHECK_SYNTH.__dict__,
            "seed": seed,
            "num_relations": cfg.num_relations,
            "num_entity_types": cfg.num_entity_types,
        }
    )
    doc = synth_corpus(synth_cfg)[0]
    enc = encode_windows(insert_markers(doc), d=cfg.d, seed=seed)
    feat = document_features(doc, enc, cfg)
    params = init_params(cfg, seed + 1)

    loss, _ = forward_loss([feat], params)
    analytic = backward(loss, params)
    if _grad_mutator is not None:
        analytic = _grad_mutator(analytic.copy())

    flat0 = params.flatten()
    n = flat0.size
    if sample_fraction >= 1.0:
        indices = np.arange(n)
    else:
        count = max(int(math.ceil(max(sample_fraction, 0.25) * n)), 1)
        indices = np.random.default_rng([seed, 0xFD]).choice(n, size=count, replace=False)
        indices.sort()

    def loss_at(vec: np.ndarray) -> float:
        params.load_flat(vec)
        with ad.no_grad():
            l, _ = forward_loss([feat], params)
        return float(l.data)

    worst = -1.0
    worst_idx = 0
    non_finite = 0
    work = flat0.copy()
    for idx in indices:
        orig = work[idx]
        work[idx] = orig + step
        lp = loss_at(work)
        work[idx] = orig - step
        lm = loss_at(work)
        work[idx] = orig
        fd = (lp - lm) / (2.0 * step)
        if not np.isfinite(fd):
            non_finite += 1
            continue
        rel = abs(analytic[idx] - fd) / max(abs(analytic[idx]), abs(fd), 1e-6)
        if rel > worst:
            worst = rel
            worst_idx = int(idx)
    params.load_flat(flat0)
    return GradCheckReport(
        max_rel_err=worst,
        worst_param=params.name_of_flat_index(worst_idx),
        worst_index=worst_idx,
        num_checked=len(indices),
        num_params=n,
        non_finite=non_finite,
    )


# -- feature preparation ------------------------------------------------------


def prepare_features(
    docs: list[Document],
    cfg: ModelConfig,
    encode_seed: int,
    window: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
    encodings: dict[str, object] | None = None,
) -> list[DocFeatures]:
    """Encode (or look up precomputed encodings for) each document and cache
    its pair features."""
    out = []
    for doc in docs:
        marked = insert_markers(doc)
        if encodings is not None:
            if doc.doc_id not in encodings:
                raise TrainingError(f"no encoding provided for document {doc.doc_id}")
            enc = encodings[doc.doc_id]
            if enc.d != cfg.d:
                raise TrainingError(
                    f"{doc.doc_id}: encoding dimension {enc.d} != model dimension {cfg.d}"
                )
        else:
            enc = encode_windows(marked, window, overlap, d=cfg.d, seed=encode_seed)
        out.append(document_features(doc, enc, cfg))
    return out


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[tuple[int, float, float]]
    epoch_stats: list[dict]
    diverged: bool
    steps_run: int


def _micro_f1_sets(pred: set, gold: set) -> float:
    if not pred and not gold:
        return 1.0
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate_f1(features: list[DocFeatures], params: ModelParams) -> float:
    """Micro F1 of current predictions against gold, over a feature list."""
    pred, gold = set(), set()
    for feat in features:
        for h, t, r in predict_document(feat, params):
            pred.add((feat.doc_id, h, t, r))
        for pf in feat.pairs:
            for r in pf.gold:
                gold.add((feat.doc_id, pf.head, pf.tail, r))
    return _micro_f1_sets(pred, gold)


def train(
    features: list[DocFeatures],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    dev_features: list[DocFeatures] | None = None,
) -> TrainResult:
    """Deterministic full-batch-shuffled training run.

    The iteration order is fixed by cfg.seed, so the loss curve is a pure
    function of (features, model_cfg, cfg). If the loss goes non-finite the
    run aborts and the result carries the last good parameters with
    ``diverged=True``.
    """
    cfg.validate()
    if not features:
        raise TrainingError("empty corpus")
    params = init_params(model_cfg, cfg.seed)
    flat = params.flatten()
    state = AdamState.zeros(flat.size)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])

    steps_per_epoch = math.ceil(len(features) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    curve: list[tuple[int, float, float]] = []
    epoch_stats: list[dict] = []
    last_good = flat.copy()
    step = 0
    diverged = False
    warmup_steps = int(round(cfg.warmup_frac * total_steps))

    for epoch in range(cfg.epochs):
        if step >= total_steps:
            break
        order = rng.permutation(len(features))
        epoch_losses = []
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            batch = [features[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            if not batch:
                continue
            params.load_flat(flat)
            try:
                loss, _ = forward_loss(batch, params)
            except (ad.NonFiniteError, TrainingError):
                diverged = True
                break
            grads = backward(loss, params)
            lr = lr_at(step, total_steps, warmup_steps, cfg.lr)
            curve.append((step, lr, float(loss.data)))
            epoch_losses.append(float(loss.data))
            last_good = flat.copy()
            flat, state = optimizer_step(flat, grads, state, step, cfg, total_steps)
            step += 1
        if diverged:
            flat = last_good
            break
        stats = {"epoch": epoch, "loss": float(np.mean(epoch_losses)) if epoch_losses else None}
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            params.load_flat(flat)
            stats["train_f1"] = evaluate_f1(features, params)
            if dev_features is not None:
                stats["dev_f1"] = evaluate_f1(dev_features, params)
            epoch_stats.append(stats)
            if cfg.early_stop_f1 is not None and stats["train_f1"] >= cfg.early_stop_f1:
                break
        else:
            epoch_stats.append(stats)

    params.load_flat(flat)
    return TrainResult(params, curve, epoch_stats, diverged, step)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(
    path,
    params: ModelParams,
    opt_state: AdamState | None = None,
    step: int = 0,
    meta: dict | None = None,
) -> None:
    flat = params.flatten()
    header = {
        "version": 1,
        "config": params.config.to_dict(),
        "count": int(flat.size),
        "layout": [[name, off, list(shape)] for name, off, shape in params.flat_index()],
        "has_opt": opt_state is not None,
        "step": step,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.astype("<f8").tobytes())
        if opt_state is not None:
            fh.write(opt_state.m.astype("<f8").tobytes())
            fh.write(opt_state.v.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, AdamState | None, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise TrainingError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    count = header["count"]
    off = 12 + hlen
    expect = off + 8 * count * (3 if header["has_opt"] else 1)
    if len(blob) != expect:
        raise TrainingError(f"{path}: size {len(blob)} != expected {expect}")
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
    params = init_params(cfg, 0)
    if params.size != count:
        raise TrainingError(
            f"{path}: checkpoint has {count} parameters, config implies {params.size}"
        )
    params.load_flat(flat)
    opt_state = None
    if header["has_opt"]:
        off += 8 * count
        m = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        v = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        opt_state = AdamState(m, v)
    meta = dict(header.get("meta", {}))
    meta["step"] = header.get("step", 0)
    return params, opt_state, meta
