"""Batch command-line entry points.

Commands: ingest, synth, encode, train, eval, predict, gradcheck,
inspect-graph. Outputs are files plus one ``manifest.json`` per run; there is
no interactive mode. Configuration precedence is flags over ``--config`` file
over built-in defaults. Relative paths resolve under ``$DOCREL_DATA_DIR``
when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .classifier import ClassifierError, read_predictions, write_predictions
from .corpus import (
    CorpusError,
    Document,
    SynthConfig,
    insert_markers,
    load_corpus,
    parse_docred,
    save_corpus,
    synth_corpus,
)
from .encoder import (
    DEFAULT_OVERLAP,
    DEFAULT_WINDOW,
    EncodingError,
    encode_windows,
    load_encoding,
    save_encoding,
)
from .metrics import MetricsError, build_train_fact_keys, full_report
from .model import ConfigError, ModelConfig, predict_scores
from .pairgraph import GraphError, build_graph
from .training import (
    TrainConfig,
    TrainingError,
    gradcheck,
    load_checkpoint,
    prepare_features,
    save_checkpoint,
    train,
)

KNOWN_ERRORS = (
    CorpusError,
    EncodingError,
    ConfigError,
    TrainingError,
    ClassifierError,
    MetricsError,
    GraphError,
)

MODEL_FLAG_KEYS = (
    "dim",
    "groups",
    "gnn_layers",
    "relations",
    "entity_types",
    "coref_dim",
    "bilinear",
    "gnn_summand",
    "pooling",
)


def _path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get("DOCREL_DATA_DIR")
    if not path.is_absolute() and base:
        return Path(base) / path
    return path


def _load_config_file(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    with open(_path(args.config), "r", encoding="utf-8") as fh:
        return json.load(fh)


def _resolve(args, file_cfg: dict, key: str, default):
    """flags > config file > default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in file_cfg:
        return file_cfg[key]
    return default


def _model_config(args, file_cfg: dict) -> ModelConfig:
    return ModelConfig(
        d=_resolve(args, file_cfg, "dim", 32),
        groups=_resolve(args, file_cfg, "groups", 4),
        gnn_layers=_resolve(args, file_cfg, "gnn_layers", 3),
        num_relations=_resolve(args, file_cfg, "relations", 4),
        num_entity_types=_resolve(args, file_cfg, "entity_types", 3),
        d_coref=_resolve(args, file_cfg, "coref_dim", None),
        bilinear=_resolve(args, file_cfg, "bilinear", "vector"),
        gnn_summand=_resolve(args, file_cfg, "gnn_summand", "neighbor"),
        pooling=_resolve(args, file_cfg, "pooling", "context"),
    ).validate()


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, outputs: list):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(o) for o in outputs],
        "artifact_version": __version__,
        "wall_clock": datetime.now(timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args)
    cfg = SynthConfig(
        num_docs=_resolve(args, file_cfg, "num_docs", 64),
        vocab_size=_resolve(args, file_cfg, "vocab_size", 64),
        num_relations=_resolve(args, file_cfg, "relations", 4),
        entities_per_doc=_resolve(args, file_cfg, "entities", 4),
        mentions_per_entity=_resolve(args, file_cfg, "mentions", 2),
        seed=_resolve(args, file_cfg, "seed", 0),
        fact_rate=_resolve(args, file_cfg, "fact_rate", 0.5),
        inter_prob=_resolve(args, file_cfg, "inter_prob", 0.5),
        num_entity_types=_resolve(args, file_cfg, "entity_types", 3),
        trigger_copies=_resolve(args, file_cfg, "trigger_copies", 2),
        chain_rate=_resolve(args, file_cfg, "chain_rate", 0.0),
    ).validate()
    docs = synth_corpus(cfg)
    out_dir = _path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.jsonl"
    save_corpus(corpus_path, docs)
    _write_manifest(out_dir, "synth", cfg.__dict__, cfg.seed, {}, [corpus_path])
    print(f"wrote {len(docs)} documents to {corpus_path}")
    return 0


# -- ingest ----------------------------------------------------------------------


def _read_records(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.read(1)
        fh.seek(0)
        if head == "[":
            return json.load(fh)
        return [json.loads(line) for line in fh if line.strip()]


def cmd_ingest(args) -> int:
    input_path = _path(args.input)
    relation_map = None
    if args.relation_map:
        with open(_path(args.relation_map), "r", encoding="utf-8") as fh:
            relation_map = json.load(fh)
    type_map = None
    if args.type_map:
        with open(_path(args.type_map), "r", encoding="utf-8") as fh:
            type_map = json.load(fh)
    records = _read_records(input_path)
    docs = [parse_docred(rec, relation_map, type_map) for rec in records]
    out_dir = _path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.jsonl"
    save_corpus(corpus_path, docs)
    _write_manifest(
        out_dir,
        "ingest",
        {"relation_map": args.relation_map, "type_map": args.type_map},
        None,
        {"input": input_path},
        [corpus_path],
    )
    print(f"ingested {len(docs)} documents to {corpus_path}")
    return 0


# -- encode ----------------------------------------------------------------------


def _encode_one(item):
    doc_dict, d, seed, window, overlap = item
    from .corpus import document_from_dict

    doc = document_from_dict(doc_dict)
    marked = insert_markers(doc)
    return encode_windows(marked, window, overlap, d=d, seed=seed)


def cmd_encode(args) -> int:
    file_cfg = _load_config_file(args)
    d = _resolve(args, file_cfg, "dim", 32)
    seed = _resolve(args, file_cfg, "seed", 0)
    window = _resolve(args, file_cfg, "window", DEFAULT_WINDOW)
    overlap = _resolve(args, file_cfg, "overlap", DEFAULT_OVERLAP)
    jobs = _resolve(args, file_cfg, "jobs", 1)
    docs = load_corpus(_path(args.corpus))
    out_dir = _path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    from .corpus import document_to_dict

    index = {}
    outputs = []
    if jobs > 1:
        items = [(document_to_dict(doc), d, seed, window, overlap) for doc in docs]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            encs = list(pool.map(_encode_one, items))
    else:
        encs = [
            encode_windows(insert_markers(doc), window, overlap, d=d, seed=seed)
            for doc in docs
        ]
    for i, (doc, enc) in enumerate(zip(docs, encs)):
        name = f"doc_{i:05d}.enc"
        save_encoding(out_dir / name, enc)
        index[doc.doc_id] = name
        outputs.append(out_dir / name)
    index_path = out_dir / "index.json"
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    outputs.append(index_path)
    _write_manifest(
        out_dir,
        "encode",
        {"dim": d, "seed": seed, "window": window, "overlap": overlap, "jobs": jobs},
        seed,
        {"corpus": args.corpus},
        outputs,
    )
    print(f"encoded {len(docs)} documents to {out_dir}")
    return 0


def _load_encodings_dir(enc_dir: Path, docs: list[Document]) -> dict:
    with open(enc_dir / "index.json", "r", encoding="utf-8") as fh:
        index = json.load(fh)
    out = {}
    for doc in docs:
        if doc.doc_id not in index:
            raise EncodingError(f"{enc_dir}: no encoding for document {doc.doc_id!r}")
        out[doc.doc_id] = load_encoding(enc_dir / index[doc.doc_id], insert_markers(doc))
    return out


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args)
    model_cfg = _model_config(args, file_cfg)
    seed = _resolve(args, file_cfg, "seed", 0)
    train_cfg = TrainConfig(
        lr=_resolve(args, file_cfg, "lr", 1e-4),
        warmup_frac=_resolve(args, file_cfg, "warmup", 0.1),
        epochs=_resolve(args, file_cfg, "epochs", 200),
        batch_size=_resolve(args, file_cfg, "batch_size", 8),
        weight_decay=_resolve(args, file_cfg, "weight_decay", 0.01),
        seed=seed,
        eval_every=_resolve(args, file_cfg, "eval_every", 10),
        early_stop_f1=_resolve(args, file_cfg, "early_stop_f1", None),
        max_steps=_resolve(args, file_cfg, "steps", None),
    ).validate()
    encode_seed = _resolve(args, file_cfg, "encode_seed", seed)
    window = _resolve(args, file_cfg, "window", DEFAULT_WINDOW)
    overlap = _resolve(args, file_cfg, "overlap", DEFAULT_OVERLAP)

    docs = load_corpus(_path(args.corpus))
    dev_docs = load_corpus(_path(args.dev_corpus)) if args.dev_corpus else None
    encodings = None
    if args.encodings:
        encodings = _load_encodings_dir(_path(args.encodings), docs + (dev_docs or []))
    features = prepare_features(docs, model_cfg, encode_seed, window, overlap, encodings)
    dev_features = (
        prepare_features(dev_docs, model_cfg, encode_seed, window, overlap, encodings)
        if dev_docs
        else None
    )

    t0 = time.perf_counter()
    result = train(features, model_cfg, train_cfg, dev_features)
    elapsed = time.perf_counter() - t0

    out_dir = _path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(
        ckpt_path,
        result.params,
        step=result.steps_run,
        meta={
            "encode_seed": encode_seed,
            "window": window,
            "overlap": overlap,
            "train_seed": seed,
            "diverged": result.diverged,
        },
    )
    curve_path = out_dir / "loss_curve.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for s, lr, loss in result.curve:
            fh.write(f"{s},{lr:.10g},{loss:.10g}\n")
    stats_path = out_dir / "epoch_stats.json"
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(result.epoch_stats, fh, indent=2)

    from .plots import save_loss_curve

    fig_path = out_dir / "loss_curve.png"
    if result.curve:
        save_loss_curve(result.curve, fig_path)

    _write_manifest(
        out_dir,
        "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.__dict__,
         "encode_seed": encode_seed, "window": window, "overlap": overlap},
        seed,
        {"corpus": args.corpus, "dev_corpus": args.dev_corpus or "",
         "encodings": args.encodings or ""},
        [ckpt_path, curve_path, stats_path, fig_path],
    )
    final = result.epoch_stats[-1] if result.epoch_stats else {}
    print(
        f"trained {result.steps_run} steps in {elapsed:.1f}s; "
        f"final loss {final.get('loss')}, train F1 {final.get('train_f1')}"
        + (f", dev F1 {final.get('dev_f1')}" if "dev_f1" in final else "")
    )
    if result.diverged:
        print("training diverged; checkpoint holds the last good parameters", file=sys.stderr)
        return 1
    return 0


# -- predict / eval ----------------------------------------------------------------


def _predictions_for(docs, params, encode_seed, window, overlap, encodings):
    features = prepare_features(docs, params.config, encode_seed, window, overlap, encodings)
    records = []
    triplets = set()
    degenerate = 0
    for feat in features:
        degenerate += sum(1 for pf in feat.pairs if pf.degenerate)
        for h, t, r, score in predict_scores(feat, params):
            records.append((feat.doc_id, h, t, r, score))
            triplets.add((feat.doc_id, h, t, r))
    return records, triplets, degenerate


def _load_ckpt_and_docs(args):
    params, _, meta = load_checkpoint(_path(args.checkpoint))
    docs = load_corpus(_path(args.corpus))
    encodings = None
    if args.encodings:
        encodings = _load_encodings_dir(_path(args.encodings), docs)
    encode_seed = meta.get("encode_seed", 0)
    window = meta.get("window", DEFAULT_WINDOW)
    overlap = meta.get("overlap", DEFAULT_OVERLAP)
    return params, meta, docs, encodings, encode_seed, window, overlap


def cmd_predict(args) -> int:
    params, meta, docs, encodings, encode_seed, window, overlap = _load_ckpt_and_docs(args)
    records, _, _ = _predictions_for(docs, params, encode_seed, window, overlap, encodings)
    out_dir = _path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / "predictions.tsv"
    write_predictions(pred_path, records)
    _write_manifest(
        out_dir,
        "predict",
        {"model": params.config.to_dict(), "encode_seed": encode_seed},
        meta.get("train_seed"),
        {"corpus": args.corpus, "checkpoint": args.checkpoint},
        [pred_path],
    )
    print(f"wrote {len(records)} predictions to {pred_path}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        raise ConfigError("eval needs exactly one of --checkpoint or --predictions")
    infer_mode = args.infer_eval or "all"
    train_facts = set()
    if args.train_corpus:
        train_facts = build_train_fact_keys(load_corpus(_path(args.train_corpus)))

    config_extra = {}
    inputs = {"corpus": args.corpus, "train_corpus": args.train_corpus or ""}
    if args.checkpoint:
        params, meta, docs, encodings, encode_seed, window, overlap = _load_ckpt_and_docs(args)
        records, pred, degenerate = _predictions_for(
            docs, params, encode_seed, window, overlap, encodings
        )
        seed = meta.get("train_seed")
        config_extra = {"model": params.config.to_dict(), "encode_seed": encode_seed}
        inputs["checkpoint"] = args.checkpoint
    else:
        docs = load_corpus(_path(args.corpus))
        records = read_predictions(_path(args.predictions))
        pred = {(doc_id, h, t, r) for doc_id, h, t, r, _ in records}
        degenerate = None
        seed = None
        inputs["predictions"] = args.predictions

    gold = {
        (doc.doc_id, f.head, f.tail, f.relation) for doc in docs for f in doc.gold_facts
    }
    corpus_map = {doc.doc_id: doc for doc in docs}
    report = full_report(pred, gold, corpus_map, train_facts, infer_mode)
    if degenerate is not None:
        report["counts"]["degenerate_contexts"] = degenerate

    out_dir = _path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / "predictions.tsv"
    write_predictions(pred_path, records)
    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)

    from .plots import save_metric_bars

    fig_path = out_dir / "metrics.png"
    save_metric_bars(report, fig_path)

    _write_manifest(
        out_dir,
        "eval",
        {**config_extra, "infer_eval": infer_mode},
        seed,
        inputs,
        [pred_path, metrics_path, fig_path],
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# -- gradcheck / inspect ------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    file_cfg = _load_config_file(args)
    model_cfg = None
    if any(getattr(args, k, None) is not None for k in MODEL_FLAG_KEYS) or file_cfg:
        model_cfg = ModelConfig(
            d=_resolve(args, file_cfg, "dim", 8),
            groups=_resolve(args, file_cfg, "groups", 2),
            gnn_layers=_resolve(args, file_cfg, "gnn_layers", 1),
            num_relations=_resolve(args, file_cfg, "relations", 2),
            num_entity_types=_resolve(args, file_cfg, "entity_types", 2),
            d_coref=_resolve(args, file_cfg, "coref_dim", 2),
            bilinear=_resolve(args, file_cfg, "bilinear", "vector"),
            gnn_summand=_resolve(args, file_cfg, "gnn_summand", "neighbor"),
            pooling=_resolve(args, file_cfg, "pooling", "context"),
        ).validate()
    seed = _resolve(args, file_cfg, "seed", 0)
    report = gradcheck(
        model_cfg,
        seed=seed,
        step=_resolve(args, file_cfg, "step", 1e-5),
        sample_fraction=_resolve(args, file_cfg, "sample", 1.0),
    )
    print(
        f"gradcheck: max_rel_err={report.max_rel_err:.3e} at {report.worst_param} "
        f"({report.num_checked}/{report.num_params} checked, "
        f"{report.non_finite} non-finite)"
    )
    return 0 if report.ok else 1


def cmd_inspect_graph(args) -> int:
    docs = load_corpus(_path(args.corpus))
    by_id = {doc.doc_id: doc for doc in docs}
    if args.doc_id not in by_id:
        raise CorpusError(f"document {args.doc_id!r} not in corpus")
    doc = by_id[args.doc_id]
    graph = build_graph(len(doc.entities))
    lines = []
    for i, (h, t) in enumerate(graph.nodes):
        nbrs = " ".join(f"({graph.nodes[j][0]},{graph.nodes[j][1]})" for j in graph.adjacency[i])
        lines.append(f"({h},{t}): {nbrs}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out_path = _path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text, encoding="utf-8")
        print(f"wrote adjacency of {graph.num_nodes} nodes to {out_path}")
    else:
        sys.stdout.write(text)
    return 0


# -- argument wiring -----------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, help="embedding dimension d")
    p.add_argument("--groups", type=int, help="bilinear group count k")
    p.add_argument("--gnn-layers", type=int, dest="gnn_layers", help="graph layers L")
    p.add_argument("--relations", type=int, help="relation vocabulary size R")
    p.add_argument("--entity-types", type=int, dest="entity_types")
    p.add_argument("--coref-dim", type=int, dest="coref_dim")
    p.add_argument("--bilinear", choices=["vector", "scalar"])
    p.add_argument("--gnn-summand", choices=["neighbor", "self"], dest="gnn_summand")
    p.add_argument("--pooling", choices=["context", "mean"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docrel",
        description="Document-level relation extraction pipeline (batch commands).",
        epilog="Relative paths resolve under $DOCREL_DATA_DIR when it is set.",
    )
    parser.add_argument("--version", action="version", version=f"docrel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-relation corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--num-docs", type=int, dest="num_docs")
    p.add_argument("--vocab-size", type=int, dest="vocab_size")
    p.add_argument("--relations", type=int)
    p.add_argument("--entities", type=int)
    p.add_argument("--mentions", type=int)
    p.add_argument("--fact-rate", type=float, dest="fact_rate")
    p.add_argument("--inter-prob", type=float, dest="inter_prob")
    p.add_argument("--entity-types", type=int, dest="entity_types")
    p.add_argument("--trigger-copies", type=int, dest="trigger_copies")
    p.add_argument("--chain-rate", type=float, dest="chain_rate")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse DocRED-format records into a corpus file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--relation-map", dest="relation_map")
    p.add_argument("--type-map", dest="type_map")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("encode", help="encode a corpus to binary encoding files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train on a corpus, write checkpoint and curves")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dev-corpus", dest="dev_corpus")
    p.add_argument("--encodings")
    p.add_argument("--config")
    _add_model_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=float, help="warmup fraction of total steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="hard cap on optimizer steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--early-stop-f1", type=float, dest="early_stop_f1")
    p.add_argument("--encode-seed", type=int, dest="encode_seed")
    p.add_argument("--window", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="accepted for symmetry; training is single-process")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", help="score this model's predictions")
    p.add_argument("--predictions", help="score an existing prediction dump instead")
    p.add_argument("--out", required=True)
    p.add_argument("--train-corpus", dest="train_corpus",
                   help="training corpus for the exclusion filter")
    p.add_argument("--encodings")
    p.add_argument("--infer-eval", choices=["all", "r3"], dest="infer_eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write the prediction dump for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encodings")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    p.add_argument("--config")
    _add_model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--sample", type=float, help="fraction of parameters to check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-graph", help="dump a document's pair-graph adjacency")
    p.add_argument("--corpus", required=True)
    p.add_argument("--doc-id", required=True, dest="doc_id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_graph)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
