"""Command-line behavior: file outputs, manifests, determinism, exit codes."""

import json
from pathlib import Path

import pytest

from docrel.cli import main
from docrel.corpus import load_corpus, insert_markers
from docrel.encoder import load_encoding
from docrel.classifier import read_predictions
from docrel.pairgraph import build_graph

DATA = Path(__file__).parent / "data"


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "corpus"
    assert run(["synth", "--out", out, "--num-docs", 6, "--seed", 3]) == 0
    return out


class TestSynth:
    def test_outputs_and_manifest(self, synth_dir):
        docs = load_corpus(synth_dir / "corpus.jsonl")
        assert len(docs) == 6
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3
        assert manifest["artifact_version"]
        assert "wall_clock" in manifest

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["synth", "--out", a, "--num-docs", 4, "--seed", 11])
        run(["synth", "--out", b, "--num-docs", 4, "--seed", 11])
        assert (a / "corpus.jsonl").read_bytes() == (b / "corpus.jsonl").read_bytes()

    def test_bad_config_exits_nonzero_without_outputs(self, tmp_path):
        out = tmp_path / "bad"
        assert run(["synth", "--out", out, "--num-docs", 2, "--entities", 1]) == 2
        assert not out.exists()

    def test_config_file_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"num_docs": 3, "seed": 5}))
        out = tmp_path / "out"
        # flag overrides config file; config file overrides default
        assert run(["synth", "--out", out, "--config", cfg, "--num-docs", 2]) == 0
        docs = load_corpus(out / "corpus.jsonl")
        assert len(docs) == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 5


class TestIngest:
    def make_input(self, tmp_path):
        records = [
            {
                "title": "t1",
                "sents": [["a", "b", "c"], ["d", "e"]],
                "vertexSet": [
                    [{"sent_id": 0, "pos": [0, 1], "type": "PER"}],
                    [{"sent_id": 1, "pos": [0, 1], "type": "LOC"}],
                ],
                "labels": [{"h": 0, "t": 1, "r": "P1"}],
            }
        ]
        path = tmp_path / "docred.json"
        path.write_text(json.dumps(records))
        rel = tmp_path / "rel2id.json"
        rel.write_text(json.dumps({"P1": 0}))
        return path, rel

    def test_ingest_round_trip(self, tmp_path):
        path, rel = self.make_input(tmp_path)
        out = tmp_path / "out"
        assert run(["ingest", "--input", path, "--out", out, "--relation-map", rel]) == 0
        docs = load_corpus(out / "corpus.jsonl")
        assert len(docs) == 1
        assert len(docs[0].gold_facts) == 1

    def test_bad_span_exits_nonzero(self, tmp_path):
        path, rel = self.make_input(tmp_path)
        records = json.loads(path.read_text())
        records[0]["vertexSet"][0][0]["pos"] = [0, 99]
        path.write_text(json.dumps(records))
        out = tmp_path / "out"
        assert run(["ingest", "--input", path, "--out", out, "--relation-map", rel]) == 2
        assert not out.exists()


class TestEncode:
    def test_encode_files_and_index(self, synth_dir, tmp_path):
        out = tmp_path / "enc"
        assert run([
            "encode", "--corpus", synth_dir / "corpus.jsonl", "--out", out,
            "--dim", 8, "--seed", 2,
        ]) == 0
        index = json.loads((out / "index.json").read_text())
        docs = load_corpus(synth_dir / "corpus.jsonl")
        assert set(index) == {d.doc_id for d in docs}
        enc = load_encoding(out / index[docs[0].doc_id], insert_markers(docs[0]))
        assert enc.d == 8

    def test_jobs_flag_gives_identical_bytes(self, synth_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        base = ["--corpus", synth_dir / "corpus.jsonl", "--dim", 8, "--seed", 2]
        assert run(["encode", *base, "--out", a, "--jobs", 1]) == 0
        assert run(["encode", *base, "--out", b, "--jobs", 2]) == 0
        for name in json.loads((a / "index.json").read_text()).values():
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestGradcheckCommand:
    def test_default_exits_zero(self, capsys):
        assert run(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_err" in out


class TestTrainEvalPredict:
    @pytest.fixture()
    def trained(self, tmp_path):
        corpus = tmp_path / "corpus"
        dev = tmp_path / "dev"
        run(["synth", "--out", corpus, "--num-docs", 8, "--seed", 3])
        run(["synth", "--out", dev, "--num-docs", 4, "--seed", 4])
        out = tmp_path / "run"
        code = run([
            "train", "--corpus", corpus / "corpus.jsonl", "--dev-corpus", dev / "corpus.jsonl",
            "--out", out, "--dim", 8, "--groups", 2, "--gnn-layers", 1,
            "--lr", 1e-3, "--epochs", 3, "--batch-size", 4, "--seed", 1,
            "--eval-every", 2,
        ])
        assert code == 0
        return corpus, dev, out

    def test_train_outputs(self, trained):
        corpus, dev, out = trained
        assert (out / "checkpoint.ckpt").exists()
        curve = (out / "loss_curve.csv").read_text().splitlines()
        assert curve[0] == "step,lr,loss"
        assert len(curve) > 1
        assert (out / "loss_curve.png").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"

    def test_eval_outputs(self, trained, tmp_path):
        corpus, dev, out = trained
        ev = tmp_path / "eval"
        code = run([
            "eval", "--corpus", dev / "corpus.jsonl", "--checkpoint", out / "checkpoint.ckpt",
            "--out", ev, "--train-corpus", corpus / "corpus.jsonl",
        ])
        assert code == 0
        metrics = json.loads((ev / "metrics.json").read_text())
        for key in ("f1", "ign_f1", "intra_f1", "inter_f1", "infer_f1", "counts"):
            assert key in metrics
        assert (ev / "metrics.png").exists()
        read_predictions(ev / "predictions.tsv")

    def test_predict_outputs(self, trained, tmp_path):
        corpus, dev, out = trained
        pr = tmp_path / "pred"
        assert run([
            "predict", "--corpus", dev / "corpus.jsonl",
            "--checkpoint", out / "checkpoint.ckpt", "--out", pr,
        ]) == 0
        read_predictions(pr / "predictions.tsv")

    def test_eval_from_prediction_dump_matches_checkpoint_eval(self, trained, tmp_path):
        corpus, dev, out = trained
        ev1 = tmp_path / "ev_ckpt"
        run(["eval", "--corpus", dev / "corpus.jsonl",
             "--checkpoint", out / "checkpoint.ckpt", "--out", ev1])
        ev2 = tmp_path / "ev_dump"
        assert run(["eval", "--corpus", dev / "corpus.jsonl",
                    "--predictions", ev1 / "predictions.tsv", "--out", ev2]) == 0
        a = json.loads((ev1 / "metrics.json").read_text())
        b = json.loads((ev2 / "metrics.json").read_text())
        assert a["f1"] == b["f1"] and a["ign_f1"] == b["ign_f1"]

    def test_eval_requires_exactly_one_source(self, trained, tmp_path):
        corpus, dev, out = trained
        assert run(["eval", "--corpus", dev / "corpus.jsonl",
                    "--out", tmp_path / "evx"]) == 2

    def test_eval_with_mismatched_model_errors(self, trained, tmp_path, capsys):
        corpus, dev, out = trained
        # corpus with relation ids beyond the checkpoint's range
        wide = tmp_path / "wide"
        run(["synth", "--out", wide, "--num-docs", 2, "--seed", 5, "--relations", 9,
             "--vocab-size", 64])
        code = run([
            "eval", "--corpus", wide / "corpus.jsonl",
            "--checkpoint", out / "checkpoint.ckpt", "--out", tmp_path / "ev2",
        ])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_eval_with_mismatched_encoding_dim_errors(self, trained, tmp_path, capsys):
        corpus, dev, out = trained
        enc = tmp_path / "enc16"
        run(["encode", "--corpus", dev / "corpus.jsonl", "--out", enc, "--dim", 16])
        code = run([
            "eval", "--corpus", dev / "corpus.jsonl",
            "--checkpoint", out / "checkpoint.ckpt", "--out", tmp_path / "ev3",
            "--encodings", enc,
        ])
        assert code == 2
        assert "dimension" in capsys.readouterr().err

    def test_missing_file_exits_nonzero(self, tmp_path, capsys):
        assert run(["train", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "o"]) == 2


class TestInspectGraph:
    def test_adjacency_dump_matches_build_graph(self, synth_dir, capsys):
        docs = load_corpus(synth_dir / "corpus.jsonl")
        assert run(["inspect-graph", "--corpus", synth_dir / "corpus.jsonl",
                    "--doc-id", docs[0].doc_id]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        g = build_graph(len(docs[0].entities))
        assert len(out) == g.num_nodes
        first = out[0].split(":")
        assert first[0] == f"({g.nodes[0][0]},{g.nodes[0][1]})"
        assert len(first[1].split()) == len(g.adjacency[0])

    def test_unknown_doc_id_errors(self, synth_dir):
        assert run(["inspect-graph", "--corpus", synth_dir / "corpus.jsonl",
                    "--doc-id", "ghost"]) == 2


class TestGoldenPipeline:
    def test_seed7_reproduces_committed_metrics(self, tmp_path):
        """Full synth -> train -> eval round trip against the frozen report."""
        corpus = tmp_path / "corpus"
        dev = tmp_path / "dev"
        run(["synth", "--out", corpus, "--num-docs", 32, "--seed", 7, "--entities", 4,
             "--fact-rate", 0.25, "--chain-rate", 1.0])
        run(["synth", "--out", dev, "--num-docs", 12, "--seed", 8, "--entities", 4,
             "--fact-rate", 0.25, "--chain-rate", 1.0])
        out = tmp_path / "run"
        assert run([
            "train", "--corpus", corpus / "corpus.jsonl",
            "--dev-corpus", dev / "corpus.jsonl", "--out", out,
            "--dim", 24, "--groups", 4, "--gnn-layers", 1, "--lr", 1e-2,
            "--epochs", 60, "--batch-size", 8, "--seed", 7, "--eval-every", 20,
        ]) == 0
        ev = tmp_path / "eval"
        assert run([
            "eval", "--corpus", dev / "corpus.jsonl",
            "--checkpoint", out / "checkpoint.ckpt", "--out", ev,
            "--train-corpus", corpus / "corpus.jsonl",
        ]) == 0
        got = json.loads((ev / "metrics.json").read_text())
        expected = json.loads((DATA / "golden_metrics.json").read_text())
        assert got == expected
