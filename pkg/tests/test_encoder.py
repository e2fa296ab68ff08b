"""Mock encoder invariants, window merging, and the encoding file format."""

import numpy as np
import pytest

from docrel.corpus import Document, Entity, Mention, SynthConfig, insert_markers, synth_corpus
from docrel.encoder import (
    EncodedDocument,
    EncodingError,
    _embed_tokens,
    encode_windows,
    load_encoding,
    mock_encode,
    save_encoding,
    window_plan,
)


def tiny_marked(n_tokens=12, seed=0):
    doc = synth_corpus(SynthConfig(num_docs=1, seed=seed))[0]
    return insert_markers(doc)


class TestMockEncode:
    def test_deterministic_bit_for_bit(self):
        marked = tiny_marked()
        a = mock_encode(marked, 16, 3)
        b = mock_encode(marked, 16, 3)
        assert np.array_equal(a.H, b.H) and np.array_equal(a.A, b.A)

    def test_single_token_document(self):
        ents = (Entity(0, 0, (Mention(0, 0, 1, 0),)),)
        doc = Document("one", ((5,),), ents, frozenset()).validate()
        marked = insert_markers(doc)
        enc = mock_encode(marked, 8, 0)
        assert enc.n == 3  # start marker, token, end marker
        # degenerate single-token case without markers
        sub = Document("bare", ((5,),), (Entity(0, 0, (Mention(0, 0, 1, 0),)),), frozenset())
        enc1 = mock_encode(insert_markers(sub), 8, 0)
        assert enc1.A.shape == (3, 3)

    def test_rows_stochastic(self):
        for seed in range(4):
            enc = mock_encode(tiny_marked(seed=seed), 16, seed)
            np.testing.assert_allclose(enc.A.sum(axis=1), 1.0, atol=1e-9)
            assert (enc.A >= 0).all()

    def test_single_row_softmax_is_one(self):
        # direct single-element attention: one-token window
        marked = tiny_marked()
        one = mock_encode(marked, 4, 0)
        assert abs(one.A[0].sum() - 1.0) < 1e-12

    def test_h_norm_bound(self):
        marked = tiny_marked(seed=2)
        enc = mock_encode(marked, 16, 5)
        base = _embed_tokens(marked.tokens, 16, 5) / np.sqrt(16)
        max_base = np.linalg.norm(base, axis=1).max()
        assert (np.linalg.norm(enc.H, axis=1) <= 2 * max_base + 1e-12).all()

    def test_mention_starts_carried_over(self):
        marked = tiny_marked(seed=3)
        enc = mock_encode(marked, 8, 1)
        assert enc.mention_starts == marked.mention_starts


class TestWindowPlan:
    def test_single_window_when_short(self):
        assert window_plan(10, 16, 4) == [(0, 10)]

    def test_coverage_and_overlap(self):
        for n, w, o in [(100, 16, 4), (57, 16, 8), (200, 32, 0), (33, 32, 8)]:
            plan = window_plan(n, w, o)
            covered = set()
            for s, e in plan:
                assert e - s <= w
                covered.update(range(s, e))
            assert covered == set(range(n))
            for (s1, e1), (s2, e2) in zip(plan, plan[1:]):
                assert e1 - s2 == o

    def test_width_not_above_overlap_rejected(self):
        with pytest.raises(EncodingError):
            window_plan(100, 8, 8)
        with pytest.raises(EncodingError):
            window_plan(100, 8, 9)


class TestEncodeWindows:
    def test_single_window_equals_mock_encode(self):
        marked = tiny_marked(seed=1)
        whole = mock_encode(marked, 16, 2)
        windowed = encode_windows(marked, width=512, overlap=128, d=16, seed=2)
        assert np.array_equal(whole.H, windowed.H)
        assert np.array_equal(whole.A, windowed.A)

    def test_two_window_overlap_rows_are_means(self):
        marked = tiny_marked(seed=4)
        n = len(marked.tokens)
        o = 6 + (n % 2)  # make n + o even so n = 2w - o exactly
        w = (n + o) // 2  # exactly two windows: [0, w), [w - o, n)
        enc = encode_windows(marked, width=w, overlap=o, d=8, seed=0)
        plan = window_plan(n, w, o)
        assert len(plan) == 2
        # independent recompute of both windows, averaged by hand
        from docrel.encoder import _attention_pass, CONTENT_SCALE, LOCALITY, SELF_DAMPING

        blocks = []
        for s, e in plan:
            G = _embed_tokens(marked.tokens[s:e], 8, 0)
            blocks.append((s, e) + _attention_pass(G, CONTENT_SCALE, LOCALITY, SELF_DAMPING))
        (s1, e1, H1, A1), (s2, e2, H2, A2) = blocks
        for i in range(s2, e1):  # overlapped token rows
            expected = (H1[i - s1] + H2[i - s2]) / 2
            np.testing.assert_allclose(enc.H[i], expected, atol=1e-12)
        np.testing.assert_allclose(enc.A.sum(axis=1), 1.0, atol=1e-9)

    def test_invariants_on_multiwindow(self):
        marked = tiny_marked(seed=5)
        enc = encode_windows(marked, width=16, overlap=4, d=8, seed=1)
        enc.validate()


class TestEncodingFile:
    def test_round_trip_exact(self, tmp_path):
        marked = tiny_marked(seed=6)
        enc = mock_encode(marked, 8, 3)
        path = tmp_path / "doc.enc"
        save_encoding(path, enc)
        loaded = load_encoding(path, expected=marked)
        assert np.array_equal(loaded.H, enc.H)
        assert np.array_equal(loaded.A, enc.A)
        assert loaded.mention_starts == enc.mention_starts
        # second save is byte-identical
        path2 = tmp_path / "doc2.enc"
        save_encoding(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_row_sum_rejected(self, tmp_path):
        marked = tiny_marked(seed=6)
        enc = mock_encode(marked, 8, 3)
        enc.A[0] *= 0.5
        path = tmp_path / "bad.enc"
        # bypass save-side validation by writing raw
        bad = EncodedDocument(enc.H, enc.A, enc.mention_starts)
        with pytest.raises(EncodingError):
            save_encoding(path, bad)
        # craft the file manually
        good = mock_encode(marked, 8, 3)
        save_encoding(path, good)
        blob = bytearray(path.read_bytes())
        n, d = good.A.shape[0], good.H.shape[1]
        import struct

        off = 20 + 8 * n * d  # first A row
        row = np.frombuffer(bytes(blob[off : off + 8 * n]), dtype="<f8") * 0.5
        blob[off : off + 8 * n] = row.astype("<f8").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(EncodingError, match="row 0 sums"):
            load_encoding(path)

    def test_small_row_error_renormalized(self, tmp_path):
        marked = tiny_marked(seed=6)
        enc = mock_encode(marked, 8, 3)
        enc.A[0] *= 1.0 + 5e-7  # inside load tolerance, outside strict tolerance
        path = tmp_path / "near.enc"
        n, d = enc.A.shape[0], enc.H.shape[1]
        import struct

        with open(path, "wb") as fh:
            fh.write(b"DRELENC1")
            fh.write(struct.pack("<III", n, d, len(enc.mention_starts)))
            fh.write(enc.H.astype("<f8").tobytes())
            fh.write(enc.A.astype("<f8").tobytes())
            for (ent, m_idx), row in sorted(enc.mention_starts.items()):
                fh.write(struct.pack("<III", ent, m_idx, row))
        loaded = load_encoding(path)
        np.testing.assert_allclose(loaded.A.sum(axis=1), 1.0, atol=1e-9)

    def test_token_count_mismatch_names_both_lengths(self, tmp_path):
        marked = tiny_marked(seed=7)
        other = tiny_marked(seed=8)
        assert len(marked.tokens) != len(other.tokens)
        enc = mock_encode(marked, 8, 0)
        path = tmp_path / "doc.enc"
        save_encoding(path, enc)
        with pytest.raises(EncodingError, match=f"{len(marked.tokens)}.*{len(other.tokens)}"):
            load_encoding(path, expected=other)

    def test_mention_table_mismatch_rejected(self, tmp_path):
        marked = tiny_marked(seed=7)
        enc = mock_encode(marked, 8, 0)
        moved = dict(enc.mention_starts)
        key = next(iter(moved))
        moved[key] = (moved[key] + 1) % enc.n
        path = tmp_path / "doc.enc"
        save_encoding(path, EncodedDocument(enc.H, enc.A, moved))
        with pytest.raises(EncodingError, match="mention table"):
            load_encoding(path, expected=marked)

    def test_truncated_file_rejected(self, tmp_path):
        marked = tiny_marked(seed=7)
        enc = mock_encode(marked, 8, 0)
        path = tmp_path / "doc.enc"
        save_encoding(path, enc)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(EncodingError, match="size"):
            load_encoding(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.enc"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(EncodingError, match="magic"):
            load_encoding(path)
