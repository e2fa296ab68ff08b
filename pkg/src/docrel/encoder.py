"""Deterministic mock encoder and the on-disk encoding format.

``mock_encode`` runs one pass of scaled-dot self-attention with a residual
connection over hash-derived token embeddings. Scores combine three terms:

    score[i, j] = content_scale * <e_i, e_j> / sqrt(d)
                  - locality * |i - j|
                  - self_damping * [i == j]

The distance-decay term localizes each token's attention to its neighborhood
and the self-damping term stops the identical-token self match from saturating
the softmax; both are needed so that tokens sharing a reserved id (markers)
still produce position-distinguishable attention rows. A is the row-stochastic
attention matrix of that pass and H = E + A @ E, so every H row has Euclidean
norm at most twice the largest base-embedding norm.

Encoding file layout (all little-endian, offsets in bytes):

    0     magic ``b"DRELENC1"``
    8     uint32 n, uint32 d, uint32 num_mentions
    20    float64 H, row-major, n*d values
    20+8nd        float64 A, row-major, n*n values
    20+8nd+8nn    mention table: num_mentions records of
                  (uint32 entity_id, uint32 mention_index, uint32 row)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .corpus import MarkedDocument

MAGIC = b"DRELENC1"

DEFAULT_WINDOW = 512
DEFAULT_OVERLAP = 128

CONTENT_SCALE = 0.15
LOCALITY = 2.0
SELF_DAMPING = 6.0


class EncodingError(ValueError):
    """Bad encoder configuration or a malformed/mismatched encoding file."""


@dataclass
class EncodedDocument:
    H: np.ndarray
    A: np.ndarray
    mention_starts: dict[tuple[int, int], int]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    def validate(self, tol: float = 1e-9) -> "EncodedDocument":
        n = self.H.shape[0]
        if self.A.shape != (n, n):
            raise EncodingError(f"A has shape {self.A.shape}, expected ({n}, {n})")
        sums = self.A.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > tol)[0]
        if bad.size:
            raise EncodingError(f"A row {bad[0]} sums to {sums[bad[0]]!r}")
        if np.any(self.A < 0):
            raise EncodingError("A has negative entries")
        for key, row in self.mention_starts.items():
            if not (0 <= row < n):
                raise EncodingError(f"mention {key} start row {row} out of range [0,{n})")
        return self


def _token_embedding(tok: int, d: int, seed: int) -> np.ndarray:
    sign = 1 if tok < 0 else 0
    rng = np.random.default_rng([seed, sign, abs(tok)])
    return rng.standard_normal(d)


def _embed_tokens(tokens, d: int, seed: int) -> np.ndarray:
    cache: dict[int, np.ndarray] = {}
    E = np.empty((len(tokens), d))
    for i, tok in enumerate(tokens):
        e = cache.get(tok)
        if e is None:
            e = _token_embedding(tok, d, seed)
            cache[tok] = e
        E[i] = e
    return E


def _attention_pass(
    G: np.ndarray,
    content_scale: float,
    locality: float,
    self_damping: float,
) -> tuple[np.ndarray, np.ndarray]:
    n, d = G.shape
    scores = content_scale * (G @ G.T) / np.sqrt(d)
    idx = np.arange(n)
    scores -= locality * np.abs(idx[:, None] - idx[None, :])
    scores[idx, idx] -= self_damping
    scores -= scores.max(axis=1, keepdims=True)
    A = np.exp(scores)
    A /= A.sum(axis=1, keepdims=True)
    # The value/residual path uses unit-expected-norm embeddings so H rows are
    # O(1) and downstream tanh layers start in their linear regime.
    E = G / np.sqrt(d)
    H = E + A @ E
    return H, A


def mock_encode(
    marked: MarkedDocument,
    d: int,
    seed: int,
    *,
    content_scale: float = CONTENT_SCALE,
    locality: float = LOCALITY,
    self_damping: float = SELF_DAMPING,
) -> EncodedDocument:
    """Encode a whole marked document in one attention pass.

    Deterministic given (tokens, d, seed); identical inputs yield identical
    (H, A) bit for bit.
    """
    E = _embed_tokens(marked.tokens, d, seed)
    H, A = _attention_pass(E, content_scale, locality, self_damping)
    return EncodedDocument(H, A, dict(marked.mention_starts)).validate()


def window_plan(n: int, width: int, overlap: int) -> list[tuple[int, int]]:
    """Half-open windows of at most ``width`` tokens covering [0, n);
    consecutive windows overlap by exactly ``overlap`` (the last may be
    narrower)."""
    if width <= overlap or overlap < 0:
        raise EncodingError(f"need width > overlap >= 0, got width={width} overlap={overlap}")
    if n <= width:
        return [(0, n)]
    windows = []
    s = 0
    while s + width < n:
        windows.append((s, s + width))
        s += width - overlap
    windows.append((s, n))
    return windows


def encode_windows(
    marked: MarkedDocument,
    width: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
    d: int = 32,
    seed: int = 0,
    *,
    content_scale: float = CONTENT_SCALE,
    locality: float = LOCALITY,
    self_damping: float = SELF_DAMPING,
) -> EncodedDocument:
    """Encode long documents window by window and merge.

    H rows covered by several windows are averaged; A is assembled blockwise
    (each window's rows mapped to global columns, zero outside the window),
    averaged on overlaps and renormalized to row-stochastic. With a single
    window this is exactly ``mock_encode``.
    """
    plan = window_plan(len(marked.tokens), width, overlap)
    if len(plan) == 1:
        return mock_encode(
            marked,
            d,
            seed,
            content_scale=content_scale,
            locality=locality,
            self_damping=self_damping,
        )
    n = len(marked.tokens)
    H = np.zeros((n, d))
    A = np.zeros((n, n))
    counts = np.zeros(n)
    for s, e in plan:
        E = _embed_tokens(marked.tokens[s:e], d, seed)
        Hw, Aw = _attention_pass(E, content_scale, locality, self_damping)
        H[s:e] += Hw
        A[s:e, s:e] += Aw
        counts[s:e] += 1
    H /= counts[:, None]
    A /= counts[:, None]
    A /= A.sum(axis=1, keepdims=True)
    return EncodedDocument(H, A, dict(marked.mention_starts)).validate()


# -- file io -----------------------------------------------------------------


def save_encoding(path, enc: EncodedDocument) -> None:
    enc.validate()
    n, d = enc.H.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", n, d, len(enc.mention_starts)))
        fh.write(np.ascontiguousarray(enc.H, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(enc.A, dtype="<f8").tobytes())
        for (ent, m_idx), row in sorted(enc.mention_starts.items()):
            fh.write(struct.pack("<III", ent, m_idx, row))


def load_encoding(path, expected: MarkedDocument | None = None) -> EncodedDocument:
    """Read an encoding file, validating invariants.

    A rows within 1e-6 of stochastic are renormalized; anything worse is a
    load error. When ``expected`` is given, the token count and mention table
    must match the marked document.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise EncodingError(f"{path}: bad magic {blob[:8]!r}")
    n, d, num_mentions = struct.unpack_from("<III", blob, 8)
    off = 20
    need = off + 8 * n * d + 8 * n * n + 12 * num_mentions
    if len(blob) != need:
        raise EncodingError(f"{path}: size {len(blob)} != expected {need}")
    H = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    off += 8 * n * d
    A = np.frombuffer(blob, dtype="<f8", count=n * n, offset=off).reshape(n, n).copy()
    off += 8 * n * n
    mention_starts: dict[tuple[int, int], int] = {}
    for _ in range(num_mentions):
        ent, m_idx, row = struct.unpack_from("<III", blob, off)
        off += 12
        mention_starts[(ent, m_idx)] = row

    sums = A.sum(axis=1)
    err = np.abs(sums - 1.0)
    bad = np.where(err > 1e-6)[0]
    if bad.size:
        raise EncodingError(f"{path}: A row {bad[0]} sums to {sums[bad[0]]!r}")
    # Rows already inside the strict tolerance are left untouched so that a
    # save/load cycle is bit-exact; only rows that need it are renormalized.
    fix = err > 1e-9
    if fix.any():
        A[fix] /= sums[fix, None]

    if expected is not None:
        if n != len(expected.tokens):
            raise EncodingError(
                f"{path}: encoding has {n} tokens but document has {len(expected.tokens)}"
            )
        if mention_starts != expected.mention_starts:
            raise EncodingError(f"{path}: mention table does not match document")
    return EncodedDocument(H, A, mention_starts).validate(tol=1e-9)
