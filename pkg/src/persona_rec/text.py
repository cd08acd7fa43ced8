"""Token-level text handling: tokenizer, vocabulary, and embedding backends.

The per-token embedding producer is pluggable: a trainable lookup table
(default, participates in backprop) or a frozen table imported from a
vector file (never updated). Both produce [n_w x d_w] matrices so swapping
backends changes no downstream shapes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, embedding_rows
from .errors import FormatError, VocabularyError

PAD_ID = 0
UNK_ID = 1

_SPLIT = re.compile(r"[^a-z0-9]+")


def tokenize(text: str) -> list:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [t for t in _SPLIT.split(text.lower()) if t]


class Vocabulary:
    """Token to contiguous-id map with reserved PAD=0 and UNK=1."""

    def __init__(self):
        self._token_to_id = {}
        self._id_to_token = {}

    def __len__(self):
        return 2 + len(self._token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def add(self, token: str) -> int:
        tid = self._token_to_id.get(token)
        if tid is None:
            tid = 2 + len(self._token_to_id)
            self._token_to_id[token] = tid
            self._id_to_token[tid] = token
        return tid

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, tid: int) -> str:
        if tid == PAD_ID:
            return "<pad>"
        if tid == UNK_ID:
            return "<unk>"
        try:
            return self._id_to_token[tid]
        except KeyError:
            raise VocabularyError(f"no token with id {tid} (vocabulary size {len(self)})")

    def tokens(self):
        """Non-reserved tokens in id order."""
        return [self._id_to_token[i] for i in range(2, len(self))]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens():
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                tok = line.rstrip("\n")
                if tok:
                    vocab.add(tok)
        return vocab


@dataclass
class TokenSequence:
    """Fixed-length id sequence with a validity mask (false = PAD)."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape or self.ids.ndim != 1:
            raise VocabularyError(
                f"ids {self.ids.shape} and mask {self.mask.shape} must be equal-length vectors"
            )

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


def make_sequence(tokens, vocab: Vocabulary, n_w: int) -> TokenSequence:
    """Map tokens to ids, truncating to n_w and padding the tail with PAD."""
    ids = [vocab.id_of(t) for t in tokens[:n_w]]
    k = len(ids)
    ids = ids + [PAD_ID] * (n_w - k)
    mask = [True] * k + [False] * (n_w - k)
    return TokenSequence(np.array(ids, dtype=np.int64), np.array(mask, dtype=bool))


class TrainableTextBackend:
    """Embedding lookup table updated by backprop; init uniform [-0.1, 0.1]."""

    trainable = True

    def __init__(self, vocab_size: int, d_w: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.d_w = d_w
        self.table = Tensor(
            rng.uniform(-0.1, 0.1, size=(vocab_size, d_w)).astype(dtype),
            requires_grad=True,
        )

    def parameters(self) -> dict:
        return {"text.table": self.table}


class FrozenVectorBackend:
    """Fixed embedding table; lookups never produce gradients."""

    trainable = False

    def __init__(self, table: np.ndarray):
        self.d_w = table.shape[1]
        self.table = Tensor(table, requires_grad=False, dtype=table.dtype)

    def parameters(self) -> dict:
        return {}


def encode_tokens(seq: TokenSequence, backend) -> Tensor:
    """Embed a token sequence as an [n_w x d_w] matrix; PAD rows are zero."""
    return embedding_rows(backend.table, seq.ids, seq.mask)


def import_frozen_vectors(path, vocab: Vocabulary, d_w: int) -> FrozenVectorBackend:
    """Build a frozen backend from a vector file.

    Format: first line "count dim"; then count lines "token v_1 ... v_dim".
    Tokens absent from the file fall back to the UNK vector, which is the
    file's "<unk>" entry if present and zero otherwise. A zero-byte file is
    the degenerate valid case: everything maps to UNK.
    """
    with open(path, encoding="utf-8") as f:
        content = f.read()
    vectors = {}
    dim = d_w
    if content.strip():
        lines = content.splitlines()
        head = lines[0].split()
        if len(head) != 2:
            raise FormatError(f"vector file header must be 'count dim', got {lines[0]!r}")
        try:
            count, dim = int(head[0]), int(head[1])
        except ValueError:
            raise FormatError(f"vector file header must be two integers, got {lines[0]!r}")
        if dim != d_w:
            raise FormatError(f"vector file dimension {dim} does not match configured d_w {d_w}")
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != count:
            raise FormatError(f"vector file declares {count} entries but has {len(body)}")
        for ln in body:
            parts = ln.split()
            if len(parts) != 1 + dim:
                raise FormatError(
                    f"vector line for {parts[0] if parts else '?'!r} has {len(parts) - 1} "
                    f"values, expected {dim}"
                )
            try:
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float32)
            except ValueError:
                raise FormatError(f"non-numeric value in vector line for {parts[0]!r}")
    unk_vec = vectors.get("<unk>", np.zeros(d_w, dtype=np.float32))
    table = np.tile(unk_vec, (len(vocab), 1))
    table[PAD_ID] = 0.0
    for token, vec in vectors.items():
        if token in vocab:
            table[vocab.id_of(token)] = vec
    return FrozenVectorBackend(table)
