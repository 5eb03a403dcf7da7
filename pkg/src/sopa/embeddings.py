"""Pretrained word vectors, vocabulary, and dataset loading.

Embedding files are whitespace-separated text: one word per line followed by
its vector components.  Datasets are tab-separated: an integer label, a tab,
then the document text.  Word vectors are frozen; they never receive
gradients, and out-of-vocabulary tokens are scored through the all-zero
vector.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

OOV_ID = -1


@dataclass
class Vocabulary:
    """Bijection between words and indices 0..len-1, plus a content hash."""

    words: list[str]
    dim: int
    index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def lookup(self, word: str) -> int:
        return self.index.get(word, OOV_ID)

    def fingerprint(self) -> dict:
        h = hashlib.sha256()
        h.update(str(self.dim).encode("utf-8"))
        for w in self.words:
            h.update(b"\x00")
            h.update(w.encode("utf-8"))
        return {"sha256": h.hexdigest(), "dim": self.dim}


@dataclass
class EmbeddingMatrix:
    """Frozen |V| x dim float64 matrix of word vectors."""

    vectors: np.ndarray
    normalized: bool = False

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def doc_matrix(self, doc: "TokenizedDocument") -> np.ndarray:
        """Rows for each token; OOV tokens become zero rows."""
        out = np.zeros((len(doc.token_ids), self.dim))
        for t, idx in enumerate(doc.token_ids):
            if idx != OOV_ID:
                out[t] = self.vectors[idx]
        return out


@dataclass
class TokenizedDocument:
    token_ids: list[int]
    raw_tokens: list[str]
    label: int | None = None
    doc_id: int = -1

    def __len__(self) -> int:
        return len(self.token_ids)


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Scale each nonzero row to unit Euclidean norm; zero rows stay zero."""
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return vectors / safe


def load_embeddings(path: str, normalize: bool = True) -> tuple[Vocabulary, EmbeddingMatrix]:
    """Parse a text embedding file into a vocabulary and vector matrix.

    The first data line fixes the dimension; later lines with a different
    component count are an error.  Duplicate words keep the first vector and
    log a warning.
    """
    words: list[str] = []
    index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            word, comps = parts[0], parts[1:]
            if dim is None:
                dim = len(comps)
                if dim == 0:
                    raise ValueError(f"{path}:{lineno}: word {word!r} has no vector components")
            elif len(comps) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} components, found {len(comps)}"
                )
            if word in index:
                logger.warning("%s:%d: duplicate word %r, keeping first occurrence", path, lineno, word)
                continue
            index[word] = len(words)
            words.append(word)
            rows.append(np.array([float(c) for c in comps]))
    if not words:
        raise ValueError(f"{path}: no embedding rows found")
    matrix = np.vstack(rows)
    if normalize:
        matrix = normalize_rows(matrix)
    vocab = Vocabulary(words=words, dim=dim, index=index)
    return vocab, EmbeddingMatrix(vectors=matrix, normalized=normalize)


def tokenize_and_encode(
    text: str, vocab: Vocabulary, lowercase: bool = False,
    label: int | None = None, doc_id: int = -1,
) -> TokenizedDocument:
    """Whitespace-tokenize a document and map tokens to vocabulary ids."""
    if lowercase:
        text = text.lower()
    tokens = text.split()
    if not tokens:
        raise ValueError("empty document: no whitespace-separated tokens")
    ids = [vocab.lookup(tok) for tok in tokens]
    return TokenizedDocument(token_ids=ids, raw_tokens=tokens, label=label, doc_id=doc_id)


def read_dataset(path: str, vocab: Vocabulary, lowercase: bool = False) -> list[TokenizedDocument]:
    """Read a label<TAB>text dataset file.  Labels are non-negative ints."""
    docs: list[TokenizedDocument] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>text")
            raw_label, text = line.split("\t", 1)
            try:
                label = int(raw_label)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {raw_label!r} is not an integer") from None
            if label < 0:
                raise ValueError(f"{path}:{lineno}: label must be non-negative, got {label}")
            try:
                doc = tokenize_and_encode(text, vocab, lowercase=lowercase, label=label, doc_id=len(docs))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            docs.append(doc)
    if not docs:
        raise ValueError(f"{path}: dataset file contains no documents")
    return docs
