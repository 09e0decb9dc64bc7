"""Dataset and embedding ingestion, vocabularies and tokenization."""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

OOV = "<oov>"
CHAR_LIMIT = 300


class IngestError(ValueError):
    pass


@dataclass
class Example:
    tokens: np.ndarray               # token ids
    label: int
    perturbable: np.ndarray | None = None
    text: list | None = None


@dataclass
class Dataset:
    examples: list                   # (label, token list) pairs
    level: str = "word"
    split: str = "train"

    def __len__(self):
        return len(self.examples)


def tokenize(text: str, level: str, lowercase: bool = None, limit: int | None = None) -> list:
    if level == "word":
        return text.split()
    if level == "char":
        if lowercase is None or lowercase:
            text = text.lower()
        toks = list(text)
        return toks[:limit] if limit else toks
    raise ValueError(f"unknown level {level!r}")


def load_dataset(path, level: str = "word", split: str = "train", class_count: int | None = None,
                 char_limit: int | None = CHAR_LIMIT) -> Dataset:
    """Read ``label<TAB>text`` lines.  Character-level text is lowercased and truncated."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise IngestError(f"{path}:{lineno}: expected 'label<TAB>text'")
            lab, text = line.split("\t", 1)
            try:
                label = int(lab)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
            if label < 0 or (class_count is not None and label >= class_count):
                raise IngestError(f"{path}:{lineno}: unknown label {label}")
            toks = tokenize(text, level, limit=char_limit if level == "char" else None)
            if not toks:
                raise IngestError(f"{path}:{lineno}: empty text")
            examples.append((label, toks))
    if not examples:
        raise IngestError(f"{path}: no examples")
    return Dataset(examples, level, split)


@dataclass
class EmbeddingMatrix:
    vocab: dict
    matrix: np.ndarray

    @property
    def dim(self):
        return self.matrix.shape[1]


def load_embeddings(path, expected_dim: int | None = None, dtype=np.float32) -> EmbeddingMatrix:
    """Read ``token v1 ... vd`` lines.  Row 0 is reserved for out-of-vocabulary tokens (zeros)."""
    vocab = {OOV: 0}
    rows = [None]
    dim = expected_dim
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            parts = raw.rstrip("\n").split(" ")
            if not raw.strip():
                continue
            token, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            if len(vals) != dim:
                raise IngestError(f"{path}:{lineno}: expected {dim} values, found {len(vals)}")
            try:
                vec = np.array([float(v) for v in vals], dtype=np.float64)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: malformed number") from None
            if not np.all(np.isfinite(vec)):
                raise IngestError(f"{path}:{lineno}: non-finite value")
            if token in vocab:
                log.warning("%s:%d: duplicate token %r, keeping the last", path, lineno, token)
                rows[vocab[token]] = vec
            else:
                vocab[token] = len(rows)
                rows.append(vec)
    if dim is None or len(rows) == 1:
        raise IngestError(f"{path}: no vectors")
    rows[0] = np.zeros(dim)
    return EmbeddingMatrix(vocab, np.stack(rows).astype(dtype))


def char_vocab(datasets, extra: str = "") -> dict:
    """Lowercase letters, digits, space and punctuation seen in the data; id 0 is OOV."""
    allowed = set(string.ascii_lowercase + string.digits + " " + string.punctuation)
    seen = set(c for c in extra if c in allowed)
    for ds in datasets:
        for _, toks in ds.examples:
            seen.update(t for t in toks if t in allowed)
    vocab = {OOV: 0}
    for ch in sorted(seen):
        vocab[ch] = len(vocab)
    return vocab


def encode(dataset: Dataset, vocab: dict, min_length: int = 1) -> list:
    """Map tokens to ids.  OOV tokens become id 0 and are not perturbable.

    Sequences shorter than ``min_length`` are right-padded with OOV ids.
    """
    out = []
    for label, toks in dataset.examples:
        ids = [vocab.get(t, 0) for t in toks]
        pert = [i != 0 for i in ids]
        while len(ids) < min_length:
            ids.append(0)
            pert.append(False)
        out.append(Example(np.array(ids, dtype=np.int64), label, np.array(pert), list(toks)))
    return out


# one adjacent key per letter on a US keyboard
KEYBOARD_NEIGHBOURS = {
    "q": "wa", "w": "qes", "e": "wrd", "r": "etf", "t": "ryg", "y": "tuh", "u": "yij",
    "i": "uok", "o": "ipl", "p": "ol", "a": "qsz", "s": "adw", "d": "sfe", "f": "dgr",
    "g": "fht", "h": "gjy", "j": "hku", "k": "jli", "l": "ko", "z": "xa", "x": "zcs",
    "c": "xvd", "v": "cbf", "b": "vng", "n": "bmh", "m": "nj",
}


def keyboard_table(per_char: int = 1) -> str:
    """Typo table text (substitution-table file format) using adjacent keys."""
    return "".join(f"{k}\t{' '.join(v[:per_char])}\n" for k, v in KEYBOARD_NEIGHBOURS.items())
