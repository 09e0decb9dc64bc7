"""A small separable character corpus for desk-scale experiments.

Each sentence is a string of letters; label 0 sentences draw most letters
from ``group_a``, label 1 from ``group_b``.  The typo table gives every
letter one replacement drawn from letters that never occur in the text,
so a model trained only on clean text leaves those embeddings untrained.
"""

from __future__ import annotations

import string

import numpy as np

from .data import OOV, Example
from .perturb import SubstitutionTable


def char_vocab() -> dict:
    vocab = {OOV: 0, " ": 1}
    for c in string.ascii_lowercase:
        vocab[c] = len(vocab)
    return vocab


def typo_table(group_a: str = "abcde", group_b: str = "fghij") -> SubstitutionTable:
    """One replacement per text letter, cycling through the unused letters."""
    used = group_a + group_b
    spare = [c for c in string.ascii_lowercase if c not in used]
    return SubstitutionTable({c: (spare[i % len(spare)],) for i, c in enumerate(used)})


def sentences(n: int, length: int, rng: np.random.Generator, majority: float = 0.7,
              group_a: str = "abcde", group_b: str = "fghij"):
    """``n`` ``(label, text)`` pairs."""
    out = []
    for _ in range(n):
        y = int(rng.integers(2))
        major, minor = (group_a, group_b) if y == 0 else (group_b, group_a)
        chars = []
        for _ in range(length):
            g = major if rng.random() < majority else minor
            chars.append(g[rng.integers(len(g))])
        out.append((y, "".join(chars)))
    return out


def encode_texts(pairs, vocab) -> list:
    return [Example(np.array([vocab[c] for c in text], dtype=np.int64), y, None, list(text))
            for y, text in pairs]


def corpus(n_train=1000, n_valid=200, n_test=200, length=16, seed=0, majority=0.7):
    """Return ``(vocab, id_table, train, valid, test)``."""
    rng = np.random.default_rng(seed)
    vocab = char_vocab()
    table = typo_table().to_ids(vocab)
    splits = [encode_texts(sentences(n, length, rng, majority), vocab)
              for n in (n_train, n_valid, n_test)]
    return (vocab, table, *splits)
