"""Symbol-substitution perturbation spaces.

A sentence is a sequence of token ids.  A substitution table gives, per
token, the ids it may be replaced with.  The perturbation space of budget
``delta`` holds every sentence reachable by substituting at most ``delta``
distinct positions.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

log = logging.getLogger(__name__)


class TableFormatError(ValueError):
    pass


class SubstitutionTable(dict):
    """Mapping ``token -> tuple of replacement tokens`` (strings or ids)."""

    @classmethod
    def parse(cls, lines, source="<table>") -> "SubstitutionTable":
        table = cls()
        for lineno, raw in enumerate(lines, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise TableFormatError(f"{source}:{lineno}: expected 'token<TAB>replacements'")
            token, rest = line.split("\t", 1)
            if token == "":
                raise TableFormatError(f"{source}:{lineno}: empty token")
            reps = []
            for r in rest.split(" "):
                if r and r != token and r not in reps:
                    reps.append(r)
            if reps:
                table[token] = tuple(reps)
        return table

    @classmethod
    def load(cls, path) -> "SubstitutionTable":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f, source=str(path))

    def dump(self) -> str:
        return "".join(f"{k}\t{' '.join(v)}\n" for k, v in self.items())

    def to_ids(self, vocab: dict) -> "SubstitutionTable":
        """Translate to id space; replacements missing from ``vocab`` are dropped."""
        out = SubstitutionTable()
        dropped = 0
        for token, reps in self.items():
            if token not in vocab:
                continue
            ids = []
            for r in reps:
                if r in vocab:
                    ids.append(vocab[r])
                else:
                    dropped += 1
            if ids:
                out[vocab[token]] = tuple(ids)
        if dropped:
            log.warning("dropped %d substitution replacements missing from the vocabulary", dropped)
        return out


class ElementaryPerturbation(NamedTuple):
    position: int
    replacement: int


@dataclass(frozen=True)
class PerturbationSet:
    tokens: np.ndarray                   # original ids, shape (L,)
    options: tuple                       # per-position tuple of replacement ids
    delta: int

    @property
    def elems(self) -> list[ElementaryPerturbation]:
        return [ElementaryPerturbation(i, r) for i, opts in enumerate(self.options) for r in opts]

    @property
    def M(self) -> int:
        return sum(len(o) for o in self.options)

    @property
    def perturbable(self) -> list[int]:
        return [i for i, o in enumerate(self.options) if o]

    def with_delta(self, delta: int) -> "PerturbationSet":
        return PerturbationSet(self.tokens, self.options, delta)


def elementary_perturbations(tokens, table, delta: int, perturbable=None) -> PerturbationSet:
    """All single substitutions of ``tokens`` allowed by ``table`` (id space).

    ``perturbable`` optionally masks positions that may not be changed
    (out-of-vocabulary tokens, positions past truncation).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    options = []
    for i, t in enumerate(tokens.tolist()):
        if perturbable is not None and not perturbable[i]:
            options.append(())
            continue
        reps = sorted(set(r for r in table.get(t, ()) if r != t))
        options.append(tuple(reps))
    return PerturbationSet(tokens, tuple(options), int(delta))


@dataclass(frozen=True)
class SimplexVertices:
    """Vertex 0 is ``origin``; vertex m >= 1 equals ``origin`` with row
    ``positions[m-1]`` replaced by ``rows[m-1]``."""

    origin: np.ndarray        # (L, d)
    positions: np.ndarray     # (M,)
    rows: np.ndarray          # (M, d) dilated rows
    delta: int

    @property
    def M(self) -> int:
        return len(self.positions)

    def dense(self) -> np.ndarray:
        out = np.repeat(self.origin[None], self.M + 1, axis=0)
        out[np.arange(1, self.M + 1), self.positions] = self.rows
        return out


def build_simplex(pset: PerturbationSet, embeddings: np.ndarray, delta: int | None = None) -> SimplexVertices:
    delta = pset.delta if delta is None else delta
    if delta < 1:
        raise ValueError(f"simplex dilation needs delta >= 1, got {delta}")
    origin = embeddings[pset.tokens]
    elems = pset.elems
    if not elems:
        return SimplexVertices(origin, np.zeros(0, dtype=np.int64),
                               np.zeros((0, origin.shape[1]), dtype=origin.dtype), delta)
    pos = np.array([e.position for e in elems], dtype=np.int64)
    rep = np.array([e.replacement for e in elems], dtype=np.int64)
    x0 = origin[pos]
    rows = embeddings[rep] if delta == 1 else x0 + delta * (embeddings[rep] - x0)
    return SimplexVertices(origin, pos, rows.astype(origin.dtype), delta)


def padded_deltas(pset: PerturbationSet, embeddings: np.ndarray, delta: int | None = None):
    """Dilated offsets ``delta*(p - x0)`` laid out as ``(L, O, d)`` with a validity mask.

    Also returns the replacement-id array ``(L, O)`` (``-1`` where unused), so
    gradients can be scattered back to embedding rows.
    """
    delta = pset.delta if delta is None else delta
    L = len(pset.tokens)
    O = max((len(o) for o in pset.options), default=0)
    O = max(O, 1)
    reps = np.full((L, O), -1, dtype=np.int64)
    for i, opts in enumerate(pset.options):
        reps[i, :len(opts)] = opts
    mask = reps >= 0
    rows = embeddings[np.where(mask, reps, 0)]
    offs = delta * (rows - embeddings[pset.tokens][:, None, :])
    offs[~mask] = 0
    return offs, mask, reps


def count_space(pset: PerturbationSet, delta: int | None = None) -> int:
    """Number of perturbed sentences (original excluded) with <= delta substitutions.

    Accumulates elementary symmetric polynomials of the option counts; Python
    integers keep the result exact.
    """
    delta = pset.delta if delta is None else delta
    if delta <= 0:
        return 0
    e = [1] + [0] * delta
    for opts in pset.options:
        n = len(opts)
        if not n:
            continue
        for k in range(delta, 0, -1):
            e[k] += e[k - 1] * n
    return sum(e[1:])


def enumerate_space(pset: PerturbationSet, lead: int | None = None) -> Iterator[np.ndarray]:
    """Yield the original, then every <= delta substitution variant.

    Order: by number of substitutions k, then position tuples in
    lexicographic order, then replacement ids in table order.  ``lead``
    restricts to variants whose first substituted position is ``lead``
    (the original is then not yielded); chunks over all leads partition
    the non-original variants.
    """
    base = np.asarray(pset.tokens)
    if lead is None:
        yield base.copy()
    positions = pset.perturbable
    for k in range(1, pset.delta + 1):
        for combo in itertools.combinations(positions, k):
            if lead is not None and combo[0] != lead:
                continue
            for reps in itertools.product(*(pset.options[p] for p in combo)):
                out = base.copy()
                out[list(combo)] = reps
                yield out


def enumerate_batches(pset: PerturbationSet, batch_size: int = 4096) -> Iterator[np.ndarray]:
    """``enumerate_space`` grouped into ``(n, L)`` arrays."""
    buf = []
    for seq in enumerate_space(pset):
        buf.append(seq)
        if len(buf) == batch_size:
            yield np.stack(buf)
            buf = []
    if buf:
        yield np.stack(buf)


def sample_perturbation(pset: PerturbationSet, rng: np.random.Generator, delta: int | None = None):
    """Draw one variant with 1..delta substitutions.  Returns ``(tokens, changed)``."""
    delta = pset.delta if delta is None else delta
    positions = pset.perturbable
    tokens = np.array(pset.tokens, copy=True)
    if not positions or delta < 1:
        return tokens, False
    k = int(rng.integers(1, min(delta, len(positions)) + 1))
    chosen = rng.choice(len(positions), size=k, replace=False)
    for c in sorted(chosen.tolist()):
        p = positions[c]
        opts = pset.options[p]
        tokens[p] = opts[int(rng.integers(len(opts)))]
    return tokens, True
