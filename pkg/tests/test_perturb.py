import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textcert.perturb import (ElementaryPerturbation, PerturbationSet, SubstitutionTable, TableFormatError,
                              build_simplex, count_space, elementary_perturbations, enumerate_space,
                              sample_perturbation)


def pset_from_counts(counts, delta):
    """Position i gets replacement ids 100*(i+1)+k for k < counts[i]; originals are 0..L-1."""
    options = tuple(tuple(100 * (i + 1) + k for k in range(c)) for i, c in enumerate(counts))
    return PerturbationSet(np.arange(len(counts)), options, delta)


def brute_force_space(pset):
    """Every sentence within ``delta`` substitutions, by scanning the full product space."""
    choices = [(t,) + o for t, o in zip(pset.tokens.tolist(), pset.options)]
    out = set()
    for seq in itertools.product(*choices):
        if sum(a != b for a, b in zip(seq, pset.tokens.tolist())) <= pset.delta:
            out.add(seq)
    return out


class TestTable:
    def test_parse(self):
        t = SubstitutionTable.parse(["# comment\n", "a\tq s\n", "b\tv b\n", "\n", "c\tc\n"])
        assert t == {"a": ("q", "s"), "b": ("v",)}

    def test_malformed(self):
        with pytest.raises(TableFormatError, match="2"):
            SubstitutionTable.parse(["a\tq\n", "broken line\n"])

    def test_to_ids_drops_missing(self, caplog):
        t = SubstitutionTable({"a": ("q", "zz")})
        assert t.to_ids({"a": 1, "q": 2}) == {1: (2,)}
        assert "dropped 1" in caplog.text

    def test_roundtrip(self):
        t = SubstitutionTable({"a": ("q", "s"), "b": ("v",)})
        assert SubstitutionTable.parse(t.dump().splitlines(True)) == t


class TestElementary:
    def test_no_table_entries(self):
        assert elementary_perturbations([1, 2, 3], {}, 1).M == 0

    def test_counts(self):
        table = {10: (1, 2), 30: (5,)}
        p = elementary_perturbations([10, 20, 30], table, 1)
        assert p.M == 3
        assert [e.position for e in p.elems] == [0, 0, 2]

    def test_chars(self):
        vocab = {c: i for i, c in enumerate("abqsv")}
        table = SubstitutionTable({"a": ("q", "s"), "b": ("v",)}).to_ids(vocab)
        p = elementary_perturbations([vocab["a"], vocab["b"]], table, 1)
        assert p.elems == [ElementaryPerturbation(0, vocab["q"]), ElementaryPerturbation(0, vocab["s"]),
                           ElementaryPerturbation(1, vocab["v"])]

    def test_mask(self):
        p = elementary_perturbations([1, 1], {1: (2,)}, 1, perturbable=[False, True])
        assert p.elems == [ElementaryPerturbation(1, 2)]


class TestSimplex:
    def test_delta_one_is_elementary(self, rng):
        E = rng.normal(size=(6, 3))
        p = elementary_perturbations([1, 2, 3], {1: (4,), 3: (5, 0)}, 1)
        sv = build_simplex(p, E)
        dense = sv.dense()
        np.testing.assert_array_equal(dense[0], E[[1, 2, 3]])
        for m, e in enumerate(p.elems, 1):
            toks = np.array([1, 2, 3])
            toks[e.position] = e.replacement
            np.testing.assert_array_equal(dense[m], E[toks])

    def test_dilation_arithmetic(self):
        E = np.array([[0.0, 0.0], [1.0, 1.0]])
        sv = build_simplex(PerturbationSet(np.array([0]), ((1,),), 2), E)
        np.testing.assert_array_equal(sv.rows[0], [2, 2])

    def test_dilation_random(self, rng):
        E = rng.normal(size=(8, 5))
        p = elementary_perturbations(rng.integers(0, 8, size=6), {i: ((i + 1) % 8,) for i in range(8)}, 3)
        sv = build_simplex(p, E)
        x0 = E[p.tokens]
        for m, e in enumerate(p.elems):
            np.testing.assert_allclose(sv.rows[m] - x0[e.position], 3 * (E[e.replacement] - x0[e.position]))
            diff = np.any(sv.dense()[m + 1] != x0, axis=1)
            assert np.flatnonzero(diff).tolist() in ([e.position], [])

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            build_simplex(PerturbationSet(np.array([0]), ((1,),), 0), np.eye(2))


class TestEnumerate:
    def test_empty(self):
        out = list(enumerate_space(PerturbationSet(np.array([1, 2]), ((), ()), 3)))
        assert len(out) == 1 and out[0].tolist() == [1, 2]

    def test_two_single_options(self):
        out = [s.tolist() for s in enumerate_space(pset_from_counts([1, 1], 2))]
        assert out == [[0, 1], [100, 1], [0, 200], [100, 200]]

    def test_hand_count(self):
        p = pset_from_counts([2, 1, 3], 2)
        total = 1 + (2 + 1 + 3) + (2 * 1 + 2 * 3 + 1 * 3)
        assert total == 18
        assert len(list(enumerate_space(p))) == 18
        assert count_space(p) == 17

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=0, max_size=8), st.integers(0, 3))
    def test_against_product_scan(self, counts, delta):
        p = pset_from_counts(counts, delta)
        seqs = [tuple(s.tolist()) for s in enumerate_space(p)]
        assert len(seqs) == len(set(seqs))
        assert set(seqs) == brute_force_space(p)
        assert count_space(p) == len(seqs) - 1

    def test_chunks_partition(self):
        p = pset_from_counts([2, 0, 1, 3], 3)
        chunks = [list(map(tuple, enumerate_space(p, lead=i))) for i in range(4)]
        flat = [s for c in chunks for s in c]
        full = list(map(tuple, enumerate_space(p)))[1:]
        assert sorted(flat) == sorted(full)
        assert len(flat) == len(set(flat))

    def test_deterministic_order(self):
        p = pset_from_counts([2, 1, 3], 2)
        a = [s.tolist() for s in enumerate_space(p)]
        b = [s.tolist() for s in enumerate_space(p)]
        assert a == b


class TestCount:
    def test_twenty_six_single_option_positions(self):
        p = pset_from_counts([1] * 26, 3)
        assert count_space(p) == 26 + 325 + 2600 == 2951
        assert count_space(p) == sum(math.comb(26, k) for k in (1, 2, 3))

    def test_zero_budget(self):
        assert count_space(pset_from_counts([3, 3], 0)) == 0

    def test_exact_for_huge_spaces(self):
        assert count_space(pset_from_counts([5] * 300, 6)) == sum(
            math.comb(300, k) * 5 ** k for k in range(1, 7))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 4), max_size=10), st.integers(0, 4), st.integers(0, 9))
    def test_monotone(self, counts, delta, bump):
        p = pset_from_counts(counts, delta)
        assert count_space(p) <= count_space(p.with_delta(delta + 1))
        if counts:
            more = list(counts)
            more[bump % len(counts)] += 1
            assert count_space(p) <= count_space(pset_from_counts(more, delta))


class TestSample:
    def test_single_variant(self, rng):
        p = pset_from_counts([0, 1], 1)
        for _ in range(20):
            toks, changed = sample_perturbation(p, rng)
            assert changed and toks.tolist() == [0, 200]

    def test_no_options_flagged(self, rng):
        toks, changed = sample_perturbation(pset_from_counts([0, 0], 2), rng)
        assert not changed and toks.tolist() == [0, 1]

    def test_reproducible(self):
        p = pset_from_counts([2, 1, 3, 2], 3)
        a = [sample_perturbation(p, np.random.default_rng(7))[0].tolist() for _ in range(3)]
        b = [sample_perturbation(p, np.random.default_rng(7))[0].tolist() for _ in range(3)]
        assert a == b

    def test_distribution(self):
        p = pset_from_counts([2, 1, 3], 2)
        # exact law: k uniform on {1, 2}; k positions uniform; replacement uniform per position
        expected = Counter()
        for k in (1, 2):
            combos = list(itertools.combinations(range(3), k))
            for combo in combos:
                reps = list(itertools.product(*(p.options[i] for i in combo)))
                for r in reps:
                    seq = list(p.tokens.tolist())
                    for i, v in zip(combo, r):
                        seq[i] = v
                    expected[tuple(seq)] += 0.5 / len(combos) / len(reps)
        assert len(expected) == 17
        n = 100_000
        rng = np.random.default_rng(2024)
        seen = Counter(tuple(sample_perturbation(p, rng)[0].tolist()) for _ in range(n))
        assert set(seen) == set(expected)
        for seq, prob in expected.items():
            sigma = math.sqrt(n * prob * (1 - prob))
            assert abs(seen[seq] - n * prob) <= 3 * sigma, seq
