import datetime
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import scipy.sparse
from numpy.testing import assert_allclose, assert_array_equal

from codealign.codebook import CodeBook, CodeId
from codealign.cooccur import (
    SiteCooccurrence,
    SiteEmbedding,
    apply_thresholds,
    assemble_site_embedding,
    build_site_embedding,
    compute_ppmi,
    count_cooccurrence,
    svd_embed,
)

A = CodeId.parse("CCS:A")
B = CodeId.parse("CCS:B")
C = CodeId.parse("CCS:C")


def _brute_force(events, window):
    counts = {}
    for patient in events.values():
        unique = sorted(set(patient), key=lambda e: (str(e[0]), e[1]))
        for x in range(len(unique)):
            for y in range(x + 1, len(unique)):
                (ci, di), (cj, dj) = unique[x], unique[y]
                if abs(di - dj) <= window:
                    key = tuple(sorted([ci, cj]))
                    counts[key] = counts.get(key, 0) + 1
    return counts


def _site(codes, dense):
    return SiteCooccurrence(
        "s1", tuple(codes), scipy.sparse.csr_matrix(np.array(dense))
    )


class CountTest(unittest.TestCase):
    def test_in_window(self):
        c = count_cooccurrence({"p1": [(A, 0), (B, 10)]})
        self.assertEqual(c.counts[0, 1], 1)
        self.assertEqual(c.counts[1, 0], 1)

    def test_out_of_window(self):
        c = count_cooccurrence({"p1": [(A, 0), (B, 40)]})
        self.assertEqual(c.counts[0, 1], 0)

    def test_two_patients(self):
        events = {p: [(A, 0), (B, 5), (B, 20)] for p in ["p1", "p2"]}
        c = count_cooccurrence(events)
        self.assertEqual(c.counts[0, 1], 4)
        self.assertEqual(c.counts[1, 1], 2)
        self.assertEqual(c.n_patients, 2)

    def test_dates_and_dedupe(self):
        day = datetime.date(2020, 1, 1)
        c = count_cooccurrence(
            {"p1": [(A, day), (A, day), (B, day + datetime.timedelta(days=30))]}
        )
        self.assertEqual(c.counts[0, 0], 0)
        self.assertEqual(c.counts[0, 1], 1)

    def test_empty(self):
        c = count_cooccurrence({})
        self.assertEqual(c.counts.shape, (0, 0))
        self.assertEqual(c.grand_total, 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        codes = [CodeId.parse("CCS:%d" % i) for i in range(6)]
        for trial in range(20):
            events = {
                "p%d" % p: [
                    (codes[rng.integers(6)], int(rng.integers(0, 90)))
                    for _ in range(rng.integers(1, 50 // 3))
                ]
                for p in range(3)
            }
            c = count_cooccurrence(events, 30, threads=1 + trial % 3)
            expected = _brute_force(events, 30)
            dense = c.counts.toarray()
            assert_array_equal(dense, dense.T)
            for i, ci in enumerate(c.codes):
                for j, cj in enumerate(c.codes):
                    if i <= j:
                        self.assertEqual(dense[i, j], expected.get((ci, cj), 0))
            assert_array_equal(c.row_totals, dense.sum(axis=1))
            self.assertEqual(c.grand_total, dense.sum())


class ThresholdTest(unittest.TestCase):
    def test_boundary(self):
        c = _site([A, B, C], [[0, 9, 10], [9, 0, 10], [10, 10, 0]])
        kept = apply_thresholds(c)
        self.assertEqual(kept.codes, (A, B, C))
        dense = kept.counts.toarray()
        self.assertEqual(dense[0, 1], 0)
        self.assertEqual(dense[0, 2], 10)

    def test_single_weak_neighbour_removed(self):
        c = _site([A, B, C], [[0, 9, 0], [9, 0, 12], [0, 12, 0]])
        kept = apply_thresholds(c)
        self.assertEqual(kept.codes, (B, C))
        assert_array_equal(kept.counts.toarray(), [[0, 12], [12, 0]])

    def test_cascade_and_idempotent(self):
        # A and C go first, which leaves B with nothing
        c = _site([A, B, C], [[0, 15, 0], [15, 0, 10], [0, 10, 0]])
        kept = apply_thresholds(c, min_code_total=20)
        self.assertEqual(kept.codes, ())
        again = apply_thresholds(kept, min_code_total=20)
        self.assertEqual(again.codes, kept.codes)

        c = _site([A, B, C], [[0, 30, 10], [30, 0, 5], [10, 5, 0]])
        once = apply_thresholds(c)
        twice = apply_thresholds(once)
        self.assertEqual(once.codes, twice.codes)
        assert_array_equal(once.counts.toarray(), twice.counts.toarray())


class PpmiTest(unittest.TestCase):
    def test_ln_two(self):
        ppmi = compute_ppmi(_site([A, B], [[0, 20], [20, 0]]))
        # C(1,2)=20, C(1,.)=C(2,.)=20, C(.,.)=40
        self.assertAlmostEqual(ppmi[0, 1], math.log(2), places=15)
        self.assertAlmostEqual(ppmi[1, 0], math.log(2), places=15)

    def test_independence(self):
        ppmi = compute_ppmi(_site([A, B], [[10, 10], [10, 10]]))
        self.assertEqual(ppmi[0, 1], 0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(0, 30, size=(40, 40))
        upper = np.triu(counts * (rng.random((40, 40)) < 0.3))
        dense = upper + upper.T - np.diag(np.diag(upper))
        dense[5, :] = 0
        dense[:, 5] = 0
        codes = [CodeId.parse("CCS:%02d" % i) for i in range(40)]
        ppmi = compute_ppmi(_site(codes, dense)).toarray()
        total = dense.sum()
        rows = dense.sum(axis=1)
        for i in range(40):
            for j in range(40):
                if dense[i, j] == 0:
                    expected = 0.0
                else:
                    ratio = dense[i, j] * total / (rows[i] * rows[j])
                    expected = max(0.0, math.log(ratio))
                self.assertAlmostEqual(ppmi[i, j], expected, delta=1e-12)
        assert_array_equal(ppmi[5], 0)

    def test_no_counts(self):
        with self.assertRaises(ValueError):
            compute_ppmi(_site([A], [[0]]))


def _positive_part(dense, d):
    values, vectors = np.linalg.eigh(dense)
    order = np.argsort(-values)
    values, vectors = values[order][:d], vectors[:, order][:, :d]
    values = np.where(values > 1e-12, values, 0)
    return (vectors * values) @ vectors.T


class SvdTest(unittest.TestCase):
    def test_two_by_two(self):
        a = math.log(2)
        out = svd_embed(scipy.sparse.csr_matrix([[0, a], [a, 0]]), 2)
        assert_allclose(out[:, 0], [math.sqrt(a / 2)] * 2, rtol=1e-12)
        assert_array_equal(out[:, 1], [0, 0])

    def test_zero(self):
        assert_array_equal(
            svd_embed(scipy.sparse.csr_matrix((4, 4)), 3), np.zeros((4, 3))
        )

    def test_bad_dim(self):
        with self.assertRaises(ValueError):
            svd_embed(scipy.sparse.csr_matrix((2, 2)), 0)

    def test_gram_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.random((50, 50))
        dense = np.maximum(x + x.T - 1.0, 0)
        out = svd_embed(scipy.sparse.csr_matrix(dense), 8)
        self.assertLessEqual(
            np.linalg.norm(out @ out.T - _positive_part(dense, 8)), 1e-8
        )

    def test_sign_convention(self):
        rng = np.random.default_rng(3)
        x = rng.random((30, 30))
        out = svd_embed(scipy.sparse.csr_matrix(x + x.T), 4)
        for col in out.T:
            self.assertGreater(col[np.argmax(np.abs(col))], 0)

    def test_sparse_path(self):
        rng = np.random.default_rng(4)
        basis, _ = np.linalg.qr(rng.normal(size=(300, 5)))
        dense = (basis * np.array([9.0, 7.0, 5.0, 3.0, 1.0])) @ basis.T
        out = svd_embed(scipy.sparse.csr_matrix(dense), 5, seed=1, dense_limit=10)
        self.assertLessEqual(np.linalg.norm(out @ out.T - dense), 1e-6)
        for col in out.T:
            self.assertGreater(col[np.argmax(np.abs(col))], 0)

    def test_sparse_path_keeps_positive_spectrum(self):
        # bipartite blocks have eigenvalues +-2w, cliques of four have 3c
        blocks = [
            np.kron([[0, 1], [1, 0]], np.full((2, 2), 4.0 + 0.05 * i))
            for i in range(20)
        ]
        blocks += [(1 + i / 60) * (np.ones((4, 4)) - np.eye(4)) for i in range(20)]
        ppmi = scipy.sparse.block_diag(blocks, format="csr")
        expected = np.sort(8.0 + 0.1 * np.arange(20))[::-1]
        sparse = svd_embed(ppmi, 20, seed=3, dense_limit=10)
        dense = svd_embed(ppmi, 20)
        assert_allclose(np.sum(sparse**2, axis=0), expected, rtol=1e-7)
        assert_allclose(sparse @ sparse.T, dense @ dense.T, atol=1e-6)


class AssembleTest(unittest.TestCase):
    def setUp(self):
        self.lp = CodeId.parse("LP:1")
        self.l1 = CodeId.parse("LOINC:1")
        self.l2 = CodeId.parse("LOINC:2")
        self.other = CodeId.parse("CCS:9")
        self.book = CodeBook.build(
            [self.lp, self.l1, self.l2, self.other, CodeId.parse("LP:2")],
            site_membership={
                self.lp: ["s1"],
                self.l1: ["s1"],
                self.l2: ["s1"],
                CodeId.parse("LP:2"): ["s1"],
            },
            lp_children={
                self.lp: [(self.l1, 3.0), (self.l2, 1.0)],
                CodeId.parse("LP:2"): [(CodeId.parse("LOINC:3"), 1.0)],
            },
        )

    def test_weighted_lp_row(self):
        base = np.array([[1.0, 0.0], [0.0, 1.0]])
        emb = assemble_site_embedding(base, [self.l1, self.l2], self.book, "s1")
        assert_allclose(
            emb.matrix[self.book.index[self.lp]],
            [0.9486832980505138, 0.31622776601683794],
        )
        assert_array_equal(emb.matrix[self.book.index[self.other]], [0, 0])
        self.assertEqual(emb.empty_lp, (CodeId.parse("LP:2"),))
        assert_array_equal(emb.matrix[self.book.index[CodeId.parse("LP:2")]], [0, 0])
        norms = np.linalg.norm(emb.matrix, axis=1)
        for row, norm in enumerate(norms):
            if row in emb.present_rows and norm > 0:
                self.assertAlmostEqual(norm, 1.0, delta=1e-9)
        self.assertNotIn(self.book.index[self.other], emb.present_rows)

    def test_unit_rows_unchanged(self):
        base = np.array([[1.0, 0.0], [0.0, -1.0]])
        emb = assemble_site_embedding(base, [self.l1, self.l2], self.book, "s1")
        assert_array_equal(emb.matrix[self.book.index[self.l1]], [1.0, 0.0])

    def test_save_load(self):
        base = np.array([[1.0, 2.0], [3.0, 4.0]])
        emb = assemble_site_embedding(base, [self.l1, self.l2], self.book, "s1")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "v.bin"
            emb.save(path, self.book)
            loaded = SiteEmbedding.load(path, self.book, "s1")
        assert_array_equal(loaded.matrix, emb.matrix)
        assert_array_equal(loaded.present_rows, emb.present_rows)


class ExchangeTest(unittest.TestCase):
    def test_triplets_round_trip(self):
        events = {"p1": [(A, 0), (B, 5), (B, 20), (C, 3)], "p2": [(A, 1), (C, 2)]}
        c = count_cooccurrence(events, site="s1")
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            c.save(tmp / "counts.tsv", tmp / "site.json")
            lines = (tmp / "counts.tsv").read_text().splitlines()
            loaded = SiteCooccurrence.load(tmp / "counts.tsv", tmp / "site.json")
        self.assertEqual(lines[0], "code_i\tcode_j\tcount")
        for line in lines[1:]:
            i, j, _ = line.split("\t")
            self.assertLessEqual(CodeId.parse(i), CodeId.parse(j))
        self.assertEqual(loaded.codes, c.codes)
        self.assertEqual(loaded.n_patients, 2)
        assert_array_equal(loaded.counts.toarray(), c.counts.toarray())

    def test_pipeline_shapes(self):
        rng = np.random.default_rng(0)
        codes = [CodeId.parse("CCS:%d" % i) for i in range(8)]
        events = {
            "p%d" % p: [
                (codes[rng.integers(8)], int(rng.integers(0, 60))) for _ in range(20)
            ]
            for p in range(40)
        }
        book = CodeBook.build(codes, site_membership={c: ["s1"] for c in codes})
        c = count_cooccurrence(events, site="s1")
        emb = build_site_embedding(c, book, 4, min_pair=1, min_code_total=1)
        self.assertEqual(emb.matrix.shape, (8, 4))
        norms = np.linalg.norm(emb.matrix, axis=1)
        self.assertTrue(np.all((np.abs(norms - 1) < 1e-9) | (norms == 0)))
