import tempfile
import unittest
from pathlib import Path

import numpy as np

from codealign.codebook import (
    CodeBook,
    CodeId,
    CodeSystem,
    RollupTable,
    branch_of,
    hierarchy_relatives,
    mapping_targets,
    rollup_code,
)
from codealign.tsv import InputFormatError, MissingInputError


def C(text: str) -> CodeId:
    return CodeId.parse(text)


class CodeIdTest(unittest.TestCase):
    def test_order_is_system_then_value(self):
        codes = sorted([C("RxNorm:1"), C("CCS:9"), C("CCS:10"), C("LOINC:2-1")])
        self.assertEqual(
            [str(c) for c in codes], ["CCS:10", "CCS:9", "LOINC:2-1", "RxNorm:1"]
        )

    def test_empty_value(self):
        with self.assertRaises(ValueError):
            CodeId(CodeSystem.CCS, "")

    def test_unknown_system(self):
        with self.assertRaises(ValueError):
            CodeId.of("ICD", "714.0")

    def test_parse_keeps_colons_in_value(self):
        self.assertEqual(C("Other:ICD:714.0").value, "ICD:714.0")

    def test_standard(self):
        self.assertTrue(CodeSystem.LP.is_standard)
        self.assertFalse(CodeSystem.CCAM.is_standard)
        self.assertEqual(
            mapping_targets(CodeSystem.LOCAL_LAB), {CodeSystem.LOINC, CodeSystem.LP}
        )
        self.assertEqual(mapping_targets(CodeSystem.PHECODE), frozenset())


class RollupTest(unittest.TestCase):
    def setUp(self):
        self.table = RollupTable(
            {
                ("ICD", "714.0"): C("PheCode:714.1"),
                ("CPT", "99213"): C("CCS:227"),
                ("ICD", "250.01"): C("PheCode:250.1"),
            }
        )

    def test_lookup(self):
        self.assertEqual(rollup_code(("ICD", "714.0"), self.table), C("PheCode:714.1"))
        self.assertEqual(rollup_code(("CPT", "99213"), self.table), C("CCS:227"))

    def test_identity_on_unmapped(self):
        self.assertEqual(
            rollup_code(("PheCode", "296.2"), RollupTable()), C("PheCode:296.2")
        )

    def test_unmapped_raw_system_is_retained_as_other(self):
        self.assertEqual(
            rollup_code(("ICD", "999.9"), self.table), C("Other:ICD:999.9")
        )

    def test_load_rejects_duplicates(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "rollup.tsv"
            path.write_text(
                "source_system\tsource_value\ttarget_system\ttarget_value\n"
                "ICD\t714.0\tPheCode\t714.1\n"
                "ICD\t714.0\tPheCode\t714.2\n"
            )
            with self.assertRaises(InputFormatError) as cm:
                RollupTable.load(path)
            self.assertEqual(cm.exception.line, 3)

    def test_save_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "rollup.tsv"
            self.table.save(path)
            self.assertEqual(RollupTable.load(path), self.table)


def _toy_book() -> CodeBook:
    # RxNorm: root -> {A, A2}; A -> {B, C}; A2 -> {D}
    hierarchy = {
        C("RxNorm:A"): C("RxNorm:root"),
        C("RxNorm:A2"): C("RxNorm:root"),
        C("RxNorm:B"): C("RxNorm:A"),
        C("RxNorm:C"): C("RxNorm:A"),
        C("RxNorm:D"): C("RxNorm:A2"),
        C("LOINC:1-1"): C("LP:10"),
        C("LP:10"): C("LP:1"),
    }
    codes = [C("RxNorm:%s" % v) for v in ["root", "A", "A2", "B", "C", "D"]]
    codes += [C("LOINC:1-1"), C("LOINC:2-2"), C("LP:10"), C("LP:1")]
    codes += [C("PheCode:296.22"), C("CCAM:GLLD015"), C("LocalLab:x")]
    return CodeBook.build(
        codes,
        descriptions={C("LOINC:1-1"): "glucose serum"},
        site_membership={C("LOINC:1-1"): ["s1", "s2"], C("LocalLab:x"): ["s2"]},
        hierarchy=hierarchy,
        lp_children={C("LP:10"): [(C("LOINC:1-1"), 3.0)]},
    )


class CodeBookTest(unittest.TestCase):
    def test_sorted_and_indexed(self):
        book = _toy_book()
        self.assertEqual(list(book.codes), sorted(book.codes))
        for i, code in enumerate(book.codes):
            self.assertEqual(book.index[code], i)
        self.assertEqual(book.sites, ["s1", "s2"])
        self.assertEqual(book.site_codes("s2"), [C("LOINC:1-1"), C("LocalLab:x")])

    def test_unknown_site_code(self):
        with self.assertRaisesRegex(ValueError, "unknown codes"):
            CodeBook.build([C("CCS:1")], site_membership={C("CCS:2"): ["s1"]})

    def test_cycle(self):
        with self.assertRaisesRegex(ValueError, "cycle"):
            CodeBook.build(
                [C("CCS:1")],
                hierarchy={C("CCS:1"): C("CCS:2"), C("CCS:2"): C("CCS:1")},
            )

    def test_lp_without_children(self):
        with self.assertRaisesRegex(ValueError, "no children"):
            CodeBook.build([C("LP:1")], lp_children={C("LP:1"): []})

    def test_lp_negative_weight(self):
        with self.assertRaisesRegex(ValueError, "negative"):
            CodeBook.build([C("LP:1")], lp_children={C("LP:1"): [(C("LOINC:1"), -1)]})

    def test_lp_parents(self):
        book = CodeBook.build(
            [C("LP:1"), C("LP:2"), C("LOINC:1"), C("LOINC:2"), C("LOINC:3")],
            hierarchy={C("LOINC:3"): C("LP:3")},
            lp_children={
                C("LP:1"): [(C("LOINC:1"), 1.0), (C("LOINC:2"), 2.0)],
                C("LP:2"): [(C("LOINC:2"), 1.0)],
            },
        )
        self.assertEqual(book.lp_parents(C("LOINC:2")), [C("LP:1"), C("LP:2")])
        self.assertEqual(book.lp_parents(C("LOINC:1")), [C("LP:1")])
        self.assertEqual(book.lp_parents(C("LOINC:3")), [C("LP:3")])
        self.assertEqual(book.lp_parents(C("LOINC:9")), [])
        again = book.with_descriptions({C("LP:1"): "panel"})
        self.assertEqual(again.lp_parent_index, book.lp_parent_index)

    def test_lp_parent_index_inverts_children(self):
        rng = np.random.default_rng(0)
        loincs = [C("LOINC:%d" % i) for i in range(200)]
        lp_children = {
            C("LP:%d" % j): [
                (loincs[i], 1.0) for i in rng.choice(200, size=5, replace=False)
            ]
            for j in range(50)
        }
        book = CodeBook.build(loincs + list(lp_children), lp_children=lp_children)
        for loinc in loincs:
            expected = sorted(
                lp
                for lp, kids in lp_children.items()
                if any(c == loinc for c, _ in kids)
            )
            self.assertEqual(book.lp_parents(loinc), expected)

    def test_save_load_keeps_row_order(self):
        book = _toy_book()
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            book.save(tmp / "codes.tsv", tmp / "hier.tsv", tmp / "lp.tsv")
            loaded = CodeBook.load(tmp / "codes.tsv", tmp / "hier.tsv", tmp / "lp.tsv")
        self.assertEqual(loaded.codes, book.codes)
        self.assertEqual(loaded.row_order_hash(), book.row_order_hash())
        self.assertEqual(loaded.hierarchy, book.hierarchy)
        self.assertEqual(loaded.lp_children, book.lp_children)
        self.assertEqual(loaded.description(C("LOINC:1-1")), "glucose serum")
        self.assertEqual(loaded.site_membership, book.site_membership)

    def test_load_missing(self):
        with self.assertRaises(MissingInputError):
            CodeBook.load(Path("/nonexistent/codes.tsv"))

    def test_load_bad_system_reports_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "codes.tsv"
            path.write_text(
                "system\tvalue\tdescription\tsites\n"
                "CCS\t1\tx\ts1\n"
                "Bogus\t2\ty\ts1\n"
            )
            with self.assertRaises(InputFormatError) as cm:
                CodeBook.load(path)
            self.assertEqual(cm.exception.line, 3)

    def test_load_short_row(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "codes.tsv"
            path.write_text("system\tvalue\tdescription\tsites\nCCS\t1\n")
            with self.assertRaises(InputFormatError):
                CodeBook.load(path)


class BranchTest(unittest.TestCase):
    def setUp(self):
        self.book = _toy_book()

    def test_phecode(self):
        self.assertEqual(branch_of(C("PheCode:296.22"), self.book), "296")

    def test_ccam(self):
        self.assertEqual(branch_of(C("CCAM:GLLD015"), self.book), "GLLD")

    def test_rxnorm_grandparent(self):
        self.assertEqual(branch_of(C("RxNorm:B"), self.book), "root")
        self.assertEqual(branch_of(C("RxNorm:D"), self.book), "root")

    def test_rxnorm_missing_grandparent_falls_back(self):
        self.assertEqual(branch_of(C("RxNorm:A"), self.book), "A")

    def test_loinc_topmost_lp(self):
        self.assertEqual(branch_of(C("LOINC:1-1"), self.book), "1")
        self.assertEqual(branch_of(C("LP:10"), self.book), "1")
        self.assertEqual(branch_of(C("LOINC:2-2"), self.book), "2-2")

    def test_no_rule(self):
        with self.assertRaisesRegex(ValueError, "no branch rule"):
            branch_of(C("LocalLab:x"), self.book)

    def test_pure(self):
        self.assertEqual(
            [branch_of(c, self.book) for c in self.book.codes_of(CodeSystem.RXNORM)],
            [branch_of(c, _toy_book()) for c in self.book.codes_of(CodeSystem.RXNORM)],
        )


class RelativesTest(unittest.TestCase):
    def setUp(self):
        self.book = _toy_book()

    def test_root(self):
        self.assertEqual(
            hierarchy_relatives(C("RxNorm:root"), self.book), (frozenset(), frozenset())
        )

    def test_toy_tree(self):
        siblings, cousins = hierarchy_relatives(C("RxNorm:B"), self.book)
        self.assertEqual(siblings, {C("RxNorm:C")})
        self.assertEqual(cousins, {C("RxNorm:D")})

    def test_only_child_of_root(self):
        book = CodeBook.build(
            [C("CCS:p"), C("CCS:c")], hierarchy={C("CCS:c"): C("CCS:p")}
        )
        self.assertEqual(
            hierarchy_relatives(C("CCS:c"), book), (frozenset(), frozenset())
        )

    def test_disjoint(self):
        for code in self.book.codes:
            siblings, cousins = hierarchy_relatives(code, self.book)
            self.assertFalse(siblings & cousins)
            self.assertNotIn(code, siblings | cousins)
