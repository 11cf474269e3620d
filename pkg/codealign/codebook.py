"""
Code identities, ontology structure, code rollup and branch grouping.

A :class:`CodeBook` fixes the row order of every embedding matrix in the
pipeline: codes sorted by ``(system, value)``. Two CodeBooks with the same
codes have the same :meth:`CodeBook.row_order_hash`, and binary matrix files
record that hash so a matrix is never read against the wrong rows.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np

from .tsv import InputFormatError, read_table, split_list, write_table

logger = logging.getLogger(__name__)


class CodeSystem(enum.Enum):
    PHECODE = "PheCode"
    CCS = "CCS"
    LOINC = "LOINC"
    LP = "LP"
    RXNORM = "RxNorm"
    CCAM = "CCAM"
    LOCAL_LAB = "LocalLab"
    LOCAL_MED = "LocalMed"
    LOCAL_PX = "LocalPx"
    OTHER = "Other"

    @property
    def is_standard(self) -> bool:
        """
        PheCode, CCS, LOINC (with its LP parts) and RxNorm are standard.

        Everything else, CCAM included, is a local code that we want to map
        onto a standard one.
        """
        return self in _STANDARD_SYSTEMS


_STANDARD_SYSTEMS = frozenset(
    [
        CodeSystem.PHECODE,
        CodeSystem.CCS,
        CodeSystem.LOINC,
        CodeSystem.LP,
        CodeSystem.RXNORM,
    ]
)

_MAPPING_TARGETS = {
    CodeSystem.LOCAL_LAB: frozenset([CodeSystem.LOINC, CodeSystem.LP]),
    CodeSystem.LOCAL_MED: frozenset([CodeSystem.RXNORM]),
    CodeSystem.LOCAL_PX: frozenset([CodeSystem.CCS]),
    CodeSystem.CCAM: frozenset([CodeSystem.CCS]),
    CodeSystem.OTHER: frozenset([CodeSystem.PHECODE]),
}


def mapping_targets(system: CodeSystem) -> FrozenSet[CodeSystem]:
    """
    Standard systems a local code of `system` maps onto.

    Standard systems map onto nothing.
    """
    return _MAPPING_TARGETS.get(system, frozenset())


@functools.total_ordering
@dataclass(frozen=True)
class CodeId:
    system: CodeSystem
    value: str

    def __post_init__(self):
        if not self.value:
            raise ValueError("CodeId value must be non-empty (system %s)" % self.system)

    @classmethod
    def of(cls, system: str, value: str) -> CodeId:
        """Build from text. Raise ValueError on an unknown system."""
        return cls(CodeSystem(system), value)

    @classmethod
    def parse(cls, text: str) -> CodeId:
        """Parse ``"System:value"`` (the format of :meth:`__str__`)."""
        system, sep, value = text.partition(":")
        if not sep:
            raise ValueError("Code %r is not of the form System:value" % text)
        return cls.of(system, value)

    @property
    def key(self) -> Tuple[str, str]:
        return (self.system.value, self.value)

    def __lt__(self, other: CodeId) -> bool:
        if not isinstance(other, CodeId):
            return NotImplemented
        return self.key < other.key

    def __str__(self) -> str:
        return "%s:%s" % (self.system.value, self.value)


@dataclass(frozen=True)
class RollupTable:
    """
    Maps raw (system, value) pairs, such as ICD or CPT codes, to CodeIds.

    The table is a function: loading a file that maps one raw code twice is an
    error.
    """

    entries: Mapping[Tuple[str, str], CodeId] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> RollupTable:
        frame = read_table(
            path, ["source_system", "source_value", "target_system", "target_value"]
        )
        entries: Dict[Tuple[str, str], CodeId] = {}
        for i, row in enumerate(frame.itertuples(index=False)):
            key = (row.source_system, row.source_value)
            if key in entries:
                raise InputFormatError(
                    path, i + 2, "raw code %s:%s is mapped twice" % key
                )
            try:
                entries[key] = CodeId.of(row.target_system, row.target_value)
            except ValueError as err:
                raise InputFormatError(path, i + 2, str(err))
        return cls(entries)

    def save(self, path: Path) -> None:
        write_table(
            path,
            ["source_system", "source_value", "target_system", "target_value"],
            (
                (s, v, t.system.value, t.value)
                for (s, v), t in sorted(self.entries.items())
            ),
        )


def rollup_code(raw: Tuple[str, str], table: RollupTable) -> CodeId:
    """
    Roll a raw code up to its grouping code.

    Codes that cannot be mapped are retained individually. A raw system that is
    not a :class:`CodeSystem` becomes an ``Other`` code whose value keeps the
    raw system as a prefix (``Other:ICD:714.0``), so identifiers stay unique.
    """
    mapped = table.entries.get(raw)
    if mapped is not None:
        return mapped
    system, value = raw
    try:
        return CodeId(CodeSystem(system), value)
    except ValueError:
        return CodeId(CodeSystem.OTHER, "%s:%s" % (system, value))


@dataclass(frozen=True)
class CodeBook:
    """
    The universe of codes: order, descriptions, sites, hierarchy, LP parts.

    Build with :meth:`build`, which sorts and validates. Immutable afterwards.
    """

    codes: Tuple[CodeId, ...]
    """All codes, sorted by (system, value). Defines matrix row order."""

    descriptions: Mapping[CodeId, str]

    site_membership: Mapping[CodeId, FrozenSet[str]]
    """Sites each code appears at."""

    hierarchy: Mapping[CodeId, CodeId]
    """Child -> parent. Parents need not be in `codes`."""

    lp_children: Mapping[CodeId, Tuple[Tuple[CodeId, float], ...]]
    """LP code -> (LOINC child, occurrence weight) pairs."""

    index: Mapping[CodeId, int] = field(repr=False, compare=False)

    children: Mapping[CodeId, Tuple[CodeId, ...]] = field(repr=False, compare=False)
    """Parent -> children that are in `codes`, sorted."""

    lp_parent_index: Mapping[CodeId, Tuple[CodeId, ...]] = field(
        repr=False, compare=False, default_factory=dict
    )
    """LOINC child -> LP codes listing it, sorted. The inverse of `lp_children`."""

    @classmethod
    def build(
        cls,
        codes: Iterable[CodeId],
        *,
        descriptions: Optional[Mapping[CodeId, str]] = None,
        site_membership: Optional[Mapping[CodeId, Iterable[str]]] = None,
        hierarchy: Optional[Mapping[CodeId, CodeId]] = None,
        lp_children: Optional[Mapping[CodeId, Iterable[Tuple[CodeId, float]]]] = None,
    ) -> CodeBook:
        """
        Sort codes and validate the invariants.

        :raises ValueError: if a site or LP entry names an unknown code, the
                            hierarchy has a cycle, or an LP weight is
                            negative or an LP code has no children.
        """
        ordered = tuple(sorted(set(codes)))
        index = {code: i for i, code in enumerate(ordered)}
        descriptions = dict(descriptions or {})
        membership = {
            code: frozenset(sites)
            for code, sites in (site_membership or {}).items()
            if sites
        }
        unknown = sorted(str(c) for c in membership if c not in index)
        if unknown:
            raise ValueError("Site membership names unknown codes: %s" % unknown[:10])
        hierarchy = dict(hierarchy or {})
        _check_acyclic(hierarchy)
        lp = {}
        for parent, kids in (lp_children or {}).items():
            kids = tuple(sorted((child, float(w)) for child, w in kids))
            if not kids:
                raise ValueError("LP code %s has no children" % parent)
            if any(w < 0 for _, w in kids):
                raise ValueError("LP code %s has a negative child weight" % parent)
            lp[parent] = kids

        children: Dict[CodeId, List[CodeId]] = {}
        for child, parent in hierarchy.items():
            if child in index:
                children.setdefault(parent, []).append(child)
        lp_parents: Dict[CodeId, Set[CodeId]] = {}
        for parent, kids in lp.items():
            for child, _ in kids:
                lp_parents.setdefault(child, set()).add(parent)
        return cls(
            codes=ordered,
            descriptions=descriptions,
            site_membership=membership,
            hierarchy=hierarchy,
            lp_children=lp,
            index=index,
            children={p: tuple(sorted(c)) for p, c in children.items()},
            lp_parent_index={c: tuple(sorted(p)) for c, p in lp_parents.items()},
        )

    @property
    def size(self) -> int:
        """N, the number of codes."""
        return len(self.codes)

    @property
    def sites(self) -> List[str]:
        """All site ids, sorted."""
        return sorted({s for sites in self.site_membership.values() for s in sites})

    def site_codes(self, site: str) -> List[CodeId]:
        """Codes appearing at `site`, in row order."""
        return [c for c in self.codes if site in self.site_membership.get(c, ())]

    def rows(self, codes: Iterable[CodeId]) -> np.ndarray:
        """Row indices of `codes`. Raise KeyError on unknown codes."""
        return np.array([self.index[c] for c in codes], dtype=np.int64)

    def codes_of(self, *systems: CodeSystem) -> List[CodeId]:
        """Codes of the given systems, in row order."""
        wanted = set(systems)
        return [c for c in self.codes if c.system in wanted]

    def description(self, code: CodeId) -> str:
        return self.descriptions.get(code, "")

    def parent(self, code: CodeId) -> Optional[CodeId]:
        return self.hierarchy.get(code)

    def lp_parents(self, code: CodeId) -> List[CodeId]:
        """LP codes listing `code` as a child, plus an LP hierarchy parent."""
        parents = set(self.lp_parent_index.get(code, ()))
        parent = self.hierarchy.get(code)
        if parent is not None and parent.system == CodeSystem.LP:
            parents.add(parent)
        return sorted(parents)

    def row_order_hash(self) -> bytes:
        """SHA-256 over the ordered code list (32 bytes)."""
        digest = hashlib.sha256()
        for code in self.codes:
            digest.update(str(code).encode("utf-8"))
            digest.update(b"\n")
        return digest.digest()

    def with_descriptions(self, descriptions: Mapping[CodeId, str]) -> CodeBook:
        """Copy of this book with some descriptions replaced."""
        merged = dict(self.descriptions)
        merged.update(descriptions)
        return CodeBook.build(
            self.codes,
            descriptions=merged,
            site_membership=self.site_membership,
            hierarchy=self.hierarchy,
            lp_children=self.lp_children,
        )

    @classmethod
    def load(
        cls,
        codes_path: Path,
        hierarchy_path: Optional[Path] = None,
        lp_children_path: Optional[Path] = None,
    ) -> CodeBook:
        """
        Read the codes file, plus optional hierarchy and LP-children files.

        Formats (TSV, header row required):

        * codes: ``system, value, description, sites`` (sites comma-separated)
        * hierarchy: ``child_system, child_value, parent_system, parent_value``
        * LP children: ``lp_value, loinc_value, weight``
        """
        frame = read_table(codes_path, ["system", "value", "description", "sites"])
        codes = []
        descriptions = {}
        membership = {}
        for i, row in enumerate(frame.itertuples(index=False)):
            code = _parse_code(codes_path, i, row.system, row.value)
            codes.append(code)
            descriptions[code] = row.description
            membership[code] = split_list(row.sites)

        hierarchy = {}
        if hierarchy_path is not None:
            frame = read_table(
                hierarchy_path,
                ["child_system", "child_value", "parent_system", "parent_value"],
            )
            for i, row in enumerate(frame.itertuples(index=False)):
                child = _parse_code(
                    hierarchy_path, i, row.child_system, row.child_value
                )
                parent = _parse_code(
                    hierarchy_path, i, row.parent_system, row.parent_value
                )
                hierarchy[child] = parent

        lp_children: Dict[CodeId, List[Tuple[CodeId, float]]] = {}
        if lp_children_path is not None:
            frame = read_table(
                lp_children_path, ["lp_value", "loinc_value", "weight"],
                float_columns=["weight"],
            )
            for row in frame.itertuples(index=False):
                lp_children.setdefault(CodeId(CodeSystem.LP, row.lp_value), []).append(
                    (CodeId(CodeSystem.LOINC, row.loinc_value), row.weight)
                )

        try:
            return cls.build(
                codes,
                descriptions=descriptions,
                site_membership=membership,
                hierarchy=hierarchy,
                lp_children=lp_children,
            )
        except ValueError as err:
            raise InputFormatError(codes_path, None, str(err))

    def save(
        self,
        codes_path: Path,
        hierarchy_path: Optional[Path] = None,
        lp_children_path: Optional[Path] = None,
    ) -> None:
        write_table(
            codes_path,
            ["system", "value", "description", "sites"],
            (
                (
                    c.system.value,
                    c.value,
                    self.descriptions.get(c, ""),
                    ",".join(sorted(self.site_membership.get(c, ()))),
                )
                for c in self.codes
            ),
        )
        if hierarchy_path is not None:
            write_table(
                hierarchy_path,
                ["child_system", "child_value", "parent_system", "parent_value"],
                (
                    (c.system.value, c.value, p.system.value, p.value)
                    for c, p in sorted(self.hierarchy.items())
                ),
            )
        if lp_children_path is not None:
            write_table(
                lp_children_path,
                ["lp_value", "loinc_value", "weight"],
                (
                    (lp.value, child.value, w)
                    for lp, kids in sorted(self.lp_children.items())
                    for child, w in kids
                ),
            )


def _parse_code(path: Path, i: int, system: str, value: str) -> CodeId:
    try:
        return CodeId.of(system, value)
    except ValueError as err:
        raise InputFormatError(path, i + 2, str(err))


def _check_acyclic(hierarchy: Mapping[CodeId, CodeId]) -> None:
    done: Set[CodeId] = set()
    for start in hierarchy:
        seen = []
        node: Optional[CodeId] = start
        while node is not None and node not in done:
            if node in seen:
                raise ValueError("Hierarchy has a cycle through %s" % node)
            seen.append(node)
            node = hierarchy.get(node)
        done.update(seen)


def _topmost_in_book(code: CodeId, book: CodeBook) -> CodeId:
    top = code
    node = book.hierarchy.get(code)
    while node is not None:
        if node in book.index:
            top = node
        node = book.hierarchy.get(node)
    if top == code and code.system == CodeSystem.LOINC:
        # LOINC codes reach their LP part through the LP-children table too
        parents = [p for p in book.lp_parents(code) if p in book.index]
        if parents:
            return _topmost_in_book(parents[0], book)
    return top


def branch_of(code: CodeId, book: CodeBook) -> str:
    """
    Branch key used to split hierarchical edges.

    * PheCode: integer part (``296.22`` -> ``296``)
    * CCAM: first four characters
    * LOINC and LP: the topmost ancestor present in the book
    * RxNorm: the grandparent

    Codes with a missing ancestor fall back to their own value.

    :raises ValueError: for other systems ("no branch rule").
    """
    system = code.system
    if system == CodeSystem.PHECODE:
        return code.value.split(".", 1)[0]
    if system == CodeSystem.CCAM:
        return code.value[:4]
    if system in (CodeSystem.LOINC, CodeSystem.LP):
        return _topmost_in_book(code, book).value
    if system == CodeSystem.RXNORM:
        parent = book.hierarchy.get(code)
        grandparent = book.hierarchy.get(parent) if parent is not None else None
        return grandparent.value if grandparent is not None else code.value
    raise ValueError("no branch rule for %s" % system.value)


def hierarchy_relatives(
    code: CodeId, book: CodeBook
) -> Tuple[FrozenSet[CodeId], FrozenSet[CodeId]]:
    """
    Return (siblings, cousins) of `code`.

    Siblings share its parent; cousins share its grandparent but not its
    parent. Neither set contains `code`.
    """
    parent = book.hierarchy.get(code)
    if parent is None:
        return frozenset(), frozenset()
    siblings = frozenset(c for c in book.children.get(parent, ()) if c != code)
    grandparent = book.hierarchy.get(parent)
    if grandparent is None:
        return siblings, frozenset()
    cousins = set()
    for uncle in book.children.get(grandparent, ()):
        if uncle != parent:
            cousins.update(book.children.get(uncle, ()))
    # Parents outside the book never appear in `children[grandparent]`
    for uncle, kids in book.children.items():
        if uncle != parent and book.hierarchy.get(uncle) == grandparent:
            cousins.update(kids)
    cousins.discard(code)
    return siblings, frozenset(cousins - siblings)
