"""
Knowledge-graph curation: which code pairs are similar, which are related,
which local codes map where, and which of them we hold out.

Edges come from four places:

* ontology hierarchies (:func:`build_hierarchy_edges`);
* relation-pair files, already resolved to code pairs
  (:func:`load_relation_pairs`);
* mapping and relevance candidates chosen by cosine similarity and labeled
  by an annotation oracle (:func:`generate_mapping_candidates`,
  :func:`generate_relevance_candidates`);
* feature scores for target codes.

:func:`split_by_branch` holds out 30% of them in a way that never lets a
validation pair leak into training, and :func:`curate` turns what is left
into the contrastive sets the trainer consumes.
"""
from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import (
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
)

import numpy as np

from .annotate import FeatureScore, Oracle
from .codebook import (
    CodeBook,
    CodeId,
    CodeSystem,
    branch_of,
    hierarchy_relatives,
    mapping_targets,
)
from .cooccur import SiteEmbedding
from .nn import unit_rows
from .textemb import DescriptionEmbedding
from .tsv import InputFormatError, MissingInputError, read_table, write_table

logger = logging.getLogger(__name__)

Pair = Tuple[CodeId, CodeId]


class EdgeFamily(enum.Enum):
    SIM_HIERARCHICAL = "sim_hierarchical"
    SIM_NONHIERARCHICAL = "sim_nonhierarchical"
    MAPPING = "mapping"
    RELATED = "related"
    FEATURE_POS = "feature_pos"

    @property
    def symmetric(self) -> bool:
        """Mapping edges run local -> standard, feature edges feature -> target."""
        return self not in (EdgeFamily.MAPPING, EdgeFamily.FEATURE_POS)


# When one pair turns up in several families, it stays in the first.
_FAMILY_PRIORITY = (
    EdgeFamily.SIM_HIERARCHICAL,
    EdgeFamily.MAPPING,
    EdgeFamily.SIM_NONHIERARCHICAL,
    EdgeFamily.RELATED,
)


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"


def pair_key(a: CodeId, b: CodeId) -> Pair:
    """The pair with its members sorted, so (a, b) and (b, a) match."""
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class Edge:
    a: CodeId
    b: CodeId
    family: EdgeFamily
    split: Optional[Split] = None
    relation: str = ""
    """Where the edge came from: a hierarchy rule or a relation name."""

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("Edge repeats %s" % self.a)
        if self.family.symmetric and self.b < self.a:
            raise ValueError("Edge %s, %s is not in canonical order" % (self.a, self.b))

    @classmethod
    def of(cls, a: CodeId, b: CodeId, family: EdgeFamily, relation: str = "") -> Edge:
        if family.symmetric:
            a, b = pair_key(a, b)
        return cls(a, b, family, None, relation)

    @property
    def key(self) -> Pair:
        return pair_key(self.a, self.b)

    def with_split(self, split: Split) -> Edge:
        if self.split is not None:
            raise ValueError("Edge %s, %s already has a split" % (self.a, self.b))
        return replace(self, split=split)


@dataclass(frozen=True)
class ContrastiveSet:
    anchor: CodeId
    positives: FrozenSet[CodeId]
    negatives: FrozenSet[CodeId]
    family: EdgeFamily

    def __post_init__(self):
        if self.positives & self.negatives:
            raise ValueError(
                "Anchor %s has codes that are both positive and negative" % self.anchor
            )
        if self.anchor in self.positives or self.anchor in self.negatives:
            raise ValueError("Anchor %s is its own partner" % self.anchor)


def _clique(codes: Sequence[CodeId], relation: str) -> Iterable[Edge]:
    for a, b in itertools.combinations(sorted(set(codes)), 2):
        yield Edge.of(a, b, EdgeFamily.SIM_HIERARCHICAL, relation)


def build_hierarchy_edges(book: CodeBook) -> List[Edge]:
    """
    Similarity edges from the structure of the standard systems.

    * PheCodes sharing an integer part (``296.1``, ``296.2``).
    * LOINC codes and their LP parents, and codes sharing an LP parent.
    * RxNorm leaves sharing a parent.
    * CCAM codes sharing their first four characters.
    """
    edges: Set[Edge] = set()

    groups: Dict[Tuple[CodeSystem, str], List[CodeId]] = {}
    for code in book.codes_of(CodeSystem.PHECODE):
        groups.setdefault((code.system, code.value.split(".", 1)[0]), []).append(code)
    for code in book.codes_of(CodeSystem.CCAM):
        groups.setdefault((code.system, code.value[:4]), []).append(code)
    for (system, _), members in groups.items():
        rule = "phecode_integer" if system == CodeSystem.PHECODE else "ccam_prefix"
        edges.update(_clique(members, rule))

    lp_members: Dict[CodeId, Set[CodeId]] = {}
    for code in book.codes_of(CodeSystem.LOINC, CodeSystem.LP):
        for lp in book.lp_parents(code):
            if lp in book.index:
                lp_members.setdefault(lp, set()).add(code)
    for lp, members in lp_members.items():
        for child in members:
            edges.add(Edge.of(child, lp, EdgeFamily.SIM_HIERARCHICAL, "lp_parent"))
        edges.update(_clique(list(members), "lp_sibling"))

    for parent, kids in book.children.items():
        if parent.system != CodeSystem.RXNORM:
            continue
        leaves = [
            c for c in kids if c.system == CodeSystem.RXNORM and c not in book.children
        ]
        edges.update(_clique(leaves, "rxnorm_sibling"))

    out = sorted(edges, key=lambda e: (e.a, e.b))
    logger.debug("Built %d hierarchy edges", len(out))
    return out


def build_contrastive_hierarchy(book: CodeBook) -> List[ContrastiveSet]:
    """
    Siblings as positives, cousins as negatives, for every code with a parent.

    Anchors with neither are omitted.
    """
    out = []
    for code in book.codes:
        siblings, cousins = hierarchy_relatives(code, book)
        if siblings or cousins:
            out.append(
                ContrastiveSet(code, siblings, cousins, EdgeFamily.SIM_HIERARCHICAL)
            )
    return out


def generate_mapping_candidates(
    local: CodeId,
    providers: Sequence[DescriptionEmbedding],
    standard_pool: Iterable[CodeId],
    book: CodeBook,
    k: int = 20,
) -> List[CodeId]:
    """
    Union of each provider's `k` nearest standard codes to `local`.

    Ordered by the best cosine any provider gives, then by row order.

    :raises ValueError: if the pool is empty.
    """
    pool = book.rows(sorted(set(standard_pool)))
    if len(pool) == 0:
        raise ValueError("No standard codes to map %s onto" % local)
    if k < 1:
        raise ValueError("k must be >= 1; got %d" % k)
    row = book.index[local]

    chosen: Set[int] = set()
    best = np.full(len(pool), -np.inf)
    for provider in providers:
        vectors = unit_rows(provider.matrix[np.append(pool, row)])
        cosine = vectors[:-1] @ vectors[-1]
        best = np.maximum(best, cosine)
        order = np.lexsort((pool, -cosine))
        chosen.update(int(i) for i in order[:k])
    picked = np.array(sorted(chosen), dtype=np.int64)
    order = np.lexsort((pool[picked], -best[picked]))
    return [book.codes[pool[i]] for i in picked[order]]


@dataclass(frozen=True)
class RelevanceCandidates:
    pairs: Tuple[Pair, ...]
    """Sorted, deduplicated, each pair in canonical order."""

    counts: Mapping[str, int]
    """``"site:SystemA-SystemB"`` -> number of pairs that site contributed."""


def _present_rows(book: CodeBook, system: CodeSystem, present: Set[int]) -> np.ndarray:
    return book.rows(c for c in book.codes_of(system) if book.index[c] in present)


def generate_relevance_candidates(
    site_embeddings: Sequence[SiteEmbedding],
    book: CodeBook,
    type_filter: Sequence[Tuple[CodeSystem, CodeSystem]],
    quantile: float = 0.001,
) -> RelevanceCandidates:
    """
    The top `quantile` of code pairs by cosine at each site, per type pair.

    At each site only codes the site embeds take part. A site with fewer than
    two codes of a type combination contributes nothing to it; otherwise it
    contributes ``ceil(quantile * #pairs)`` pairs, at least one.
    """
    if not 0 < quantile < 1:
        raise ValueError("quantile must be in (0, 1); got %r" % quantile)
    found: Set[Pair] = set()
    counts: Dict[str, int] = {}
    for embedding in site_embeddings:
        present = set(int(r) for r in embedding.present_rows)
        for system_a, system_b in type_filter:
            label = "%s:%s-%s" % (embedding.site, system_a.value, system_b.value)
            rows_a = _present_rows(book, system_a, present)
            rows_b = _present_rows(book, system_b, present)
            if system_a == system_b:
                if len(rows_a) < 2:
                    logger.warning("%s: fewer than 2 codes; no candidates", label)
                    counts[label] = 0
                    continue
                i, j = np.triu_indices(len(rows_a), k=1)
                left, right = rows_a[i], rows_a[j]
            else:
                if len(rows_a) == 0 or len(rows_b) == 0:
                    logger.warning("%s: too few codes; no candidates", label)
                    counts[label] = 0
                    continue
                left = np.repeat(rows_a, len(rows_b))
                right = np.tile(rows_b, len(rows_a))
            matrix = embedding.matrix
            cosine = np.einsum("ij,ij->i", matrix[left], matrix[right])
            n_top = max(1, math.ceil(quantile * len(cosine)))
            order = np.lexsort((right, left, -cosine))[:n_top]
            for i in order:
                found.add(pair_key(book.codes[left[i]], book.codes[right[i]]))
            counts[label] = int(n_top)
    return RelevanceCandidates(tuple(sorted(found)), counts)


@dataclass(frozen=True)
class RelationPair:
    """One row of a relation-pair file."""

    a: CodeId
    b: CodeId
    relation: str
    category: str
    """``similar`` or ``related``."""


_RELATION_COLUMNS = [
    "system_a",
    "value_a",
    "system_b",
    "value_b",
    "relation_name",
    "category",
]

_CATEGORIES = {
    "similar": EdgeFamily.SIM_NONHIERARCHICAL,
    "related": EdgeFamily.RELATED,
}


def load_relation_pairs(path: Path) -> List[RelationPair]:
    """
    Read ``system_a value_a system_b value_b relation_name category``.

    :raises InputFormatError: on an unknown system or category, or a pair
                              that repeats one code.
    """
    frame = read_table(
        path, _RELATION_COLUMNS
    )
    out = []
    for i, row in enumerate(frame.itertuples(index=False)):
        if row.category not in _CATEGORIES:
            raise InputFormatError(path, i + 2, "unknown category %r" % row.category)
        try:
            a = CodeId.of(row.system_a, row.value_a)
            b = CodeId.of(row.system_b, row.value_b)
        except ValueError as err:
            raise InputFormatError(path, i + 2, str(err))
        if a == b:
            raise InputFormatError(path, i + 2, "pair repeats %s" % a)
        out.append(RelationPair(a, b, row.relation_name, row.category))
    return out


def save_relation_pairs(path: Path, pairs: Iterable[RelationPair]) -> None:
    write_table(
        path,
        _RELATION_COLUMNS,
        (
            (
                p.a.system.value,
                p.a.value,
                p.b.system.value,
                p.b.value,
                p.relation,
                p.category,
            )
            for p in pairs
        ),
    )


def assign_units(
    units: Iterable, ratio: Tuple[int, int], rng: np.random.Generator
) -> Dict[object, Split]:
    """
    Shuffle sorted `units` and send the first ``round(n * train / total)`` to
    training.
    """
    ordered = sorted(set(units))
    n_train = int(math.floor(len(ordered) * ratio[0] / (ratio[0] + ratio[1]) + 0.5))
    order = rng.permutation(len(ordered))
    return {
        ordered[k]: Split.TRAIN if rank < n_train else Split.VALIDATION
        for rank, k in enumerate(order)
    }


def _branch_unit(code: CodeId, book: CodeBook) -> Tuple[str, str]:
    group = "LOINC" if code.system == CodeSystem.LP else code.system.value
    return (group, branch_of(code, book))


@dataclass(frozen=True)
class SplitResult:
    edges: Tuple[Edge, ...]
    """Every surviving edge, tagged."""

    dropped: Tuple[Edge, ...]
    """Hierarchy edges whose endpoints fell in differently-assigned branches."""


def split_by_branch(
    edges: Sequence[Edge],
    book: CodeBook,
    ratio: Tuple[int, int] = (7, 3),
    seed: int = 0,
) -> SplitResult:
    """
    Tag edges train or validation.

    * Hierarchical similarity: whole branches go one way. An edge between
      branches that went different ways is dropped.
    * Mapping: all edges of one local code go one way.
    * Feature: all edges of one target go one way.
    * Other similarity and relatedness: edge by edge.

    Each family draws from its own stream, so adding edges of one family
    never changes the split of another.
    """
    if ratio[0] < 0 or ratio[1] < 0 or sum(ratio) == 0:
        raise ValueError("Bad split ratio %r" % (ratio,))
    by_family: Dict[EdgeFamily, List[Edge]] = {}
    for edge in edges:
        by_family.setdefault(edge.family, []).append(edge)

    kept: List[Edge] = []
    dropped: List[Edge] = []
    for number, family in enumerate(EdgeFamily):
        members = by_family.get(family, [])
        if not members:
            continue
        rng = np.random.default_rng([seed, number])
        if family == EdgeFamily.SIM_HIERARCHICAL:
            units = [
                unit
                for e in members
                for unit in (_branch_unit(e.a, book), _branch_unit(e.b, book))
            ]
            assigned = assign_units(units, ratio, rng)
            for e in members:
                first = assigned[_branch_unit(e.a, book)]
                if first == assigned[_branch_unit(e.b, book)]:
                    kept.append(e.with_split(first))
                else:
                    dropped.append(e)
            continue
        if family == EdgeFamily.MAPPING:
            unit_of = lambda e: e.a  # noqa: E731
        elif family == EdgeFamily.FEATURE_POS:
            unit_of = lambda e: e.b  # noqa: E731
        else:
            unit_of = lambda e: (e.a, e.b, e.relation)  # noqa: E731
        assigned = assign_units((unit_of(e) for e in members), ratio, rng)
        kept.extend(e.with_split(assigned[unit_of(e)]) for e in members)

    if dropped:
        logger.info("Dropped %d hierarchy edges across split branches", len(dropped))
    kept.sort(key=lambda e: (e.family.value, e.a, e.b, e.relation))
    return SplitResult(tuple(kept), tuple(dropped))


def dedupe_families(edges: Iterable[Edge]) -> Tuple[List[Edge], int]:
    """
    Keep one edge per code pair across the similarity, mapping and
    relatedness families, preferring hierarchy, then mapping, then other
    similarity, then relatedness. Feature edges pass through.

    Returns (edges, number removed).
    """
    edges = list(edges)
    rank = {family: k for k, family in enumerate(_FAMILY_PRIORITY)}
    best: Dict[Pair, Edge] = {}
    passed: Dict[Tuple, Edge] = {}
    for edge in edges:
        if edge.family == EdgeFamily.FEATURE_POS:
            passed.setdefault((edge.a, edge.b), edge)
            continue
        current = best.get(edge.key)
        if current is None or rank[edge.family] < rank[current.family]:
            best[edge.key] = edge
    out = list(best.values()) + list(passed.values())
    out.sort(key=lambda e: (e.family.value, e.a, e.b))
    return out, len(edges) - len(out)


class _NegativeSampler:
    """Draws random codes of the same systems as an anchor's positives."""

    def __init__(self, book: CodeBook, rng: np.random.Generator):
        self._book = book
        self._rng = rng
        self._pools: Dict[FrozenSet[CodeSystem], List[CodeId]] = {}

    def _pool(self, systems: FrozenSet[CodeSystem]) -> List[CodeId]:
        if systems not in self._pools:
            ordered = sorted(systems, key=lambda s: s.value)
            self._pools[systems] = self._book.codes_of(*ordered)
        return self._pools[systems]

    def draw(
        self, like: Iterable[CodeId], exclude: Set[CodeId], n: int
    ) -> List[CodeId]:
        systems = frozenset(c.system for c in like)
        if n <= 0 or not systems:
            return []
        pool = self._pool(systems)
        if not pool:
            return []
        size = min(len(pool), n + len(exclude))
        picks = self._rng.choice(len(pool), size=size, replace=False)
        return [pool[i] for i in picks if pool[i] not in exclude][:n]


DEFAULT_RELEVANCE_TYPES = (
    (CodeSystem.PHECODE, CodeSystem.PHECODE),
    (CodeSystem.PHECODE, CodeSystem.RXNORM),
    (CodeSystem.PHECODE, CodeSystem.LOINC),
    (CodeSystem.PHECODE, CodeSystem.CCS),
)


@dataclass(frozen=True)
class CurationConfig:
    mapping_top_k: int = 20
    """Candidates per description provider for each local code."""

    relevance_quantile: float = 0.001
    """Share of same-site code pairs sent to the oracle, per type pair."""

    relevance_types: Tuple[Tuple[CodeSystem, CodeSystem], ...] = DEFAULT_RELEVANCE_TYPES

    feature_targets: Tuple[CodeId, ...] = ()
    """Codes to score features against. Empty means every PheCode."""

    feature_top: int = 20
    """Nearest codes per site considered as features of a target."""

    feature_random: int = 20
    """Random codes added to every target's features."""

    feature_threshold: float = 0.5
    """Scores at or above this are positive feature pairs; below, negative."""

    negatives: int = 5
    """Each anchor's negatives are topped up to this many with random codes."""

    split_ratio: Tuple[int, int] = (7, 3)

    seed: int = 0

    threads: int = 1


_EDGE_COLUMNS = [
    "a_system",
    "a_value",
    "b_system",
    "b_value",
    "family",
    "split",
    "relation",
]
_CONTRASTIVE_COLUMNS = [
    "family",
    "anchor_system",
    "anchor_value",
    "code_system",
    "code_value",
    "role",
]
_FEATURE_COLUMNS = ["a_system", "a_value", "b_system", "b_value", "score", "split"]


def dump_edges(path: Path, edges: Iterable[Edge]) -> None:
    """Write edges as TSV, one row per edge, with family and split columns."""
    write_table(
        path,
        _EDGE_COLUMNS,
        (
            (
                e.a.system.value,
                e.a.value,
                e.b.system.value,
                e.b.value,
                e.family.value,
                e.split.value if e.split else "",
                e.relation,
            )
            for e in edges
        ),
    )


def _parse_pair(path: Path, i: int, *fields: str) -> Tuple[CodeId, CodeId]:
    try:
        return CodeId.of(fields[0], fields[1]), CodeId.of(fields[2], fields[3])
    except ValueError as err:
        raise InputFormatError(path, i + 2, str(err))


def _roles(s: ContrastiveSet):
    return (("positive", s.positives), ("negative", s.negatives))


@dataclass(frozen=True)
class KnowledgeGraph:
    """Curated, split edges plus the training contrastive sets built from them."""

    edges: Tuple[Edge, ...]

    training: Mapping[EdgeFamily, Tuple[ContrastiveSet, ...]]

    feature_scores: Tuple[FeatureScore, ...] = ()

    feature_split: Mapping[CodeId, Split] = field(default_factory=dict)
    """Split of each scored feature target."""

    dropped: Mapping[str, int] = field(default_factory=dict)
    """Edges removed while curating, by reason."""

    relevance_counts: Mapping[str, int] = field(default_factory=dict)

    def edges_of(self, family: EdgeFamily, split: Optional[Split] = None) -> List[Edge]:
        return [
            e
            for e in self.edges
            if e.family == family and (split is None or e.split == split)
        ]

    def validation_mapping(self) -> Dict[CodeId, FrozenSet[CodeId]]:
        """Held-out local code -> its positive standard codes."""
        out: Dict[CodeId, Set[CodeId]] = {}
        for edge in self.edges_of(EdgeFamily.MAPPING, Split.VALIDATION):
            out.setdefault(edge.a, set()).add(edge.b)
        return {local: frozenset(targets) for local, targets in sorted(out.items())}

    def validation_features(self) -> Dict[CodeId, List[Tuple[CodeId, float]]]:
        """Held-out target -> [(feature, score)], in scoring order."""
        out: Dict[CodeId, List[Tuple[CodeId, float]]] = {}
        for score in self.feature_scores:
            if self.feature_split.get(score.target) == Split.VALIDATION:
                out.setdefault(score.target, []).append((score.feature, score.score))
        return dict(sorted(out.items()))

    def edge_counts(self) -> Dict[str, Dict[str, int]]:
        counts = {
            family.value: {split.value: 0 for split in Split} for family in EdgeFamily
        }
        for edge in self.edges:
            counts[edge.family.value][edge.split.value] += 1
        return counts

    def save(self, directory: Path) -> None:
        """
        Write ``edges.tsv``, ``contrastive.tsv``, ``feature_scores.tsv`` and
        ``summary.json`` into `directory`.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        dump_edges(directory / "edges.tsv", self.edges)
        write_table(
            directory / "contrastive.tsv",
            _CONTRASTIVE_COLUMNS,
            (
                (
                    family.value,
                    s.anchor.system.value,
                    s.anchor.value,
                    code.system.value,
                    code.value,
                    role,
                )
                for family in EdgeFamily
                for s in self.training.get(family, ())
                for role, codes in _roles(s)
                for code in sorted(codes)
            ),
        )
        write_table(
            directory / "feature_scores.tsv",
            _FEATURE_COLUMNS,
            (
                (
                    f.feature.system.value,
                    f.feature.value,
                    f.target.system.value,
                    f.target.value,
                    f.score,
                    self.feature_split[f.target].value,
                )
                for f in self.feature_scores
            ),
        )
        summary = {
            "edge_counts": self.edge_counts(),
            "dropped": dict(self.dropped),
            "relevance_counts": dict(self.relevance_counts),
        }
        (directory / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, directory: Path) -> KnowledgeGraph:
        directory = Path(directory)
        path = directory / "edges.tsv"
        edges = []
        frame = read_table(path, _EDGE_COLUMNS)
        for i, row in enumerate(frame.itertuples(index=False)):
            a, b = _parse_pair(
                path, i, row.a_system, row.a_value, row.b_system, row.b_value
            )
            try:
                family, split = EdgeFamily(row.family), Split(row.split)
                edges.append(Edge(a, b, family, split, row.relation))
            except ValueError as err:
                raise InputFormatError(path, i + 2, str(err))

        path = directory / "contrastive.tsv"
        members: Dict[Tuple[EdgeFamily, CodeId], Tuple[Set[CodeId], Set[CodeId]]] = {}
        frame = read_table(path, _CONTRASTIVE_COLUMNS)
        for i, row in enumerate(frame.itertuples(index=False)):
            anchor, code = _parse_pair(
                path,
                i,
                row.anchor_system,
                row.anchor_value,
                row.code_system,
                row.code_value,
            )
            try:
                family = EdgeFamily(row.family)
            except ValueError as err:
                raise InputFormatError(path, i + 2, str(err))
            if row.role not in ("positive", "negative"):
                raise InputFormatError(path, i + 2, "unknown role %r" % row.role)
            positives, negatives = members.setdefault((family, anchor), (set(), set()))
            (positives if row.role == "positive" else negatives).add(code)
        training: Dict[EdgeFamily, List[ContrastiveSet]] = {}
        for (family, anchor), (positives, negatives) in sorted(
            members.items(), key=lambda kv: (kv[0][0].value, kv[0][1])
        ):
            training.setdefault(family, []).append(
                ContrastiveSet(
                    anchor, frozenset(positives), frozenset(negatives), family
                )
            )

        path = directory / "feature_scores.tsv"
        scores = []
        feature_split = {}
        frame = read_table(path, _FEATURE_COLUMNS, float_columns=["score"])
        for i, row in enumerate(frame.itertuples(index=False)):
            feature, target = _parse_pair(
                path, i, row.a_system, row.a_value, row.b_system, row.b_value
            )
            try:
                scores.append(FeatureScore(feature, target, row.score))
                feature_split[target] = Split(row.split)
            except ValueError as err:
                raise InputFormatError(path, i + 2, str(err))

        path = directory / "summary.json"
        if not path.exists():
            raise MissingInputError(path)
        summary = json.loads(path.read_text())
        return cls(
            edges=tuple(edges),
            training={f: tuple(sets) for f, sets in training.items()},
            feature_scores=tuple(scores),
            feature_split=feature_split,
            dropped=summary.get("dropped", {}),
            relevance_counts=summary.get("relevance_counts", {}),
        )


# Random streams used by curate(), beside split_by_branch's per-family ones
_FEATURE_SPLIT_STREAM = 100
_FEATURE_PICK_STREAM = 101
_NEGATIVE_STREAM = 200


def _mapping_edges(
    book: CodeBook,
    providers: Sequence[DescriptionEmbedding],
    oracle: Oracle,
    config: CurationConfig,
) -> Tuple[List[Edge], Dict[CodeId, Set[CodeId]]]:
    if not providers:
        logger.warning("No description embeddings; skipping mapping candidates")
        return [], {}
    jobs = []
    for code in book.codes:
        targets = sorted(mapping_targets(code.system), key=lambda s: s.value)
        if not targets:
            continue
        pool = book.codes_of(*targets)
        if not pool:
            logger.warning("No standard codes to map %s onto", code)
            continue
        jobs.append((code, pool))

    def candidates(job):
        local, pool = job
        return generate_mapping_candidates(
            local, providers, pool, book, config.mapping_top_k
        )

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as executor:
        found = list(executor.map(candidates, jobs))
    pairs = [(job[0], std) for job, stds in zip(jobs, found) for std in stds]
    if not pairs:
        return [], {}
    edges = []
    hard: Dict[CodeId, Set[CodeId]] = {}
    for label in oracle.annotate_mapping(pairs):
        if label.positive:
            edges.append(
                Edge.of(label.local, label.standard, EdgeFamily.MAPPING, "oracle")
            )
        else:
            hard.setdefault(label.local, set()).add(label.standard)
    logger.info(
        "Mapping: %d candidates for %d local codes, %d positive",
        len(pairs),
        len(jobs),
        len(edges),
    )
    return edges, hard


def _relevance_edges(
    book: CodeBook,
    site_embeddings: Sequence[SiteEmbedding],
    oracle: Oracle,
    config: CurationConfig,
) -> Tuple[List[Edge], Dict[CodeId, Set[CodeId]], Mapping[str, int]]:
    found = generate_relevance_candidates(
        site_embeddings, book, config.relevance_types, config.relevance_quantile
    )
    edges = []
    hard: Dict[CodeId, Set[CodeId]] = {}
    if found.pairs:
        for label in oracle.annotate_relevance(found.pairs):
            if label.related:
                edges.append(Edge.of(label.a, label.b, EdgeFamily.RELATED, "oracle"))
            else:
                hard.setdefault(label.a, set()).add(label.b)
                hard.setdefault(label.b, set()).add(label.a)
    logger.info("Relevance: %d candidates, %d related", len(found.pairs), len(edges))
    return edges, hard, found.counts


def _feature_scores(
    book: CodeBook,
    site_embeddings: Sequence[SiteEmbedding],
    oracle: Oracle,
    config: CurationConfig,
) -> List[FeatureScore]:
    """
    Score, for each target, its nearest codes at every site plus some random
    ones.
    """
    if config.feature_targets:
        targets = [t for t in config.feature_targets if t in book.index]
        if len(targets) < len(config.feature_targets):
            logger.warning(
                "%d feature targets are not in the code book",
                len(config.feature_targets) - len(targets),
            )
    else:
        targets = book.codes_of(CodeSystem.PHECODE)
    rng = np.random.default_rng([config.seed, _FEATURE_PICK_STREAM])
    pairs = []
    for target in sorted(targets):
        row = book.index[target]
        chosen: Set[int] = set()
        for embedding in site_embeddings:
            if row not in embedding.present_rows:
                continue
            others = embedding.present_rows[embedding.present_rows != row]
            cosine = embedding.matrix[others] @ embedding.matrix[row]
            order = np.lexsort((others, -cosine))[: config.feature_top]
            chosen.update(int(others[i]) for i in order)
        n_random = min(config.feature_random, book.size - 1)
        if n_random > 0:
            picks = rng.choice(book.size - 1, size=n_random, replace=False)
            # skip over the target's own row
            chosen.update(int(i) + (1 if i >= row else 0) for i in picks)
        pairs.extend((book.codes[i], target) for i in sorted(chosen))
    if not pairs:
        return []
    return oracle.score_features(pairs)


def _partners(edges: Iterable[Edge]) -> Dict[CodeId, Set[CodeId]]:
    out: Dict[CodeId, Set[CodeId]] = {}
    for edge in edges:
        out.setdefault(edge.a, set()).add(edge.b)
        out.setdefault(edge.b, set()).add(edge.a)
    return out


def _training_sets(
    book: CodeBook,
    edges: Sequence[Edge],
    seeds: Mapping[EdgeFamily, Mapping[CodeId, Set[CodeId]]],
    config: CurationConfig,
) -> Dict[EdgeFamily, Tuple[ContrastiveSet, ...]]:
    """
    Positives from training edges. Negatives from `seeds` (cousins, labeled
    negatives), topped up with random codes of the positives' systems.

    Known partners of an anchor are never its negatives, and no validation
    pair appears at all.
    """
    known = _partners(edges)
    held_out = _partners(e for e in edges if e.split == Split.VALIDATION)
    positives: Dict[EdgeFamily, Dict[CodeId, Set[CodeId]]] = {f: {} for f in EdgeFamily}
    for edge in edges:
        if edge.split != Split.TRAIN:
            continue
        family = positives[edge.family]
        if edge.family == EdgeFamily.FEATURE_POS:
            family.setdefault(edge.b, set()).add(edge.a)
            continue
        family.setdefault(edge.a, set()).add(edge.b)
        if edge.family.symmetric:
            family.setdefault(edge.b, set()).add(edge.a)

    out = {}
    for number, family in enumerate(EdgeFamily):
        rng = np.random.default_rng([config.seed, _NEGATIVE_STREAM + number])
        sampler = _NegativeSampler(book, rng)
        family_seeds = seeds.get(family, {})
        sets = []
        anchors = set(positives[family])
        if family in (EdgeFamily.MAPPING, EdgeFamily.FEATURE_POS):
            # labeled negatives alone still make a set
            anchors.update(family_seeds)
        for anchor in sorted(anchors):
            pos = positives[family].get(anchor, set())
            banned = held_out.get(anchor, set()) | pos | {anchor}
            if family != EdgeFamily.FEATURE_POS:
                # feature negatives are labeled; other families trust no partner
                banned = banned | known.get(anchor, set())
            neg = set(family_seeds.get(anchor, ())) - banned
            if family != EdgeFamily.FEATURE_POS and pos:
                need = config.negatives - len(neg)
                neg.update(sampler.draw(sorted(pos), banned | neg, need))
            if pos or neg:
                sets.append(
                    ContrastiveSet(anchor, frozenset(pos), frozenset(neg), family)
                )
        out[family] = tuple(sets)
    return out


def curate(
    book: CodeBook,
    *,
    site_embeddings: Sequence[SiteEmbedding],
    providers: Sequence[DescriptionEmbedding],
    oracle: Oracle,
    relation_pairs: Sequence[RelationPair] = (),
    config: CurationConfig = CurationConfig(),
) -> KnowledgeGraph:
    """
    Assemble the knowledge graph: collect edges from every source, dedupe
    them, split them, and build the training contrastive sets.

    A training edge whose pair is also held out in another family is dropped.

    :raises OracleError: if the oracle fails.
    :raises RuntimeError: if the result fails :func:`check_split_hygiene`.
    """
    edges = build_hierarchy_edges(book)

    unknown = 0
    for rp in relation_pairs:
        if rp.a not in book.index or rp.b not in book.index:
            unknown += 1
            continue
        edges.append(Edge.of(rp.a, rp.b, _CATEGORIES[rp.category], rp.relation))
    if unknown:
        logger.warning("Skipped %d relation pairs with unknown codes", unknown)

    mapping, hard_mapping = _mapping_edges(book, providers, oracle, config)
    related, hard_related, relevance_counts = _relevance_edges(
        book, site_embeddings, oracle, config
    )
    scores = _feature_scores(book, site_embeddings, oracle, config)
    feature_edges = [
        Edge.of(s.feature, s.target, EdgeFamily.FEATURE_POS, "oracle")
        for s in scores
        if s.score >= config.feature_threshold
    ]
    edges, duplicates = dedupe_families(edges + mapping + related + feature_edges)

    feature_split = assign_units(
        (s.target for s in scores),
        config.split_ratio,
        np.random.default_rng([config.seed, _FEATURE_SPLIT_STREAM]),
    )
    result = split_by_branch(
        [e for e in edges if e.family != EdgeFamily.FEATURE_POS],
        book,
        config.split_ratio,
        config.seed,
    )
    tagged = list(result.edges) + [
        e.with_split(feature_split[e.b])
        for e in edges
        if e.family == EdgeFamily.FEATURE_POS
    ]
    held_out = {e.key for e in tagged if e.split == Split.VALIDATION}
    kept = [e for e in tagged if e.split == Split.VALIDATION or e.key not in held_out]
    kept.sort(key=lambda e: (e.family.value, e.a, e.b, e.relation))

    held_out_locals = {e.a for e in kept if e.family == EdgeFamily.MAPPING}
    held_out_locals -= {
        e.a for e in kept if e.family == EdgeFamily.MAPPING and e.split == Split.TRAIN
    }
    feature_negatives: Dict[CodeId, Set[CodeId]] = {}
    for s in scores:
        negative = s.score < config.feature_threshold
        if negative and feature_split[s.target] == Split.TRAIN:
            feature_negatives.setdefault(s.target, set()).add(s.feature)
    seeds = {
        EdgeFamily.SIM_HIERARCHICAL: {
            s.anchor: set(s.negatives) for s in build_contrastive_hierarchy(book)
        },
        EdgeFamily.MAPPING: {
            local: negatives
            for local, negatives in hard_mapping.items()
            if local not in held_out_locals
        },
        EdgeFamily.RELATED: hard_related,
        EdgeFamily.FEATURE_POS: feature_negatives,
    }
    graph = KnowledgeGraph(
        edges=tuple(kept),
        training=_training_sets(book, kept, seeds, config),
        feature_scores=tuple(scores),
        feature_split=feature_split,
        dropped={
            "straddling": len(result.dropped),
            "duplicate": duplicates,
            "leak": len(tagged) - len(kept),
            "unknown_relation_codes": unknown,
        },
        relevance_counts=relevance_counts,
    )
    problems = check_split_hygiene(graph, book)
    if problems:
        raise RuntimeError("Split hygiene failed: %s" % "; ".join(problems[:5]))
    for family, counts in graph.edge_counts().items():
        logger.info(
            "%s edges: %d train, %d validation",
            family,
            counts["train"],
            counts["validation"],
        )
    return graph


def check_split_hygiene(graph: KnowledgeGraph, book: CodeBook) -> List[str]:
    """
    Every way a validation pair could reach training. Empty means clean.

    * a validation edge, in either direction, that is also a training edge;
    * a validation pair inside a training contrastive set;
    * a validation feature target with a training set;
    * a hierarchy branch with edges in both splits.
    """
    problems = []
    validation = {e.key for e in graph.edges if e.split == Split.VALIDATION}
    training = {e.key for e in graph.edges if e.split == Split.TRAIN}
    for a, b in sorted(validation & training):
        problems.append("%s, %s is in both splits" % (a, b))
    for family in EdgeFamily:
        for s in graph.training.get(family, ()):
            for code in sorted(s.positives | s.negatives):
                if pair_key(s.anchor, code) in validation:
                    problems.append(
                        "%s set of %s uses validation pair with %s"
                        % (family.value, s.anchor, code)
                    )
    for s in graph.training.get(EdgeFamily.FEATURE_POS, ()):
        if graph.feature_split.get(s.anchor) == Split.VALIDATION:
            problems.append("validation feature target %s is trained on" % s.anchor)
    branch_splits: Dict[Tuple[str, str], Set[Split]] = {}
    for edge in graph.edges_of(EdgeFamily.SIM_HIERARCHICAL):
        for code in (edge.a, edge.b):
            branch_splits.setdefault(_branch_unit(code, book), set()).add(edge.split)
    for unit, splits in sorted(branch_splits.items()):
        if len(splits) > 1:
            problems.append("branch %s:%s has edges in both splits" % unit)
    return problems
