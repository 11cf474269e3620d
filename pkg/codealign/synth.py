"""
Synthetic multi-site corpora with planted ground truth.

Every concept gets one standard code that all sites share and a few local
codes per site whose descriptions repeat the concept name plus a noise
suffix. Concepts of one kind come in families of three that share a
hierarchy parent. A random relatedness graph links concepts across
families, and related concepts tend to turn up on the same day.

Patients belong to one of a few subgroups. A subgroup favors some of the
target concept's neighbors and has its own outcome rate, so clustering
patients on the target's features should separate the outcome rates. The
target itself only appears as the last event of every patient.

Everything is drawn from :class:`numpy.random.Generator` streams seeded from
``(seed, purpose, ...)``; a patient's stream depends on its site and number
only, so patients can be generated in any order or in parallel.
"""
from __future__ import annotations

import datetime
import itertools
import json
import logging
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .annotate import SyntheticOracle
from .codebook import CodeBook, CodeId, CodeSystem
from .evalx import GoldMapping, save_gold_mappings
from .kgraph import RelationPair, save_relation_pairs
from .stratify import Outcome, PatientRecord, save_patient_events

logger = logging.getLogger(__name__)

KINDS = ("diag", "lab", "med", "proc")

_LOCAL_SYSTEM = {
    "diag": CodeSystem.OTHER,
    "lab": CodeSystem.LOCAL_LAB,
    "med": CodeSystem.LOCAL_MED,
    "proc": CodeSystem.LOCAL_PX,
}

_NOUN = {
    "diag": "disorder",
    "lab": "level in blood",
    "med": "oral tablet",
    "proc": "repair",
}

_RELATION_NAME = {
    ("diag", "lab"): "may_diagnose",
    ("diag", "med"): "may_treat",
    ("diag", "proc"): "may_treat",
}

FAMILY_SIZE = 3

CORPUS_FILES = {
    "codes": "codes.tsv",
    "hierarchy": "hierarchy.tsv",
    "lp_children": "lp_children.tsv",
    "events": "events.tsv",
    "relations": "relations.tsv",
    "gold_mapping": "gold_mapping.tsv",
    "truth": "truth.json",
}
"""File names :meth:`SyntheticCorpus.save` writes inside its directory."""

# Stream numbers for np.random.default_rng([seed, stream, ...])
_NAMES, _GRAPH, _MIXTURE, _NOISE, _PATIENT = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class SynthConfig:
    n_concepts: int = 50

    n_sites: int = 3

    codes_per_concept_per_site: int = 2
    """The shared standard code plus this many minus one local codes."""

    n_patients_per_site: int = 1000

    events_per_patient: int = 60
    """Mixture draws per patient; the index event of the target comes on top."""

    relatedness_density: float = 0.05
    """Probability that two concepts of different families are related."""

    subgroup_count: int = 2

    outcome_rates: Tuple[float, ...] = (0.8, 0.2)
    """Outcome probability of each subgroup."""

    noise_suffix: int = 4
    """Random letters appended to each local code's description."""

    related_boost: float = 0.5
    """Probability that a draw also emits a related concept on a nearby day."""

    subgroup_boost: float = 8.0
    """Mixture weight of a subgroup's marker concepts, in mean base weights."""

    span_days: int = 730
    """Days between a patient's first possible event and the index event."""

    seed: int = 0

    def __post_init__(self):
        positive = [
            "n_concepts",
            "n_sites",
            "codes_per_concept_per_site",
            "n_patients_per_site",
            "events_per_patient",
            "subgroup_count",
            "span_days",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(
                    "%s must be >= 1; got %r" % (name, getattr(self, name))
                )
        if self.n_concepts <= 2 * self.subgroup_count:
            raise ValueError(
                "Need more than %d concepts for %d subgroups; got %d"
                % (2 * self.subgroup_count, self.subgroup_count, self.n_concepts)
            )
        if len(self.outcome_rates) != self.subgroup_count:
            raise ValueError(
                "Got %d outcome rates for %d subgroups"
                % (len(self.outcome_rates), self.subgroup_count)
            )
        for name in ("relatedness_density", "related_boost"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError("%s must be in [0, 1]" % name)
        if not all(0.0 <= r <= 1.0 for r in self.outcome_rates):
            raise ValueError("Outcome rates must be in [0, 1]")
        if self.subgroup_boost <= 0 or self.noise_suffix < 0:
            raise ValueError("subgroup_boost must be > 0 and noise_suffix >= 0")

    @property
    def sites(self) -> List[str]:
        return ["site%d" % (m + 1) for m in range(self.n_sites)]


@dataclass(frozen=True)
class GroundTruth:
    concept_of: Mapping[CodeId, int]
    """Every generated code -> its concept. An LP code takes the concept of
    its first LOINC child."""

    related: Tuple[Tuple[int, int], ...]
    """Undirected concept edges, each as (lower, higher), sorted."""

    subgroup_of: Mapping[str, int]
    """Patient id -> subgroup."""

    outcome_rates: Tuple[float, ...]

    concept_names: Tuple[str, ...] = ()

    target: Optional[CodeId] = None
    """Standard code of the concept whose neighbors mark the subgroups."""

    def oracle(self) -> SyntheticOracle:
        return SyntheticOracle(self.concept_of, self.related)

    def codes_of_concept(self) -> Dict[int, List[CodeId]]:
        out: Dict[int, List[CodeId]] = {}
        for code, concept in sorted(self.concept_of.items()):
            out.setdefault(concept, []).append(code)
        return out

    def gold_mappings(self) -> List[GoldMapping]:
        """Each local code against the standard codes of its concept."""
        out = []
        for codes in self.codes_of_concept().values():
            local = [c for c in codes if not c.system.is_standard]
            standard = [c for c in codes if c.system.is_standard]
            out.extend(GoldMapping(a, b) for a in local for b in standard)
        return out

    def as_dict(self) -> Dict[str, object]:
        return {
            "concepts": [[str(c), n] for c, n in sorted(self.concept_of.items())],
            "related": [list(edge) for edge in self.related],
            "subgroups": dict(sorted(self.subgroup_of.items())),
            "outcome_rates": list(self.outcome_rates),
            "concept_names": list(self.concept_names),
            "target": None if self.target is None else str(self.target),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> GroundTruth:
        target = data.get("target")
        return cls(
            concept_of={CodeId.parse(c): int(n) for c, n in data["concepts"]},
            related=tuple((int(a), int(b)) for a, b in data["related"]),
            subgroup_of={str(p): int(g) for p, g in data["subgroups"].items()},
            outcome_rates=tuple(float(r) for r in data["outcome_rates"]),
            concept_names=tuple(data.get("concept_names", ())),
            target=None if target is None else CodeId.parse(target),
        )

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> GroundTruth:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SyntheticCorpus:
    book: CodeBook

    records: Tuple[PatientRecord, ...]
    """All sites' patients, sorted by id."""

    truth: GroundTruth

    relations: Tuple[RelationPair, ...] = field(default=())
    """Related standard-code pairs, the corpus' relation-pair file."""

    def save(self, directory: Path) -> Dict[str, Path]:
        """Write every file of :data:`CORPUS_FILES`; return their paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {key: directory / name for key, name in CORPUS_FILES.items()}
        self.book.save(paths["codes"], paths["hierarchy"], paths["lp_children"])
        save_patient_events(paths["events"], self.records)
        save_relation_pairs(paths["relations"], self.relations)
        save_gold_mappings(paths["gold_mapping"], self.truth.gold_mappings())
        self.truth.save(paths["truth"])
        return paths


# -- concepts ----------------------------------------------------------------


def _stem(rng: np.random.Generator) -> str:
    consonants, vowels = "bdfgklmnprstvz", "aeiou"
    return "".join(
        consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
        for _ in range(3)
    )


def _concept_names(cfg: SynthConfig) -> List[str]:
    rng = np.random.default_rng([cfg.seed, _NAMES])
    names: List[str] = []
    seen = set()
    for i in range(cfg.n_concepts):
        stem = _stem(rng)
        while stem in seen:
            stem = _stem(rng)
        seen.add(stem)
        names.append("%s %s" % (stem, _NOUN[KINDS[i % len(KINDS)]]))
    return names


def _family(concept: int) -> Tuple[str, int, int]:
    """(kind, family number within the kind, member number within the family)"""
    kind = KINDS[concept % len(KINDS)]
    rank = concept // len(KINDS)
    return kind, rank // FAMILY_SIZE, rank % FAMILY_SIZE


def _standard_code(concept: int) -> CodeId:
    kind, family, member = _family(concept)
    if kind == "diag":
        return CodeId(CodeSystem.PHECODE, "%d.%d" % (100 + family, member + 1))
    if kind == "lab":
        return CodeId(CodeSystem.LOINC, "%d-%d" % (1000 + 10 * family + member, member))
    if kind == "med":
        return CodeId(CodeSystem.RXNORM, "%d" % (30000 + 10 * family + member))
    return CodeId(CodeSystem.CCS, "%d" % (1 + concept // len(KINDS)))


def _local_code(concept: int, site: str, k: int) -> CodeId:
    kind = KINDS[concept % len(KINDS)]
    return CodeId(_LOCAL_SYSTEM[kind], "%s-%s-%03d-%d" % (site, kind, concept, k))


def _noise(rng: np.random.Generator, length: int) -> str:
    letters = string.ascii_lowercase
    return "".join(letters[i] for i in rng.integers(len(letters), size=length))


def _relatedness(cfg: SynthConfig) -> Tuple[Tuple[int, int], ...]:
    """
    Random edges between concepts of different families, plus edges from
    concept 0 (the target) to concepts 1 .. 2 * subgroup_count.
    """
    rng = np.random.default_rng([cfg.seed, _GRAPH])
    edges = set()
    for a, b in itertools.combinations(range(cfg.n_concepts), 2):
        draw = rng.random()
        same_family = _family(a)[:2] == _family(b)[:2]
        if not same_family and draw < cfg.relatedness_density:
            edges.add((a, b))
    for neighbor in range(1, 2 * cfg.subgroup_count + 1):
        if _family(0)[:2] != _family(neighbor)[:2]:
            edges.add((0, neighbor))
    return tuple(sorted(edges))


def _markers(cfg: SynthConfig, group: int) -> List[int]:
    return [
        n for n in range(1, 2 * cfg.subgroup_count + 1)
        if (n - 1) % cfg.subgroup_count == group
    ]


def _mixtures(cfg: SynthConfig) -> np.ndarray:
    """subgroup_count x n_concepts draw probabilities."""
    rng = np.random.default_rng([cfg.seed, _MIXTURE])
    base = rng.gamma(1.0, size=cfg.n_concepts)
    weights = np.tile(base, (cfg.subgroup_count, 1))
    for group in range(cfg.subgroup_count):
        weights[group, _markers(cfg, group)] = cfg.subgroup_boost * base.mean()
    # the target only shows up as the index event
    weights[:, 0] = 0.0
    return weights / weights.sum(axis=1, keepdims=True)


def build_codebook(cfg: SynthConfig, names: Sequence[str]) -> Tuple[CodeBook, Dict]:
    """The corpus' codes, descriptions, sites and hierarchy, plus code -> concept."""
    rng = np.random.default_rng([cfg.seed, _NOISE])
    sites = cfg.sites
    concept_of: Dict[CodeId, int] = {}
    descriptions: Dict[CodeId, str] = {}
    membership: Dict[CodeId, FrozenSet[str]] = {}
    hierarchy: Dict[CodeId, CodeId] = {}
    lp_children: Dict[CodeId, List[Tuple[CodeId, float]]] = {}

    for concept in range(cfg.n_concepts):
        kind, family, member = _family(concept)
        standard = _standard_code(concept)
        concept_of[standard] = concept
        descriptions[standard] = names[concept]
        membership[standard] = frozenset(sites)
        for site in sites:
            for k in range(1, cfg.codes_per_concept_per_site):
                local = _local_code(concept, site, k)
                concept_of[local] = concept
                descriptions[local] = "%s %s" % (
                    names[concept],
                    _noise(rng, cfg.noise_suffix),
                )
                membership[local] = frozenset([site])

        if kind == "diag":
            hierarchy[standard] = CodeId(CodeSystem.PHECODE, "%d" % (100 + family))
        elif kind == "lab":
            lp = CodeId(CodeSystem.LP, "LP%d" % (1000 + family))
            lp_children.setdefault(lp, []).append((standard, 1.0))
            if member == 0:
                concept_of[lp] = concept
                descriptions[lp] = "%s panel" % names[concept].split(" ", 1)[0]
                membership[lp] = frozenset(sites)
        elif kind == "med":
            parent = CodeId(CodeSystem.RXNORM, "%d" % (3000 + family))
            hierarchy[standard] = parent
            hierarchy[parent] = CodeId(CodeSystem.RXNORM, "%d" % (300 + family // 2))

    book = CodeBook.build(
        concept_of,
        descriptions=descriptions,
        site_membership=membership,
        hierarchy=hierarchy,
        lp_children=lp_children,
    )
    return book, concept_of


def _relation_pairs(related: Sequence[Tuple[int, int]]) -> List[RelationPair]:
    out = []
    for a, b in related:
        kinds = tuple(sorted((KINDS[a % len(KINDS)], KINDS[b % len(KINDS)])))
        name = _RELATION_NAME.get(kinds, "associated_with")
        out.append(RelationPair(_standard_code(a), _standard_code(b), name, "related"))
    return out


# -- patients ----------------------------------------------------------------


@dataclass(frozen=True)
class _World:
    """What patient generation reads, shared by every worker."""

    cfg: SynthConfig
    site_codes: Mapping[Tuple[str, int], Tuple[CodeId, ...]]
    """(site, concept) -> the codes of the concept used at the site."""
    neighbors: Mapping[int, Tuple[int, ...]]
    mixtures: np.ndarray
    start: datetime.date


def _patient(world: _World, site_number: int, number: int) -> Tuple[PatientRecord, int]:
    cfg = world.cfg
    site = cfg.sites[site_number]
    rng = np.random.default_rng([cfg.seed, _PATIENT, site_number, number])
    group = int(rng.integers(cfg.subgroup_count))
    first = world.start + datetime.timedelta(days=int(rng.integers(365)))

    def emit(concept: int, day: int):
        codes = world.site_codes[(site, concept)]
        code = codes[int(rng.integers(len(codes)))]
        return (code, first + datetime.timedelta(days=day))

    events = []
    while len(events) < cfg.events_per_patient:
        concept = int(rng.choice(cfg.n_concepts, p=world.mixtures[group]))
        day = int(rng.integers(cfg.span_days))
        events.append(emit(concept, day))
        partners = world.neighbors.get(concept, ())
        if (
            partners
            and len(events) < cfg.events_per_patient
            and rng.random() < cfg.related_boost
        ):
            partner = partners[int(rng.integers(len(partners)))]
            later = min(day + int(rng.integers(8)), cfg.span_days - 1)
            events.append(emit(partner, later))
    # the index event closes the baseline window
    events.append(emit(0, cfg.span_days))

    outcome = Outcome(
        bool(rng.random() < cfg.outcome_rates[group]), int(rng.integers(1, 366))
    )
    record = PatientRecord(
        "%s-%05d" % (site, number),
        site,
        tuple(sorted(events, key=lambda e: (e[1], e[0]))),
        outcome,
        int(rng.integers(18, 90)),
    )
    return record, group


def generate_corpus(
    cfg: SynthConfig = SynthConfig(), threads: int = 1
) -> SyntheticCorpus:
    """
    Draw a corpus. The result depends on `cfg` only, never on `threads`.

    :raises ValueError: if `cfg` is infeasible (checked when it is built).
    """
    names = _concept_names(cfg)
    book, concept_of = build_codebook(cfg, names)
    related = _relatedness(cfg)
    neighbors: Dict[int, List[int]] = {}
    for a, b in related:
        neighbors.setdefault(a, []).append(b)
        neighbors.setdefault(b, []).append(a)

    site_codes: Dict[Tuple[str, int], List[CodeId]] = {}
    for code, concept in concept_of.items():
        if code.system == CodeSystem.LP:
            continue
        for site in book.site_membership[code]:
            site_codes.setdefault((site, concept), []).append(code)
    world = _World(
        cfg,
        {key: tuple(sorted(codes)) for key, codes in site_codes.items()},
        {c: tuple(sorted(set(n) - {0})) for c, n in neighbors.items()},
        _mixtures(cfg),
        datetime.date(2015, 1, 1),
    )

    jobs = [
        (m, number)
        for m in range(cfg.n_sites)
        for number in range(cfg.n_patients_per_site)
    ]
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        drawn = list(pool.map(lambda job: _patient(world, *job), jobs))

    records = tuple(sorted((r for r, _ in drawn), key=lambda r: r.patient_id))
    truth = GroundTruth(
        concept_of=concept_of,
        related=related,
        subgroup_of={r.patient_id: g for r, g in drawn},
        outcome_rates=tuple(float(r) for r in cfg.outcome_rates),
        concept_names=tuple(names),
        target=_standard_code(0),
    )
    logger.info(
        "Generated %d codes, %d relatedness edges, %d patients",
        book.size,
        len(related),
        len(records),
    )
    return SyntheticCorpus(book, records, truth, tuple(_relation_pairs(related)))
