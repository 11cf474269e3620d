"""
Annotation oracles: who decides whether a candidate pair is a real mapping,
whether two codes are clinically related, and how relevant a feature is.

Every oracle answers in batches and answers deterministically given its
backing data. Three ship here:

* :class:`SyntheticOracle` reads the planted truth of a synthetic corpus.
* :class:`FileOracle` reads label fixtures (TSV).
* :class:`codealign.client.RemoteOracle` asks a JSON-over-HTTP service.

Wrap any of them in :class:`CachingOracle` to record every answer in an
append-only JSON-lines file, so a rerun never asks twice.
"""
from __future__ import annotations

import abc
import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .codebook import CodeId
from .textemb import load_descriptions
from .tsv import InputFormatError, read_table

logger = logging.getLogger(__name__)

Pair = Tuple[CodeId, CodeId]


class OracleError(RuntimeError):
    """The oracle failed, or answered outside its contract."""


@dataclass(frozen=True)
class MappingLabel:
    local: CodeId
    standard: CodeId
    positive: bool

    def __post_init__(self):
        if self.local.system.is_standard:
            raise ValueError("Mapping source %s is a standard code" % self.local)
        if not self.standard.system.is_standard:
            raise ValueError("Mapping target %s is not a standard code" % self.standard)


@dataclass(frozen=True)
class RelevanceLabel:
    a: CodeId
    b: CodeId
    related: bool

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("Relevance pair repeats %s" % self.a)


@dataclass(frozen=True)
class FeatureScore:
    feature: CodeId
    target: CodeId
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("Feature score %r is outside [0, 1]" % self.score)


def require_items(items: Sequence, task: str) -> None:
    if not items:
        raise ValueError("No %s items to annotate" % task)


class Oracle(abc.ABC):
    name: str = "oracle"
    """Identifies the oracle in cache keys."""

    @abc.abstractmethod
    def annotate_mapping(self, candidates: Sequence[Pair]) -> List[MappingLabel]:
        """One verdict per (local, standard) candidate, in order."""

    @abc.abstractmethod
    def annotate_relevance(self, pairs: Sequence[Pair]) -> List[RelevanceLabel]:
        """One verdict per pair, in order."""

    @abc.abstractmethod
    def score_features(self, pairs: Sequence[Pair]) -> List[FeatureScore]:
        """One score in [0, 1] per (feature, target) pair, in order."""

    def score_feature(self, feature: CodeId, target: CodeId) -> FeatureScore:
        return self.score_features([(feature, target)])[0]

    def expand_descriptions(self, items: Sequence[Tuple[CodeId, str]]) -> List[str]:
        """
        Rewrite descriptions (expand abbreviations, translate).

        The default leaves them as they are.
        """
        return [text for _, text in items]


class SyntheticOracle(Oracle):
    """
    Labels from planted concepts.

    :param concept_of: code -> concept id. Codes without a concept are never
                       positive.
    :param related_concepts: undirected edges of the planted relatedness graph.
    """

    name = "synthetic"

    def __init__(
        self,
        concept_of: Mapping[CodeId, int],
        related_concepts: Iterable[Tuple[int, int]],
    ):
        self._concept_of = dict(concept_of)
        self._related = {frozenset(edge) for edge in related_concepts}

    def _same(self, a: CodeId, b: CodeId) -> bool:
        ca, cb = self._concept_of.get(a), self._concept_of.get(b)
        return ca is not None and ca == cb

    def _adjacent(self, a: CodeId, b: CodeId) -> bool:
        ca, cb = self._concept_of.get(a), self._concept_of.get(b)
        if ca is None or cb is None:
            return False
        return frozenset((ca, cb)) in self._related

    def annotate_mapping(self, candidates: Sequence[Pair]) -> List[MappingLabel]:
        require_items(candidates, "mapping")
        return [MappingLabel(a, b, self._same(a, b)) for a, b in candidates]

    def annotate_relevance(self, pairs: Sequence[Pair]) -> List[RelevanceLabel]:
        require_items(pairs, "relevance")
        return [
            RelevanceLabel(a, b, self._same(a, b) or self._adjacent(a, b))
            for a, b in pairs
        ]

    def score_features(self, pairs: Sequence[Pair]) -> List[FeatureScore]:
        require_items(pairs, "feature")
        return [
            FeatureScore(f, t, 1.0 if self._same(f, t) or self._adjacent(f, t) else 0.0)
            for f, t in pairs
        ]


def _read_pairs(path: Path, value_column: str) -> Dict:
    columns = ["a_system", "a_value", "b_system", "b_value", value_column]
    frame = read_table(path, columns)
    out = {}
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            key = (
                CodeId.of(row.a_system, row.a_value),
                CodeId.of(row.b_system, row.b_value),
            )
        except ValueError as err:
            raise InputFormatError(path, i + 2, str(err))
        out[key] = (i + 2, getattr(row, value_column))
    return out


_VERDICTS = {
    "positive": True,
    "negative": False,
    "related": True,
    "unrelated": False,
}


class FileOracle(Oracle):
    """
    Labels read from fixture TSVs in a directory.

    * ``mapping.tsv``: ``a_system a_value b_system b_value verdict``
      (verdict ``positive`` or ``negative``; a is the local code)
    * ``relevance.tsv``: same columns, verdict ``related`` or ``unrelated``;
      pairs match in either order
    * ``features.tsv``: ``a_system a_value b_system b_value score``
      (a is the feature, b the target)
    * ``descriptions.tsv`` (optional): ``system value description``

    Missing files behave like empty fixtures. Asking about a pair the
    fixture lacks raises :class:`OracleError`.
    """

    name = "file"

    def __init__(self, directory: Path):
        directory = Path(directory)
        self._mapping = self._load_verdicts(directory / "mapping.tsv")
        relevance = self._load_verdicts(directory / "relevance.tsv")
        self._relevance = {frozenset(k): v for k, v in relevance.items()}
        self._features = {}
        path = directory / "features.tsv"
        if path.exists():
            for key, (line, value) in _read_pairs(path, "score").items():
                try:
                    score = float(value)
                except ValueError:
                    raise InputFormatError(
                        path, line, "score %r is not a number" % value
                    )
                if not 0 <= score <= 1:
                    raise InputFormatError(
                        path, line, "score %r is outside [0, 1]" % value
                    )
                self._features[key] = score
        self._descriptions = {}
        path = directory / "descriptions.tsv"
        if path.exists():
            self._descriptions = load_descriptions(path)

    @staticmethod
    def _load_verdicts(path: Path) -> Dict[Pair, bool]:
        if not path.exists():
            return {}
        out = {}
        for key, (line, value) in _read_pairs(path, "verdict").items():
            if value not in _VERDICTS:
                raise InputFormatError(path, line, "unknown verdict %r" % value)
            out[key] = _VERDICTS[value]
        return out

    @staticmethod
    def _lookup(table: Mapping, key, task: str, pair: Pair):
        try:
            return table[key]
        except KeyError:
            raise OracleError("No %s fixture for %s, %s" % (task, pair[0], pair[1]))

    def annotate_mapping(self, candidates: Sequence[Pair]) -> List[MappingLabel]:
        require_items(candidates, "mapping")
        return [
            MappingLabel(a, b, self._lookup(self._mapping, (a, b), "mapping", (a, b)))
            for a, b in candidates
        ]

    def annotate_relevance(self, pairs: Sequence[Pair]) -> List[RelevanceLabel]:
        require_items(pairs, "relevance")
        return [
            RelevanceLabel(
                a,
                b,
                self._lookup(
                    self._relevance, frozenset((a, b)), "relevance", (a, b)
                ),
            )
            for a, b in pairs
        ]

    def score_features(self, pairs: Sequence[Pair]) -> List[FeatureScore]:
        require_items(pairs, "feature")
        return [
            FeatureScore(f, t, self._lookup(self._features, (f, t), "feature", (f, t)))
            for f, t in pairs
        ]

    def expand_descriptions(self, items: Sequence[Tuple[CodeId, str]]) -> List[str]:
        return [self._descriptions.get(code, text) for code, text in items]


def _cache_key(oracle: str, task: str, item: Sequence[str]) -> str:
    blob = json.dumps([oracle, task, list(item)], separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class CachingOracle(Oracle):
    """
    Remember every answer of `inner` in an append-only JSON-lines file.

    Each line is ``{"key", "task", "item", "label"}`` where ``key`` is the
    SHA-256 of (oracle name, task, item). Answers are appended only after the
    whole batch succeeds, so a failed batch leaves no trace. Thread-safe.
    """

    def __init__(self, inner: Oracle, path: Path):
        self.inner = inner
        self.name = inner.name
        self.path = Path(path)
        self._lock = threading.Lock()
        self._labels: Dict[str, object] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as f:
                for lineno, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        self._labels[record["key"]] = record["label"]
                    except (ValueError, KeyError, TypeError) as err:
                        raise InputFormatError(
                            self.path, lineno, "bad cache line: %s" % err
                        )
        self.hits = 0
        self.misses = 0

    def _cached(self, task: str, items: Sequence[Sequence[str]], ask) -> List:
        keys = [_cache_key(self.name, task, item) for item in items]
        with self._lock:
            todo = [k for k, key in enumerate(keys) if key not in self._labels]
        answers = ask(todo) if todo else []
        if len(answers) != len(todo):
            raise OracleError(
                "Oracle returned %d %s answers for %d items"
                % (len(answers), task, len(todo))
            )
        with self._lock:
            new_lines = []
            for k, label in zip(todo, answers):
                if keys[k] not in self._labels:
                    self._labels[keys[k]] = label
                    new_lines.append(
                        json.dumps(
                            {
                                "key": keys[k],
                                "task": task,
                                "item": list(items[k]),
                                "label": label,
                            },
                            sort_keys=True,
                        )
                    )
            if new_lines:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write("\n".join(new_lines) + "\n")
            self.hits += len(items) - len(todo)
            self.misses += len(todo)
            return [self._labels[key] for key in keys]

    def annotate_mapping(self, candidates: Sequence[Pair]) -> List[MappingLabel]:
        require_items(candidates, "mapping")
        verdicts = self._cached(
            "mapping",
            [(str(a), str(b)) for a, b in candidates],
            lambda todo: [
                label.positive
                for label in self.inner.annotate_mapping([candidates[k] for k in todo])
            ],
        )
        return [MappingLabel(a, b, bool(v)) for (a, b), v in zip(candidates, verdicts)]

    def annotate_relevance(self, pairs: Sequence[Pair]) -> List[RelevanceLabel]:
        require_items(pairs, "relevance")
        verdicts = self._cached(
            "relevance",
            [tuple(sorted((str(a), str(b)))) for a, b in pairs],
            lambda todo: [
                label.related
                for label in self.inner.annotate_relevance([pairs[k] for k in todo])
            ],
        )
        return [RelevanceLabel(a, b, bool(v)) for (a, b), v in zip(pairs, verdicts)]

    def score_features(self, pairs: Sequence[Pair]) -> List[FeatureScore]:
        require_items(pairs, "feature")
        scores = self._cached(
            "feature",
            [(str(f), str(t)) for f, t in pairs],
            lambda todo: [
                label.score
                for label in self.inner.score_features([pairs[k] for k in todo])
            ],
        )
        return [FeatureScore(f, t, float(s)) for (f, t), s in zip(pairs, scores)]

    def expand_descriptions(self, items: Sequence[Tuple[CodeId, str]]) -> List[str]:
        return self._cached(
            "describe",
            [(str(code), text) for code, text in items],
            lambda todo: self.inner.expand_descriptions([items[k] for k in todo]),
        )


def open_oracle(
    kind: str,
    *,
    fixtures: Optional[Path] = None,
    synthetic: Optional[SyntheticOracle] = None,
    remote_options: Optional[Mapping[str, object]] = None,
    cache: Optional[Path] = None,
) -> Oracle:
    """
    Build the oracle a pipeline config asks for: ``synthetic``, ``file`` or
    ``remote``, optionally cached.
    """
    if kind == "synthetic":
        if synthetic is None:
            raise ValueError("The synthetic oracle needs a ground-truth file")
        oracle: Oracle = synthetic
    elif kind == "file":
        if fixtures is None:
            raise ValueError("The file oracle needs a fixtures directory")
        oracle = FileOracle(fixtures)
    elif kind == "remote":
        from .client import RemoteOracle

        oracle = RemoteOracle.from_environment(**dict(remote_options or {}))
    else:
        raise ValueError("Unknown oracle kind %r" % kind)
    if cache is not None:
        oracle = CachingOracle(oracle, cache)
    return oracle
