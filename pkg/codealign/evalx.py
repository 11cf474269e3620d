"""
Evaluation harness: known-pair AUC, top-k code mapping, rank correlations,
feature-selection C-index, and cluster driver odds ratios.

Every function reads an embedding matrix row-aligned to a
:class:`~codealign.codebook.CodeBook` and never modifies it. Randomness comes
only from the `seed` arguments.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import matplotlib
import numpy as np
import scipy.stats
from matplotlib.figure import Figure
from sklearn.metrics import roc_auc_score

from .codebook import CodeBook, CodeId, CodeSystem, mapping_targets
from .nn import unit_rows
from .tsv import InputFormatError, read_table, write_table

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 20)

GRADES = {"yes": 1.0, "possible": 0.5, "no": 0.0}
"""Graded mapping labels and the scores Spearman compares against."""


@dataclass(frozen=True)
class EvalReport:
    task: str

    metrics: Mapping[str, float]

    counts: Mapping[str, int]
    """Sizes of the inputs the metrics were computed from."""

    seed: int = 0

    breakdown: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    """Group name -> metrics restricted to that group."""

    def as_dict(self) -> Dict[str, object]:
        return {
            "task": self.task,
            "metrics": dict(self.metrics),
            "counts": dict(self.counts),
            "seed": self.seed,
            "breakdown": {k: dict(v) for k, v in self.breakdown.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> EvalReport:
        return cls(
            task=str(data["task"]),
            metrics=dict(data["metrics"]),
            counts=dict(data["counts"]),
            seed=int(data.get("seed", 0)),
            breakdown={k: dict(v) for k, v in dict(data.get("breakdown", {})).items()},
        )

    def as_text(self) -> str:
        lines = ["%s (seed %d)" % (self.task, self.seed)]
        for name, value in sorted(self.metrics.items()):
            lines.append("  %-24s %.4f" % (name, value))
        for name, value in sorted(self.counts.items()):
            lines.append("  %-24s %d" % (name, value))
        for group, metrics in sorted(self.breakdown.items()):
            shown = ", ".join("%s %.4f" % kv for kv in sorted(metrics.items()))
            lines.append("    %-22s %s" % (group, shown))
        return "\n".join(lines)


def save_reports(json_path: Path, text_path: Path, reports: Iterable[EvalReport]):
    reports = list(reports)
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(
        json.dumps([r.as_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    )
    Path(text_path).write_text("\n\n".join(r.as_text() for r in reports) + "\n")


def load_reports(json_path: Path) -> List[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(Path(json_path).read_text())]


# -- scalar metrics ----------------------------------------------------------


def auc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """
    Probability that a positive outscores a negative, ties counting 1/2.

    :raises ValueError: if either side is empty.
    """
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(
            "AUC needs positives and negatives; got %d and %d" % (len(pos), len(neg))
        )
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return float(roc_auc_score(labels, np.concatenate([pos, neg])))


def spearman(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """
    Pearson correlation of mid-ranks.

    :raises ValueError: on unequal lengths, fewer than 2 items, or a constant
                        input ("undefined correlation").
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError(
            "Spearman needs two equal-length lists of >= 2; got %d and %d"
            % (len(a), len(b))
        )
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("undefined correlation: constant input")
    return float(scipy.stats.spearmanr(a, b)[0])


def concordance_index(
    method_scores: Sequence[float], oracle_scores: Sequence[float]
) -> float:
    """
    Fraction of pairs with different oracle scores that the method orders the
    same way; method ties count 1/2.

    :raises ValueError: on unequal lengths or no comparable pair.
    """
    m = np.asarray(method_scores, dtype=np.float64)
    o = np.asarray(oracle_scores, dtype=np.float64)
    if len(m) != len(o):
        raise ValueError("Got %d method scores but %d oracle scores" % (len(m), len(o)))
    upper = np.triu(np.ones((len(o), len(o)), dtype=bool), k=1)
    oracle_order = np.sign(o[:, None] - o[None, :])
    method_order = np.sign(m[:, None] - m[None, :])
    comparable = upper & (oracle_order != 0)
    n = int(comparable.sum())
    if n == 0:
        raise ValueError("No comparable pairs: every oracle score is equal")
    concordant = int((comparable & (method_order == oracle_order)).sum())
    ties = int((comparable & (method_order == 0)).sum())
    return (concordant + 0.5 * ties) / n


# -- known pairs -------------------------------------------------------------


def _embedded(embedding: np.ndarray) -> np.ndarray:
    return np.linalg.norm(embedding, axis=1) > 0


def pair_cosines(
    embedding: np.ndarray, book: CodeBook, pairs: Sequence[Tuple[CodeId, CodeId]]
) -> np.ndarray:
    unit = unit_rows(embedding)
    left = book.rows(a for a, _ in pairs)
    right = book.rows(b for _, b in pairs)
    return np.einsum("ij,ij->i", unit[left], unit[right])


def type_matched_negatives(
    book: CodeBook,
    pairs: Sequence[Tuple[CodeId, CodeId]],
    n_neg: int,
    seed: int,
    embedding: Optional[np.ndarray] = None,
) -> List[Tuple[CodeId, CodeId]]:
    """
    For every positive ``(a, b)``, `n_neg` random pairs whose first code has
    a's system and whose second has b's, avoiding known pairs and self pairs.

    With `embedding`, only codes with a nonzero row are drawn.
    """
    rng = np.random.default_rng(seed)
    usable = (
        np.ones(book.size, dtype=bool) if embedding is None else _embedded(embedding)
    )
    pools: Dict[CodeSystem, List[CodeId]] = {}
    for code in book.codes:
        if usable[book.index[code]]:
            pools.setdefault(code.system, []).append(code)
    known = {frozenset(p) for p in pairs}
    out = []
    for a, b in pairs:
        left = pools.get(a.system, [])
        right = pools.get(b.system, [])
        if not left or not right:
            continue
        drawn = 0
        for _ in range(20 * n_neg):
            if drawn == n_neg:
                break
            x = left[int(rng.integers(len(left)))]
            y = right[int(rng.integers(len(right)))]
            if x == y or frozenset((x, y)) in known:
                continue
            out.append((x, y))
            drawn += 1
        if drawn < n_neg:
            logger.warning("Only %d of %d negatives for %s-%s", drawn, n_neg, a, b)
    return out


def auc_known_pairs(
    embedding: np.ndarray,
    book: CodeBook,
    known_pairs: Sequence[Tuple[CodeId, CodeId]],
    *,
    n_neg: int = 5,
    seed: int = 0,
) -> float:
    """AUC of cosine similarity: known pairs against type-matched random pairs."""
    pairs = [(a, b) for a, b in known_pairs]
    negatives = type_matched_negatives(book, pairs, n_neg, seed, embedding)
    return auc(
        pair_cosines(embedding, book, pairs), pair_cosines(embedding, book, negatives)
    )


def _signature(a: CodeId, b: CodeId) -> str:
    return "%s-%s" % tuple(sorted((a.system.value, b.system.value)))


def known_pair_report(
    task: str,
    embedding: np.ndarray,
    book: CodeBook,
    known_pairs: Sequence[Tuple[CodeId, CodeId, str]],
    *,
    n_neg: int = 5,
    seed: int = 0,
) -> EvalReport:
    """
    :func:`auc_known_pairs` over ``(a, b, relation)`` rows, plus the AUC of
    every relation name and every code-type signature on its own.

    Pairs with a code missing from `book` or with a zero row are skipped and
    counted.
    """
    usable = _embedded(embedding)
    kept = [
        (a, b, r)
        for a, b, r in known_pairs
        if a in book.index
        and b in book.index
        and usable[book.index[a]]
        and usable[book.index[b]]
    ]
    pairs = [(a, b) for a, b, _ in kept]
    negatives = type_matched_negatives(book, pairs, n_neg, seed, embedding)
    pos_scores = pair_cosines(embedding, book, pairs)
    neg_scores = pair_cosines(embedding, book, negatives)
    by_signature: Dict[str, List[float]] = {}
    for (a, b), score in zip(negatives, neg_scores):
        by_signature.setdefault(_signature(a, b), []).append(score)

    groups: Dict[str, List[int]] = {}
    for k, (a, b, relation) in enumerate(kept):
        groups.setdefault("relation:" + (relation or "unnamed"), []).append(k)
        groups.setdefault("types:" + _signature(a, b), []).append(k)
    breakdown = {}
    for group, members in sorted(groups.items()):
        signatures = {_signature(kept[k][0], kept[k][1]) for k in members}
        negs = [s for sig in sorted(signatures) for s in by_signature.get(sig, [])]
        if negs:
            breakdown[group] = {
                "auc": auc(pos_scores[members], negs),
                "pairs": float(len(members)),
            }
    metrics = {}
    if len(pairs) and len(negatives):
        metrics["auc"] = auc(pos_scores, neg_scores)
    return EvalReport(
        task=task,
        metrics=metrics,
        counts={
            "positives": len(pairs),
            "negatives": len(negatives),
            "skipped": len(known_pairs) - len(kept),
        },
        seed=seed,
        breakdown=breakdown,
    )


# -- code mapping ------------------------------------------------------------


def accepted_targets(book: CodeBook, gold: Iterable[CodeId]) -> Set[CodeId]:
    """Gold codes plus their LP parents and the LP parents' other children."""
    out = set()
    for code in gold:
        out.add(code)
        for lp in book.lp_parents(code):
            out.add(lp)
            out.update(child for child, _ in book.lp_children.get(lp, ()))
            out.update(book.children.get(lp, ()))
    return out


@dataclass(frozen=True)
class MappingAccuracy:
    accuracy: Mapping[int, float]
    """k -> fraction of local codes with an accepted target in the top k."""

    n_locals: int

    missing: Tuple[CodeId, ...] = ()
    """Local codes with no embedding, counted as misses."""

    ranks: Mapping[CodeId, int] = field(default_factory=dict)
    """1-based rank of the best accepted target, per ranked local code."""


def topk_mapping_accuracy(
    embedding: np.ndarray,
    book: CodeBook,
    gold: Mapping[CodeId, Iterable[CodeId]],
    pool: Optional[Sequence[CodeId]] = None,
    ks: Sequence[int] = DEFAULT_KS,
    *,
    lp_credit: bool = True,
) -> MappingAccuracy:
    """
    Rank the candidate pool by cosine to each local code and count how often
    an accepted target lands in the top k. Ties rank by row order.

    Without `pool`, each local code is ranked against the codes of its
    mapping target systems.

    :raises ValueError: if `gold` is empty.
    """
    if not gold:
        raise ValueError("No gold mappings to score")
    unit = unit_rows(embedding)
    usable = _embedded(embedding)
    pools: Dict[Tuple[CodeSystem, ...], np.ndarray] = {}
    hits = {k: 0 for k in ks}
    missing = []
    ranks = {}
    for local, targets in sorted(gold.items()):
        if local not in book.index or not usable[book.index[local]]:
            missing.append(local)
            continue
        if pool is not None:
            key: Tuple[CodeSystem, ...] = ()
            if key not in pools:
                pools[key] = book.rows(c for c in pool if c in book.index)
        else:
            key = tuple(sorted(mapping_targets(local.system), key=lambda s: s.value))
            if key not in pools:
                pools[key] = book.rows(book.codes_of(*key))
        rows = pools[key]
        cosines = unit[rows] @ unit[book.index[local]]
        order = rows[np.lexsort((rows, -cosines))]
        accepted = accepted_targets(book, targets) if lp_credit else set(targets)
        accepted_rows = {book.index[c] for c in accepted if c in book.index}
        hit = np.flatnonzero(np.isin(order, list(accepted_rows)))
        if len(hit) == 0:
            continue
        rank = int(hit[0]) + 1
        ranks[local] = rank
        for k in ks:
            if rank <= k:
                hits[k] += 1
    if missing:
        logger.warning("%d local codes have no embedding", len(missing))
    n = len(gold)
    return MappingAccuracy(
        accuracy={k: hits[k] / n for k in ks},
        n_locals=n,
        missing=tuple(missing),
        ranks=ranks,
    )


@dataclass(frozen=True)
class GoldMapping:
    local: CodeId
    standard: CodeId
    grade: float = 1.0


_GOLD_COLUMNS = ["local_system", "local_value", "standard_system", "standard_value"]


def load_gold_mappings(path: Path) -> List[GoldMapping]:
    """
    Read a gold-mapping TSV. The optional ``grade`` column holds ``yes``,
    ``possible``, ``no`` or a number in [0, 1].
    """
    frame = read_table(path, _GOLD_COLUMNS, optional=["grade"])
    out = []
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            grade_text = getattr(row, "grade", "") or "yes"
            grade = GRADES.get(grade_text)
            if grade is None:
                grade = float(grade_text)
            if not 0 <= grade <= 1:
                raise ValueError("grade %r outside [0, 1]" % grade_text)
            out.append(
                GoldMapping(
                    CodeId.of(row.local_system, row.local_value),
                    CodeId.of(row.standard_system, row.standard_value),
                    grade,
                )
            )
        except ValueError as err:
            raise InputFormatError(path, i + 2, str(err))
    return out


def save_gold_mappings(path: Path, mappings: Iterable[GoldMapping]) -> None:
    write_table(
        path,
        _GOLD_COLUMNS + ["grade"],
        (
            (
                m.local.system.value,
                m.local.value,
                m.standard.system.value,
                m.standard.value,
                repr(m.grade),
            )
            for m in mappings
        ),
    )


def mapping_report(
    task: str,
    embedding: np.ndarray,
    book: CodeBook,
    gold: Sequence[GoldMapping],
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """
    Top-k accuracy over the fully correct gold pairs, and Spearman between
    cosine and grade over all graded pairs when the grades vary.
    """
    positives: Dict[CodeId, Set[CodeId]] = {}
    for m in gold:
        if m.grade >= 1.0:
            positives.setdefault(m.local, set()).add(m.standard)
    metrics: Dict[str, float] = {}
    counts = {"gold_pairs": len(gold), "locals": len(positives)}
    if positives:
        result = topk_mapping_accuracy(embedding, book, positives, ks=ks)
        metrics.update({"top%d" % k: v for k, v in result.accuracy.items()})
        counts["missing"] = len(result.missing)
    graded = [m for m in gold if m.local in book.index and m.standard in book.index]
    grades = [m.grade for m in graded]
    if len(set(grades)) > 1:
        cosines = pair_cosines(embedding, book, [(m.local, m.standard) for m in graded])
        try:
            metrics["spearman"] = spearman(cosines, grades)
        except ValueError:
            logger.warning("%s: cosines are constant; no Spearman", task)
    return EvalReport(task=task, metrics=metrics, counts=counts)


# -- feature selection -------------------------------------------------------


def feature_selection_harness(
    embedding: np.ndarray,
    book: CodeBook,
    target: CodeId,
    oracle,
    pool: Optional[Sequence[CodeId]] = None,
    *,
    seed: int = 0,
    top: int = 100,
    n_random: int = 100,
) -> EvalReport:
    """
    C-index of embedding cosine against the oracle's feature scores, over the
    `top` features most similar to `target` plus `n_random` random others.

    `oracle` is any :class:`~codealign.annotate.Oracle`. With fewer than
    ``top + n_random`` pool codes, all of them are scored.
    """
    unit = unit_rows(embedding)
    target_row = book.index[target]
    candidates = [c for c in (pool or book.codes) if c != target and c in book.index]
    rows = book.rows(candidates)
    if len(candidates) < top + n_random:
        logger.warning(
            "Feature pool for %s has %d codes; scoring all of them",
            target,
            len(candidates),
        )
        chosen = np.arange(len(candidates))
    else:
        cosines = unit[rows] @ unit[target_row]
        ranked = np.lexsort((rows, -cosines))
        best = ranked[:top]
        rest = ranked[top:]
        rng = np.random.default_rng(seed)
        chosen = np.sort(
            np.concatenate([best, rest[rng.choice(len(rest), n_random, replace=False)]])
        )
    features = [candidates[i] for i in chosen]
    scores = oracle.score_features([(f, target) for f in features])
    method = unit[book.rows(features)] @ unit[target_row]
    return EvalReport(
        task="feature_selection:%s" % target,
        metrics={"c_index": concordance_index(method, [s.score for s in scores])},
        counts={"features": len(features)},
        seed=seed,
    )


# -- clusters ----------------------------------------------------------------


def odds_ratio(a: float, b: float, c: float, d: float) -> float:
    """
    ``(a d) / (b c)`` of a 2x2 table, with 0.5 added to every cell when any
    cell is 0.
    """
    if min(a, b, c, d) == 0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    return (a * d) / (b * c)


def chi_square_p(a: float, b: float, c: float, d: float) -> float:
    """Continuity-corrected chi-square p-value of a 2x2 table, 1 dof."""
    table = np.array([[a, b], [c, d]], dtype=np.float64)
    if (table.sum(axis=0) == 0).any() or (table.sum(axis=1) == 0).any():
        return 1.0
    return float(scipy.stats.chi2_contingency(table, correction=True)[1])


@dataclass(frozen=True)
class Association:
    code: CodeId
    odds_ratio: float
    p_value: float
    table: Tuple[int, int, int, int]
    """(present in cluster 1, absent in 1, present in 0, absent in 0)."""


def cluster_feature_association(
    presence: np.ndarray, clusters: np.ndarray, codes: Sequence[CodeId]
) -> List[Association]:
    """
    Per code, odds ratio and p-value of code presence for cluster 1 versus
    cluster 0.

    :param presence: patients x codes boolean matrix.
    :param clusters: per-patient label in {0, 1}.
    :raises ValueError: unless `clusters` has exactly the labels 0 and 1.
    """
    presence = np.asarray(presence, dtype=bool)
    clusters = np.asarray(clusters)
    labels = set(np.unique(clusters).tolist())
    if labels != {0, 1}:
        raise ValueError("Need exactly two clusters 0 and 1; got %r" % sorted(labels))
    if presence.shape != (len(clusters), len(codes)):
        raise ValueError(
            "Presence matrix is %r; expected %r"
            % (presence.shape, (len(clusters), len(codes)))
        )
    one = clusters == 1
    present_one = presence[one].sum(axis=0)
    present_zero = presence[~one].sum(axis=0)
    n_one, n_zero = int(one.sum()), int((~one).sum())
    out = []
    for k, code in enumerate(codes):
        a, c = int(present_one[k]), int(present_zero[k])
        b, d = n_one - a, n_zero - c
        ratio = odds_ratio(a, b, c, d)
        out.append(Association(code, ratio, chi_square_p(a, b, c, d), (a, b, c, d)))
    return out


# -- charts ------------------------------------------------------------------


def bar_chart_svg(
    path: Path, series: Mapping[str, Mapping[str, float]], title: str = ""
) -> None:
    """
    Grouped bar chart, one group per metric and one bar per method.

    :param series: method -> metric -> value.
    """
    methods = sorted(series)
    metrics = sorted({m for values in series.values() for m in values})
    fig = Figure(figsize=(max(4.0, 1.2 * len(metrics) + 2), 3.5))
    ax = fig.add_subplot(1, 1, 1)
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(metrics))
    for k, method in enumerate(methods):
        values = [series[method].get(m, np.nan) for m in metrics]
        ax.bar(x + k * width, values, width, label=method)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "codealign"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
