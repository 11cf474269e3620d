"""
Patient stratification from code embeddings, with federated k-means.

Sites turn their patients' baseline events into embedding-weighted vectors,
reduce them with a reducer fitted at the central site, and cluster them
together. Only cluster means, counts and sums of squares leave a site.
"""
from __future__ import annotations

import datetime
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse
from sklearn.cluster import KMeans, kmeans_plusplus
from sklearn.decomposition import PCA

from .codebook import CodeBook, CodeId, RollupTable, rollup_code
from .evalx import Association, chi_square_p, cluster_feature_association, odds_ratio
from .nn import unit_rows
from .protocol import Checkpoint
from .tsv import InputFormatError, read_table, write_table

logger = logging.getLogger(__name__)

BASELINE_DAYS = 730

INDEX_RULES = ("first_target", "last_event")

AGE_BRACKETS = (
    ("<18", 0, 17),
    ("18-25", 18, 25),
    ("26-49", 26, 49),
    ("50-65", 50, 65),
    (">65", 66, None),
)
"""(label, lowest age, highest age), ages in whole years, both ends included."""


def _sub_seed(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1)[0])


# -- patients ----------------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    event: bool

    day: Optional[int] = None
    """Days from the index date to the event or censoring, when known."""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str

    site: str

    events: Tuple[Tuple[CodeId, datetime.date], ...]
    """(code, date) pairs, sorted by date then code."""

    outcome: Optional[Outcome] = None

    age: Optional[int] = None
    """Age in years at the index date, when known."""

    def codes(self) -> Counter:
        """Code -> number of events."""
        return Counter(code for code, _ in self.events)


_EVENT_COLUMNS = ["patient_id", "site", "system", "value", "date"]
_EVENT_OPTIONAL = ["outcome", "outcome_day", "age"]


def load_patient_events(
    path: Path, rollup: Optional[RollupTable] = None
) -> List[PatientRecord]:
    """
    Read a patient events TSV.

    Columns: ``patient_id, site, system, value, date`` (ISO-8601), then
    optionally ``outcome`` (0 or 1), ``outcome_day`` and ``age``; those are
    per patient and may be left empty on all but one of a patient's rows.
    Raw codes are rolled up through `rollup`.

    :raises InputFormatError: on a bad date, flag or number, or a patient
                              listed at two sites.
    """
    table = rollup or RollupTable()
    frame = read_table(path, _EVENT_COLUMNS, optional=_EVENT_OPTIONAL)
    events: Dict[str, List[Tuple[CodeId, datetime.date]]] = {}
    sites: Dict[str, str] = {}
    outcomes: Dict[str, Outcome] = {}
    ages: Dict[str, int] = {}
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + 2
        try:
            day = datetime.date.fromisoformat(row.date)
            code = rollup_code((row.system, row.value), table)
            flag = getattr(row, "outcome", "")
            if flag:
                if flag not in ("0", "1"):
                    raise ValueError("outcome must be 0 or 1; got %r" % flag)
                outcome_day = getattr(row, "outcome_day", "")
                outcomes[row.patient_id] = Outcome(
                    flag == "1", int(outcome_day) if outcome_day else None
                )
            age = getattr(row, "age", "")
            if age:
                ages[row.patient_id] = int(age)
        except ValueError as err:
            raise InputFormatError(path, line, str(err))
        if sites.setdefault(row.patient_id, row.site) != row.site:
            raise InputFormatError(
                path,
                line,
                "patient %s appears at sites %s and %s"
                % (row.patient_id, sites[row.patient_id], row.site),
            )
        events.setdefault(row.patient_id, []).append((code, day))
    return [
        PatientRecord(
            patient,
            sites[patient],
            tuple(sorted(events[patient], key=lambda e: (e[1], e[0]))),
            outcomes.get(patient),
            ages.get(patient),
        )
        for patient in sorted(events)
    ]


def save_patient_events(path: Path, records: Iterable[PatientRecord]) -> None:
    def rows():
        for r in records:
            for k, (code, day) in enumerate(r.events):
                first = k == 0
                outcome = r.outcome if first else None
                yield (
                    r.patient_id,
                    r.site,
                    code.system.value,
                    code.value,
                    day.isoformat(),
                    "" if outcome is None else str(int(outcome.event)),
                    "" if outcome is None or outcome.day is None else str(outcome.day),
                    "" if r.age is None or not first else str(r.age),
                )

    write_table(path, _EVENT_COLUMNS + _EVENT_OPTIONAL, rows())


def baseline_window(
    record: PatientRecord,
    targets: Set[CodeId] = frozenset(),
    *,
    window_days: int = BASELINE_DAYS,
    rule: str = "first_target",
) -> Optional[PatientRecord]:
    """
    The record restricted to the `window_days` days up to and including its
    index date.

    The index date is the first event of a `targets` code (``first_target``)
    or the last event (``last_event``). Returns None for a patient with no
    index date.
    """
    if rule not in INDEX_RULES:
        raise ValueError("Index rule must be one of %r; got %r" % (INDEX_RULES, rule))
    if rule == "first_target":
        days = [day for code, day in record.events if code in targets]
    else:
        days = [day for _, day in record.events]
    if not days:
        return None
    index = min(days) if rule == "first_target" else max(days)
    start = index - datetime.timedelta(days=window_days)
    kept = tuple(e for e in record.events if start <= e[1] <= index)
    return replace(record, events=kept)


def age_bracket(age: Optional[int]) -> str:
    if age is None:
        return "unknown"
    for label, low, high in AGE_BRACKETS:
        if age >= low and (high is None or age <= high):
            return label
    raise ValueError("Negative age %r" % age)


def site_feature_totals(records: Iterable[PatientRecord]) -> Dict[str, Counter]:
    """Site -> code -> number of events at that site, the ``b_c`` counts."""
    totals: Dict[str, Counter] = {}
    for r in records:
        totals.setdefault(r.site, Counter()).update(r.codes())
    return totals


# -- patient embeddings ------------------------------------------------------


def similarity_threshold(
    embedding: np.ndarray,
    n_random: int = 10000,
    seed: int = 0,
    percentile: float = 99.0,
) -> float:
    """
    `percentile` (linear interpolation) of the cosines of `n_random` random
    pairs of distinct embedded codes.

    :raises ValueError: with fewer than two nonzero rows.
    """
    rows = np.flatnonzero(np.linalg.norm(embedding, axis=1) > 0)
    if len(rows) < 2:
        raise ValueError("Need at least two embedded codes; got %d" % len(rows))
    rng = np.random.default_rng(seed)
    first = rng.integers(len(rows), size=n_random)
    # a nonzero offset keeps the two codes distinct
    second = (first + rng.integers(1, len(rows), size=n_random)) % len(rows)
    unit = unit_rows(embedding[rows])
    cosines = np.einsum("ij,ij->i", unit[first], unit[second])
    return float(np.percentile(cosines, percentile))


@dataclass(frozen=True)
class PatientEmbedding:
    vector: np.ndarray

    n_features: int
    """Gated features the patient has."""

    @property
    def empty(self) -> bool:
        return self.n_features == 0


def _feature_weights(
    embedding: np.ndarray,
    book: CodeBook,
    target: CodeId,
    threshold: float,
    totals: Mapping[CodeId, int],
) -> np.ndarray:
    """``cos(Z_target, Z_c) / ln(b_c + 1)`` for gated codes, 0 elsewhere."""
    unit = unit_rows(embedding)
    cosines = unit @ unit[book.index[target]]
    b = np.zeros(book.size)
    for code, count in totals.items():
        if code in book.index:
            b[book.index[code]] = count
    gated = (cosines > threshold) & (b > 0)
    weights = np.zeros(book.size)
    weights[gated] = cosines[gated] / np.log1p(b[gated])
    return weights


def _count_matrix(records: Sequence[PatientRecord], book: CodeBook):
    rows, cols, data = [], [], []
    for i, record in enumerate(records):
        for code, count in sorted(record.codes().items()):
            if code in book.index:
                rows.append(i)
                cols.append(book.index[code])
                data.append(count)
    return scipy.sparse.csr_matrix(
        (np.asarray(data, dtype=np.float64), (rows, cols)),
        shape=(len(records), book.size),
    )


def embed_patients(
    records: Sequence[PatientRecord],
    embedding: np.ndarray,
    book: CodeBook,
    target: CodeId,
    threshold: float,
    totals: Mapping[CodeId, int],
) -> List[PatientEmbedding]:
    """
    ``W_i = sum_c cos(Z_target, Z_c) ln(a_ic + 1) / ln(b_c + 1) Z_c`` over the
    codes whose cosine with the target exceeds `threshold`.

    :param totals: the site's ``b_c`` counts.
    """
    weights = _feature_weights(embedding, book, target, threshold, totals)
    counts = _count_matrix(records, book)
    counts.data = np.log1p(counts.data)
    scaled = counts @ scipy.sparse.diags(weights)
    vectors = np.asarray(scaled @ embedding)
    mask = scipy.sparse.diags((weights != 0).astype(np.float64))
    gated = (counts @ mask).tocsr()
    gated.eliminate_zeros()
    n_features = np.diff(gated.indptr)
    return [
        PatientEmbedding(vectors[i], int(n_features[i])) for i in range(len(records))
    ]


def embed_patient(
    record: PatientRecord,
    embedding: np.ndarray,
    book: CodeBook,
    target: CodeId,
    threshold: float,
    totals: Mapping[CodeId, int],
) -> PatientEmbedding:
    """:func:`embed_patients` for one record."""
    return embed_patients([record], embedding, book, target, threshold, totals)[0]


# -- reducer -----------------------------------------------------------------


@dataclass(frozen=True)
class Reducer:
    """Centering plus projection onto the top principal directions."""

    mean: np.ndarray

    components: np.ndarray
    """out_dim x input dim, orthonormal rows."""

    explained_variance_ratio: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def save(self, path: Path) -> None:
        Checkpoint(
            {"mean": self.mean[None, :], "components": self.components},
            extra={"explained_variance_ratio": self.explained_variance_ratio[None, :]},
        ).save(path)

    @classmethod
    def load(cls, path: Path) -> Reducer:
        saved = Checkpoint.load(path)
        return cls(
            saved.params["mean"][0],
            saved.params["components"],
            saved.extra["explained_variance_ratio"][0],
        )


def fit_reducer(vectors: np.ndarray, out_dim: int = 3) -> Reducer:
    """
    :raises ValueError: if `out_dim` is below 1 or above the input dimension
                        or the number of vectors.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n, dim = vectors.shape
    if out_dim < 1 or out_dim > dim:
        raise ValueError("out_dim must be in [1, %d]; got %d" % (dim, out_dim))
    if out_dim > n:
        raise ValueError("Cannot fit %d components to %d vectors" % (out_dim, n))
    pca = PCA(n_components=out_dim, svd_solver="full").fit(vectors)
    return Reducer(
        pca.mean_.copy(), pca.components_.copy(), pca.explained_variance_ratio_.copy()
    )


def apply_reducer(reducer: Reducer, vectors: np.ndarray) -> np.ndarray:
    """Reduce one vector or a matrix of row vectors."""
    return (np.asarray(vectors, dtype=np.float64) - reducer.mean) @ reducer.components.T


# -- federated k-means -------------------------------------------------------


@dataclass(frozen=True)
class ClusterModel:
    """What a site sends to the server after one local step."""

    means: np.ndarray
    """k x r; an empty cluster keeps the mean it was given."""

    counts: np.ndarray
    """Points assigned to each cluster."""

    inertia: float = 0.0
    """Sum of squared distances of the points to their assigned incoming mean."""

    @property
    def k(self) -> int:
        return len(self.means)


def assign(points: np.ndarray, means: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest mean per point, ties going to the lowest index.

    :return: (labels, squared distances to the assigned mean)
    """
    distances = ((points[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(len(points)), labels]


def federated_kmeans_local_step(points: np.ndarray, means: np.ndarray) -> ClusterModel:
    """One k-means iteration on a site's points."""
    points = np.asarray(points, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    k = len(means)
    if len(points) == 0:
        return ClusterModel(means.copy(), np.zeros(k, dtype=np.int64), 0.0)
    labels, squared = assign(points, means)
    counts = np.bincount(labels, minlength=k)
    out = means.copy()
    for j in np.flatnonzero(counts):
        out[j] = points[labels == j].mean(axis=0)
    return ClusterModel(out, counts.astype(np.int64), float(squared.sum()))


def _weighted_lloyd(
    points: np.ndarray,
    weights: np.ndarray,
    centers: np.ndarray,
    labels: Optional[np.ndarray] = None,
    max_iter: int = 300,
) -> np.ndarray:
    """
    Weighted Lloyd iterations until the assignment is stable. A center with
    one member is that member; a center with none stays put.
    """
    centers = centers.copy()
    for _ in range(max_iter):
        if labels is None:
            labels, _ = assign(points, centers)
        for j in range(len(centers)):
            members = np.flatnonzero(labels == j)
            if len(members) == 1:
                centers[j] = points[members[0]]
            elif len(members) > 1:
                w = weights[members]
                centers[j] = (w[:, None] * points[members]).sum(axis=0) / w.sum()
        new_labels, _ = assign(points, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers


def federated_kmeans_aggregate(
    local_models: Sequence[ClusterModel],
    k: int,
    seed: int = 0,
    previous: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Weighted k-means over the sites' means, each weighted by its count.

    With `previous` (the means the sites stepped from) the clusters start
    from the index-wise weighted average of the sites' rows, and a cluster
    no site populated starts at its previous mean. Without it, seeding is
    weighted k-means++. The result does not depend on the order of
    `local_models`.

    :raises ValueError: if every count is zero, or k-means++ seeding has
                        fewer than `k` populated means.
    """
    if not local_models:
        raise ValueError("Need at least one local model")
    means = np.concatenate([m.means for m in local_models])
    weights = np.concatenate([m.counts for m in local_models]).astype(np.float64)
    index = np.concatenate([np.arange(m.k) for m in local_models])
    keep = weights > 0
    if not keep.any():
        raise ValueError("Every local cluster is empty")
    means, weights, index = means[keep], weights[keep], index[keep]
    order = np.lexsort((index, weights) + tuple(means.T[::-1]))
    means, weights, index = means[order], weights[order], index[order]

    if previous is not None:
        previous = np.asarray(previous, dtype=np.float64)
        if len(previous) != k or any(m.k != k for m in local_models):
            raise ValueError("Local models must carry the %d previous means" % k)
        return _weighted_lloyd(means, weights, previous, labels=index)
    if len(means) < k:
        raise ValueError("Only %d populated means for %d clusters" % (len(means), k))
    centers, _ = kmeans_plusplus(means, k, sample_weight=weights, random_state=seed)
    return _weighted_lloyd(means, weights, centers)


def lloyd(
    points: np.ndarray, means: np.ndarray, *, max_rounds: int = 100, tol: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Centralized Lloyd's algorithm from `means`.

    :return: (means, labels, rounds run)
    """
    means = np.asarray(means, dtype=np.float64)
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        new = federated_kmeans_local_step(points, means).means
        shift = float(np.linalg.norm(new - means, axis=1).max())
        means = new
        if shift < tol:
            break
    labels, _ = assign(np.asarray(points, dtype=np.float64), means)
    return means, labels, rounds


@dataclass(frozen=True)
class FederatedClustering:
    means: np.ndarray

    assignments: Tuple[np.ndarray, ...]
    """Per site, the cluster of every point."""

    sizes: np.ndarray
    """Pooled cluster sizes."""

    rounds: int

    inertia: Tuple[float, ...]
    """Within-cluster sum of squares reported in each round."""


def _check_points(site_points: Sequence[np.ndarray]) -> List[np.ndarray]:
    points = [np.asarray(p, dtype=np.float64) for p in site_points]
    for m, p in enumerate(points):
        if not np.all(np.isfinite(p)):
            raise ValueError("Site %d has non-finite points" % m)
    dims = {p.shape[1] for p in points if p.ndim == 2 and len(p)}
    if not dims:
        raise ValueError("No points at any site")
    if len(dims) != 1:
        raise ValueError("Site points disagree on dimension: %r" % sorted(dims))
    return points


def initial_means(
    site_points: Sequence[np.ndarray], k: int, seed: int = 0
) -> np.ndarray:
    """
    Federated seeding: each site clusters its own points and sends the
    centers and counts, and the server aggregates those with k-means++.
    """
    models = []
    for m, points in enumerate(_check_points(site_points)):
        if len(points) == 0:
            continue
        n_local = min(k, len(np.unique(points, axis=0)))
        local = KMeans(
            n_clusters=n_local, n_init=10, random_state=_sub_seed(seed, 1, m)
        ).fit(points)
        counts = np.bincount(local.labels_, minlength=n_local)
        models.append(
            ClusterModel(local.cluster_centers_, counts, float(local.inertia_))
        )
    return federated_kmeans_aggregate(models, k, _sub_seed(seed, 2))


def run_federated_clustering(
    site_points: Sequence[np.ndarray],
    k: int,
    *,
    max_rounds: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    init: Optional[np.ndarray] = None,
    relabel: bool = True,
    threads: int = 1,
) -> FederatedClustering:
    """
    Alternate local steps and aggregation until no mean moves `tol` or more
    (Euclidean), or `max_rounds` rounds.

    With `relabel`, clusters are renumbered by pooled size, smallest first,
    so that with k = 2 cluster 1 is the larger one.

    :raises ValueError: on non-finite points, or if no site has any.
    """
    points = _check_points(site_points)
    means = initial_means(points, k, seed) if init is None else np.array(init, float)
    if len(means) != k:
        raise ValueError("Got %d initial means for k = %d" % (len(means), k))
    history: List[float] = []
    rounds = 0
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for rounds in range(1, max_rounds + 1):
            current = means
            models = list(
                pool.map(lambda p: federated_kmeans_local_step(p, current), points)
            )
            history.append(float(sum(m.inertia for m in models)))
            if len(history) > 1 and history[-1] > history[-2]:
                logger.warning(
                    "Within-cluster sum of squares rose from %.6g to %.6g in round %d",
                    history[-2],
                    history[-1],
                    rounds,
                )
            means = federated_kmeans_aggregate(
                models, k, _sub_seed(seed, 3, rounds), previous=current
            )
            shift = float(np.linalg.norm(means - current, axis=1).max())
            logger.debug("Round %d: means moved %.6g", rounds, shift)
            if shift < tol:
                break
        final = list(pool.map(lambda p: assign(p, means)[0], points))

    sizes = np.bincount(np.concatenate(final), minlength=k) if final else np.zeros(k)
    if relabel:
        order = np.lexsort((np.arange(k), sizes))
        new_label = np.empty(k, dtype=np.int64)
        new_label[order] = np.arange(k)
        means = means[order]
        sizes = sizes[order]
        final = [new_label[labels] for labels in final]
    logger.info("Federated k-means: %d rounds, sizes %s", rounds, sizes.tolist())
    return FederatedClustering(means, tuple(final), sizes, rounds, tuple(history))


# -- cohort reports ----------------------------------------------------------


@dataclass(frozen=True)
class ClusterReport:
    group: str
    """Age bracket, or ``all``."""

    sizes: Tuple[int, ...]

    means: np.ndarray

    associations: Tuple[Association, ...] = ()
    """Per-code odds ratio of presence in cluster 1 versus cluster 0."""

    outcome_table: Optional[Tuple[int, int, int, int]] = None
    """(events in 1, non-events in 1, events in 0, non-events in 0)."""

    outcome_odds_ratio: Optional[float] = None

    outcome_p_value: Optional[float] = None

    empty_patients: int = 0
    """Patients with no gated feature (zero vectors)."""

    def as_dict(self) -> Dict[str, object]:
        return {
            "group": self.group,
            "sizes": list(self.sizes),
            "means": self.means.tolist(),
            "associations": [
                {
                    "code": str(a.code),
                    "odds_ratio": a.odds_ratio,
                    "p_value": a.p_value,
                    "table": list(a.table),
                }
                for a in self.associations
            ],
            "outcome_table": (
                None if self.outcome_table is None else list(self.outcome_table)
            ),
            "outcome_odds_ratio": self.outcome_odds_ratio,
            "outcome_p_value": self.outcome_p_value,
            "empty_patients": self.empty_patients,
        }

    def as_text(self) -> str:
        lines = ["%s: sizes %s" % (self.group, ", ".join(map(str, self.sizes)))]
        if self.outcome_odds_ratio is not None:
            lines.append(
                "  outcome odds ratio %.3f (p %.3g)"
                % (self.outcome_odds_ratio, self.outcome_p_value)
            )
        top = sorted(self.associations, key=lambda a: (a.p_value, str(a.code)))[:10]
        for a in top:
            lines.append(
                "  %-24s OR %8.3f  p %.3g" % (a.code, a.odds_ratio, a.p_value)
            )
        return "\n".join(lines)


def save_cluster_reports(
    json_path: Path, text_path: Path, reports: Sequence[ClusterReport]
) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(
        json.dumps([r.as_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    )
    Path(text_path).write_text("\n\n".join(r.as_text() for r in reports) + "\n")


def outcome_association(
    records: Sequence[PatientRecord], clusters: np.ndarray
) -> Optional[Tuple[Tuple[int, int, int, int], float, float]]:
    """
    2x2 table of cluster 1 versus 0 against the outcome flag, its odds ratio
    and chi-square p-value. None when no record carries an outcome.
    """
    known = [(r.outcome.event, c) for r, c in zip(records, clusters) if r.outcome]
    if not known:
        return None
    table = Counter(known)
    a, b = table[(True, 1)], table[(False, 1)]
    c, d = table[(True, 0)], table[(False, 0)]
    return (a, b, c, d), odds_ratio(a, b, c, d), chi_square_p(a, b, c, d)


@dataclass(frozen=True)
class StratifyConfig:
    k: int = 2

    window_days: int = BASELINE_DAYS

    index_rule: str = "first_target"

    threshold_percentile: float = 99.0

    n_random_pairs: int = 10000

    reducer_dim: int = 3

    max_rounds: int = 100

    tol: float = 1e-6

    by_age: bool = False
    """Cluster each age bracket on its own."""

    central_site: str = ""
    """Site that fits the reducer; empty means the first site by name."""

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2; got %r" % self.k)
        if self.index_rule not in INDEX_RULES:
            raise ValueError("index_rule must be one of %r" % (INDEX_RULES,))


def _cluster_group(
    group: str,
    records: Sequence[PatientRecord],
    embedding: np.ndarray,
    book: CodeBook,
    target: CodeId,
    threshold: float,
    cfg: StratifyConfig,
    seed: int,
    threads: int,
) -> Optional[ClusterReport]:
    if len(records) < max(cfg.k, cfg.reducer_dim):
        logger.warning("%s: %d patients is too few to cluster", group, len(records))
        return None
    by_site: Dict[str, List[PatientRecord]] = {}
    for r in records:
        by_site.setdefault(r.site, []).append(r)
    sites = sorted(by_site)
    totals = site_feature_totals(records)
    vectors = {
        site: embed_patients(
            by_site[site], embedding, book, target, threshold, totals[site]
        )
        for site in sites
    }
    empty = sum(v.empty for site in sites for v in vectors[site])
    if empty:
        logger.warning("%s: %d patients have no gated feature", group, empty)
    central = cfg.central_site or sites[0]
    if central not in by_site:
        raise ValueError("Central site %r has no patients in %s" % (central, group))
    central_points = np.array([v.vector for v in vectors[central]])
    reducer = fit_reducer(central_points, min(cfg.reducer_dim, len(central_points)))
    points = [
        apply_reducer(reducer, np.array([v.vector for v in vectors[s]])) for s in sites
    ]
    result = run_federated_clustering(
        points,
        cfg.k,
        max_rounds=cfg.max_rounds,
        tol=cfg.tol,
        seed=seed,
        threads=threads,
    )
    ordered = [r for s in sites for r in by_site[s]]
    clusters = np.concatenate(result.assignments)
    associations: Tuple[Association, ...] = ()
    outcome = None
    if cfg.k == 2 and set(np.unique(clusters).tolist()) == {0, 1}:
        codes = sorted({code for r in ordered for code, _ in r.events})
        column = {code: j for j, code in enumerate(codes)}
        presence = np.zeros((len(ordered), len(codes)), dtype=bool)
        for i, r in enumerate(ordered):
            for code, _ in r.events:
                presence[i, column[code]] = True
        associations = tuple(cluster_feature_association(presence, clusters, codes))
        outcome = outcome_association(ordered, clusters)
    return ClusterReport(
        group=group,
        sizes=tuple(int(s) for s in result.sizes),
        means=result.means,
        associations=associations,
        outcome_table=None if outcome is None else outcome[0],
        outcome_odds_ratio=None if outcome is None else outcome[1],
        outcome_p_value=None if outcome is None else outcome[2],
        empty_patients=int(empty),
    )


def stratify_cohort(
    records: Sequence[PatientRecord],
    embedding: np.ndarray,
    book: CodeBook,
    target: CodeId,
    cfg: StratifyConfig = StratifyConfig(),
    *,
    targets: Optional[Set[CodeId]] = None,
    seed: int = 0,
    threads: int = 1,
) -> List[ClusterReport]:
    """
    Window, embed, reduce and cluster a multi-site cohort.

    :param target: code whose embedding gates the features.
    :param targets: codes that define the index date under the
                    ``first_target`` rule; defaults to `target` alone.
    """
    targets = set(targets or {target})
    windowed = []
    for record in records:
        kept = baseline_window(
            record, targets, window_days=cfg.window_days, rule=cfg.index_rule
        )
        if kept is not None:
            windowed.append(kept)
    logger.info("%d of %d patients have an index date", len(windowed), len(records))
    if not windowed:
        raise ValueError("No patient has an index date")
    threshold = similarity_threshold(
        embedding, cfg.n_random_pairs, _sub_seed(seed, 4), cfg.threshold_percentile
    )
    logger.info("Feature gate: cosine > %.4f", threshold)
    if cfg.by_age:
        groups: Dict[str, List[PatientRecord]] = {}
        for r in windowed:
            groups.setdefault(age_bracket(r.age), []).append(r)
    else:
        groups = {"all": windowed}
    reports = []
    for number, (group, members) in enumerate(sorted(groups.items())):
        report = _cluster_group(
            group,
            members,
            embedding,
            book,
            target,
            threshold,
            cfg,
            _sub_seed(seed, 5, number),
            threads,
        )
        if report is not None:
            reports.append(report)
    return reports
