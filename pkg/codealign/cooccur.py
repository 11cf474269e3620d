"""
Per-site co-occurrence counts, PPMI, and PPMI-SVD code embeddings.

Co-occurrence counts are the only per-site artifact that leaves a site: a
TSV of ``(code_i, code_j, count)`` triplets with ``code_i <= code_j`` plus a
small JSON manifest. Everything downstream (PPMI, SVD, LP rows, padding) can
be recomputed from those two files.
"""
from __future__ import annotations

import datetime
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .codebook import CodeBook, CodeId
from .nn import unit_rows
from .protocol import MatrixBlock
from .tsv import InputFormatError, MissingInputError, read_table, write_table

logger = logging.getLogger(__name__)

Day = Union[datetime.date, int]
Event = Tuple[CodeId, Day]

DENSE_EIGEN_LIMIT = 2000
"""Above this many codes, svd_embed switches to a sparse Lanczos eigensolver."""


@dataclass(frozen=True)
class SiteCooccurrence:
    site: str

    codes: Tuple[CodeId, ...]
    """The site's codes, sorted. Row order of `counts`."""

    counts: scipy.sparse.csr_matrix
    """Symmetric matrix of nonnegative integer counts."""

    n_patients: int = 0

    @property
    def row_totals(self) -> np.ndarray:
        """C(i, .), diagonal included."""
        return np.asarray(self.counts.sum(axis=1)).ravel()

    @property
    def grand_total(self) -> int:
        return int(self.counts.sum())

    def save(self, triplets_path: Path, manifest_path: Path) -> None:
        upper = scipy.sparse.triu(self.counts).tocoo()
        order = np.lexsort((upper.col, upper.row))
        write_table(
            triplets_path,
            ["code_i", "code_j", "count"],
            (
                (
                    str(self.codes[upper.row[k]]),
                    str(self.codes[upper.col[k]]),
                    int(upper.data[k]),
                )
                for k in order
            ),
        )
        manifest_path = Path(manifest_path)
        manifest_path.write_text(
            json.dumps(
                {
                    "site": self.site,
                    "codes": [str(c) for c in self.codes],
                    "n_patients": self.n_patients,
                },
                indent=1,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, triplets_path: Path, manifest_path: Path) -> SiteCooccurrence:
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise MissingInputError(manifest_path)
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            codes = tuple(CodeId.parse(c) for c in manifest["codes"])
            site = str(manifest["site"])
            n_patients = int(manifest.get("n_patients", 0))
        except (ValueError, KeyError, TypeError) as err:
            raise InputFormatError(manifest_path, None, "bad site manifest: %s" % err)
        if list(codes) != sorted(codes):
            raise InputFormatError(manifest_path, None, "codes are not sorted")
        index = {c: i for i, c in enumerate(codes)}

        frame = read_table(triplets_path, ["code_i", "code_j", "count"])
        rows = np.empty(len(frame), dtype=np.int64)
        cols = np.empty(len(frame), dtype=np.int64)
        data = np.empty(len(frame), dtype=np.int64)
        for k, row in enumerate(frame.itertuples(index=False)):
            try:
                i = index[CodeId.parse(row.code_i)]
                j = index[CodeId.parse(row.code_j)]
                count = int(row.count)
            except (KeyError, ValueError) as err:
                raise InputFormatError(triplets_path, k + 2, "bad triplet: %s" % err)
            if i > j or count < 0:
                raise InputFormatError(
                    triplets_path,
                    k + 2,
                    "triplets need code_i <= code_j and count >= 0",
                )
            rows[k], cols[k], data[k] = i, j, count
        return cls(site, codes, _symmetrize(rows, cols, data, len(codes)), n_patients)


def _symmetrize(rows, cols, data, n: int) -> scipy.sparse.csr_matrix:
    """Build U + U^T - diag(U) from upper-triangle triplets (duplicates sum)."""
    if n == 0:
        return scipy.sparse.csr_matrix((0, 0), dtype=np.int64)
    upper = scipy.sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    full = upper + upper.T - scipy.sparse.diags(upper.diagonal(), shape=(n, n))
    full = full.tocsr().astype(np.int64)
    full.eliminate_zeros()
    return full


def _day_number(day: Day) -> int:
    if isinstance(day, datetime.date):
        return day.toordinal()
    return int(day)


def _patient_pairs(
    events: Sequence[Event], index: Mapping[CodeId, int], window_days: int
) -> Tuple[np.ndarray, np.ndarray]:
    unique = sorted({(_day_number(day), index[code]) for code, day in events})
    if len(unique) < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    days = np.array([d for d, _ in unique], dtype=np.int64)
    idx = np.array([i for _, i in unique], dtype=np.int64)
    n = len(days)
    # events after position i that fall within the window (days is sorted)
    hi = np.searchsorted(days, days + window_days, side="right")
    n_after = hi - np.arange(n) - 1
    first = np.repeat(np.arange(n), n_after)
    starts = np.repeat(np.cumsum(n_after) - n_after, n_after)
    second = first + 1 + (np.arange(len(first)) - starts)
    a, b = idx[first], idx[second]
    return np.minimum(a, b), np.maximum(a, b)


def count_cooccurrence(
    events: Mapping[str, Sequence[Event]],
    window_days: int = 30,
    *,
    site: str = "",
    threads: int = 1,
) -> SiteCooccurrence:
    """
    Count co-occurring code pairs per patient.

    Each patient's events are first deduplicated on (code, date). Every
    unordered pair of remaining events no more than `window_days` apart adds
    one to the pair's count; a pair of one code on two distinct dates adds one
    to the diagonal.

    :param events: patient id -> list of (code, date). Dates are
                   :class:`datetime.date` or integer day numbers.
    :param threads: patients are counted in this many chunks in parallel.
    """
    if window_days < 0:
        raise ValueError("window_days must be >= 0; got %d" % window_days)
    codes = tuple(sorted({code for patient in events.values() for code, _ in patient}))
    index = {code: i for i, code in enumerate(codes)}
    patients = [events[p] for p in sorted(events)]

    def count_chunk(chunk: List[Sequence[Event]]) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [_patient_pairs(p, index, window_days) for p in chunk]
        if not pairs:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return (
            np.concatenate([r for r, _ in pairs]),
            np.concatenate([c for _, c in pairs]),
        )

    n_chunks = max(1, min(threads, len(patients)))
    chunks = [patients[i::n_chunks] for i in range(n_chunks)]
    if n_chunks == 1:
        results = [count_chunk(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            results = list(pool.map(count_chunk, chunks))
    rows = np.concatenate([r for r, _ in results])
    cols = np.concatenate([c for _, c in results])
    counts = _symmetrize(rows, cols, np.ones(len(rows), dtype=np.int64), len(codes))
    logger.debug(
        "Site %r: %d patients, %d codes, %d nonzero pairs",
        site,
        len(patients),
        len(codes),
        counts.nnz,
    )
    return SiteCooccurrence(site, codes, counts, len(patients))


def apply_thresholds(
    c: SiteCooccurrence, min_pair: int = 10, min_code_total: int = 10
) -> SiteCooccurrence:
    """
    Zero counts below `min_pair`, then drop weakly connected codes.

    A code is dropped when its off-diagonal counts sum to less than
    `min_code_total`. Dropping repeats until no code qualifies, so the result
    is a fixed point: thresholding it again changes nothing.
    """
    counts = c.counts.tocsr(copy=True)
    counts.data[counts.data < min_pair] = 0
    counts.eliminate_zeros()
    codes = np.array(c.codes, dtype=object)
    while True:
        off_totals = np.asarray(counts.sum(axis=1)).ravel() - counts.diagonal()
        keep = off_totals >= min_code_total
        if keep.all():
            break
        dropped = int((~keep).sum())
        logger.debug("Site %r: dropping %d weakly connected codes", c.site, dropped)
        counts = counts[keep][:, keep]
        codes = codes[keep]
    return SiteCooccurrence(c.site, tuple(codes), counts.tocsr(), c.n_patients)


def compute_ppmi(c: SiteCooccurrence) -> scipy.sparse.csr_matrix:
    """
    Positive pointwise mutual information, natural log.

    ``max(0, ln(C(i,j) C(.,.) / (C(i,.) C(j,.))))`` on nonzero counts; zero
    elsewhere. Row totals include the diagonal.

    :raises ValueError: if the matrix has no counts at all.
    """
    total = c.grand_total
    if total <= 0:
        raise ValueError("Site %r has no co-occurrences" % c.site)
    row_totals = c.row_totals.astype(np.float64)
    coo = c.counts.tocoo()
    values = np.log(
        coo.data.astype(np.float64)
        * total
        / (row_totals[coo.row] * row_totals[coo.col])
    )
    values = np.maximum(values, 0.0)
    ppmi = scipy.sparse.csr_matrix((values, (coo.row, coo.col)), shape=c.counts.shape)
    ppmi.eliminate_zeros()
    return ppmi


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    peaks = vectors[np.argmax(np.abs(vectors), axis=0), np.arange(vectors.shape[1])]
    return vectors * np.where(peaks < 0, -1.0, 1.0)


def _largest_eigh(
    matrix: scipy.sparse.spmatrix, k: int, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    The `k` algebraically largest eigenpairs of a symmetric sparse matrix.

    PPMI matrices have negative eigenvalues as large in magnitude as the
    positive ones, so ranking by magnitude would crowd positive pairs out.
    """
    k = min(k, matrix.shape[0] - 1)
    start = np.random.default_rng(seed).uniform(-1.0, 1.0, size=matrix.shape[0])
    return scipy.sparse.linalg.eigsh(matrix, k=k, which="LA", v0=start)


def svd_embed(
    ppmi: scipy.sparse.spmatrix,
    d: int,
    *,
    seed: int = 0,
    dense_limit: int = DENSE_EIGEN_LIMIT,
) -> np.ndarray:
    """
    Embed codes as ``U_d diag(sqrt(lambda_d))`` from the top positive eigenpairs.

    Columns are ordered by descending eigenvalue. If fewer than `d` eigenvalues
    are positive, the remaining columns are zero.

    :param seed: only used above `dense_limit` codes.
    """
    if d <= 0:
        raise ValueError("Embedding dimension must be >= 1; got %d" % d)
    n = ppmi.shape[0]
    out = np.zeros((n, d))
    if n == 0 or ppmi.nnz == 0:
        return out
    if n <= dense_limit:
        values, vectors = scipy.linalg.eigh(ppmi.toarray())
    else:
        values, vectors = _largest_eigh(ppmi.tocsr(), d, seed)
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    tolerance = 1e-12 * max(1.0, float(np.abs(values).max()))
    keep = min(d, int((values > tolerance).sum()))
    if keep < d:
        logger.info("Only %d positive eigenvalues; padding %d columns", keep, d - keep)
    vectors = _fix_signs(vectors[:, :keep])
    out[:, :keep] = vectors * np.sqrt(values[:keep])
    return out


@dataclass(frozen=True)
class SiteEmbedding:
    site: str

    matrix: np.ndarray
    """N x d, rows in CodeBook order. Rows of absent codes are zero."""

    present_rows: np.ndarray
    """Sorted row indices of the codes the site embeds."""

    empty_lp: Tuple[CodeId, ...] = ()
    """LP codes with no present child (their rows are zero)."""

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: Path, book: CodeBook) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as f:
            MatrixBlock(self.matrix, book.row_order_hash()).write_to(f)
            MatrixBlock(self.present_rows.astype(np.float64)[None, :]).write_to(f)

    @classmethod
    def load(cls, path: Path, book: CodeBook, site: str) -> SiteEmbedding:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(path)
        with path.open("rb") as f:
            block = MatrixBlock.read_from(f)
            rows = MatrixBlock.read_from(f).matrix
        if block.row_hash != book.row_order_hash():
            raise ValueError("%s: row order does not match the code book" % path)
        return cls(site, block.matrix, rows.ravel().astype(np.int64))


def assemble_site_embedding(
    base: np.ndarray, base_codes: Sequence[CodeId], book: CodeBook, site: str
) -> SiteEmbedding:
    """
    Place base rows, add LP rows, normalize and pad to the full code book.

    An LP code listed at `site` gets the occurrence-weighted mean of its
    children's base rows, counting only children present in `base_codes`.
    An LP code with no present child gets a zero row and a warning.
    """
    if len(base_codes) != base.shape[0]:
        raise ValueError(
            "base has %d rows but %d codes were given"
            % (base.shape[0], len(base_codes))
        )
    unknown = [str(c) for c in base_codes if c not in book.index]
    if unknown:
        raise ValueError("Codes missing from the code book: %s" % unknown[:10])

    matrix = np.zeros((book.size, base.shape[1]))
    base_rows = book.rows(base_codes)
    matrix[base_rows] = base
    present = set(int(r) for r in base_rows)
    position: Dict[CodeId, int] = {c: k for k, c in enumerate(base_codes)}

    empty_lp = []
    for lp, kids in sorted(book.lp_children.items()):
        if lp in position or lp not in book.index:
            continue
        if site not in book.site_membership.get(lp, ()):
            continue
        found = [(position[c], w) for c, w in kids if c in position]
        row = book.index[lp]
        present.add(row)
        if not found:
            empty_lp.append(lp)
            continue
        weights = np.array([w for _, w in found])
        if weights.sum() <= 0:
            weights = np.ones(len(found))
        matrix[row] = weights @ base[[k for k, _ in found]] / weights.sum()

    if empty_lp:
        logger.warning(
            "Site %r: %d LP codes have no present children; their rows are zero",
            site,
            len(empty_lp),
        )
    return SiteEmbedding(
        site,
        unit_rows(matrix),
        np.array(sorted(present), dtype=np.int64),
        tuple(empty_lp),
    )


def build_site_embedding(
    c: SiteCooccurrence,
    book: CodeBook,
    d: int,
    *,
    min_pair: int = 10,
    min_code_total: int = 10,
    seed: int = 0,
) -> SiteEmbedding:
    """Threshold, PPMI, SVD and assemble one site's counts."""
    kept = apply_thresholds(c, min_pair, min_code_total)
    if kept.grand_total == 0:
        logger.warning("Site %r: no counts survive thresholding", c.site)
        return assemble_site_embedding(np.zeros((0, d)), [], book, c.site)
    base = svd_embed(compute_ppmi(kept), d, seed=seed)
    return assemble_site_embedding(base, kept.codes, book, c.site)


def events_by_patient(
    rows: Iterable[Tuple[str, CodeId, Day]]
) -> Dict[str, List[Event]]:
    """Group (patient, code, date) rows into the mapping count_cooccurrence takes."""
    grouped: Dict[str, List[Event]] = {}
    for patient, code, day in rows:
        grouped.setdefault(patient, []).append((code, day))
    return grouped
