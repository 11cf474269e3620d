"""
Contrastive and alignment loss terms, each returning a value and its gradient.

All similarity losses work on row indices into one embedding matrix ``z``, so
a family of :class:`~codealign.kgraph.ContrastiveSet` is compiled once into a
:class:`PairBatch` and then evaluated every step without Python loops.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .codebook import CodeBook
from .kgraph import ContrastiveSet, EdgeFamily


@dataclass(frozen=True)
class LossWeights:
    """
    Weights of the per-family loss sums.
    """

    c_sim_h: float = 1.0
    """Hierarchical similarity (siblings against cousins)."""

    c_sim_nh: float = 1.0
    """Non-hierarchical similarity from relation pairs."""

    c_map: float = 30.0
    """Local-to-standard code mapping."""

    c_rel: float = 5.0
    """Relatedness."""

    c_fea: float = 0.1
    """Feature-selection pairs, summed without per-anchor averaging."""

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ValueError("Loss weight %s must be >= 0; got %r" % (name, value))

    def as_dict(self) -> Mapping[str, float]:
        return {
            "c_sim_h": self.c_sim_h,
            "c_sim_nh": self.c_sim_nh,
            "c_map": self.c_map,
            "c_rel": self.c_rel,
            "c_fea": self.c_fea,
        }

    def of(self, family: EdgeFamily) -> float:
        return {
            EdgeFamily.SIM_HIERARCHICAL: self.c_sim_h,
            EdgeFamily.SIM_NONHIERARCHICAL: self.c_sim_nh,
            EdgeFamily.MAPPING: self.c_map,
            EdgeFamily.RELATED: self.c_rel,
            EdgeFamily.FEATURE_POS: self.c_fea,
        }[family]


@dataclass(frozen=True)
class MsHyper:
    """
    Multi-similarity loss hyperparameters.
    """

    alpha: float = 1.0
    """Sharpness of the positive (pull) term."""

    beta: float = 5.0
    """Sharpness of the negative (push) term."""

    lam: float = 0.5
    """Similarity margin both terms are measured from."""

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(
                "alpha and beta must be positive; got %r, %r" % (self.alpha, self.beta)
            )


def _soft_term(
    sims: np.ndarray,
    segment: np.ndarray,
    n_segments: int,
    gamma: float,
    sign: float,
    lam: float,
    average: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per segment ``(1/gamma) ln(1 + [mean|sum]_j exp(sign gamma (s_j - lam)))``.

    Returns (per-segment values, d total / d s_j). Segments with no members
    are worth 0.
    """
    values = np.zeros(n_segments)
    if len(sims) == 0:
        return values, np.zeros(0)
    x = sign * gamma * (sims - lam)
    if average:
        sizes = np.bincount(segment, minlength=n_segments).astype(np.float64)
        x = x - np.log(sizes[segment])
    # the implicit "1" inside the log is a member with x = 0
    peak = np.zeros(n_segments)
    np.maximum.at(peak, segment, x)
    shifted = np.exp(x - peak[segment])
    total = np.exp(-peak) + np.bincount(segment, weights=shifted, minlength=n_segments)
    log_total = peak + np.log(total)
    values = log_total / gamma
    used = np.bincount(segment, minlength=n_segments) > 0
    values[~used] = 0.0
    grad = sign * np.exp(x - log_total[segment])
    return values, grad


def _pair_sims(z: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", z[left], z[right])


def _scatter_pair_grad(
    z: np.ndarray, left: np.ndarray, right: np.ndarray, grad_s: np.ndarray
) -> np.ndarray:
    out = np.zeros_like(z)
    np.add.at(out, left, grad_s[:, None] * z[right])
    np.add.at(out, right, grad_s[:, None] * z[left])
    return out


def ms_loss(
    anchor: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    h: MsHyper = MsHyper(),
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    Multi-similarity loss of one anchor vector.

    `positives` and `negatives` hold one embedding per row. An empty side
    contributes nothing.

    :return: (loss, d/d anchor, d/d positives, d/d negatives)
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64).reshape(-1, anchor.size)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, anchor.size)
    pos_value, pos_grad = _soft_term(
        positives @ anchor,
        np.zeros(len(positives), dtype=np.int64),
        1,
        h.alpha,
        -1.0,
        h.lam,
        True,
    )
    neg_value, neg_grad = _soft_term(
        negatives @ anchor,
        np.zeros(len(negatives), dtype=np.int64),
        1,
        h.beta,
        1.0,
        h.lam,
        True,
    )
    grad_anchor = pos_grad @ positives + neg_grad @ negatives
    return (
        float(pos_value[0] + neg_value[0]),
        grad_anchor,
        np.outer(pos_grad, anchor),
        np.outer(neg_grad, anchor),
    )


@dataclass(frozen=True)
class PairBatch:
    """
    Contrastive sets flattened to row-index arrays.

    Pair ``k`` of the positive side compares row ``pos_anchor[k]`` with row
    ``pos_other[k]`` and belongs to set ``pos_set[k]``; likewise for the
    negative side.
    """

    n_sets: int
    pos_anchor: np.ndarray
    pos_other: np.ndarray
    pos_set: np.ndarray
    neg_anchor: np.ndarray
    neg_other: np.ndarray
    neg_set: np.ndarray

    @classmethod
    def compile(cls, sets: Sequence[ContrastiveSet], book: CodeBook) -> PairBatch:
        columns: List[List[int]] = [[] for _ in range(6)]
        for number, s in enumerate(sets):
            anchor = book.index[s.anchor]
            for code in sorted(s.positives):
                columns[0].append(anchor)
                columns[1].append(book.index[code])
                columns[2].append(number)
            for code in sorted(s.negatives):
                columns[3].append(anchor)
                columns[4].append(book.index[code])
                columns[5].append(number)
        arrays = [np.asarray(c, dtype=np.int64) for c in columns]
        return cls(len(sets), *arrays)

    @property
    def n_pairs(self) -> int:
        return len(self.pos_other) + len(self.neg_other)

    def slice(self, start: int, stop: int) -> PairBatch:
        """Sets ``start`` up to (not including) ``stop``, renumbered from 0."""
        start, stop = max(start, 0), min(stop, self.n_sets)
        pos = (self.pos_set >= start) & (self.pos_set < stop)
        neg = (self.neg_set >= start) & (self.neg_set < stop)
        return PairBatch(
            max(stop - start, 0),
            self.pos_anchor[pos],
            self.pos_other[pos],
            self.pos_set[pos] - start,
            self.neg_anchor[neg],
            self.neg_other[neg],
            self.neg_set[neg] - start,
        )

    def chunks(self, size: int) -> Iterable[PairBatch]:
        """Consecutive slices of at most `size` sets each, in set order."""
        for start in range(0, self.n_sets, size):
            yield self.slice(start, start + size)


def batch_ms_loss(
    z: np.ndarray, batch: PairBatch, h: MsHyper = MsHyper()
) -> Tuple[float, np.ndarray]:
    """
    Sum over the batch's sets of :func:`ms_loss`, with gradient w.r.t. `z`.
    """
    pos_values, pos_grad = _soft_term(
        _pair_sims(z, batch.pos_anchor, batch.pos_other),
        batch.pos_set,
        batch.n_sets,
        h.alpha,
        -1.0,
        h.lam,
        True,
    )
    neg_values, neg_grad = _soft_term(
        _pair_sims(z, batch.neg_anchor, batch.neg_other),
        batch.neg_set,
        batch.n_sets,
        h.beta,
        1.0,
        h.lam,
        True,
    )
    grad = _scatter_pair_grad(z, batch.pos_anchor, batch.pos_other, pos_grad)
    grad += _scatter_pair_grad(z, batch.neg_anchor, batch.neg_other, neg_grad)
    return float(pos_values.sum() + neg_values.sum()), grad


def feature_pair_loss(
    z: np.ndarray,
    positive_pairs: np.ndarray,
    negative_pairs: np.ndarray,
    h: MsHyper = MsHyper(),
) -> Tuple[float, np.ndarray]:
    """
    Feature-selection loss over all (feature row, target row) pairs at once.

    Like :func:`ms_loss` but summing instead of averaging inside each log,
    and with one term per side for the whole pair list.

    :raises ValueError: if both pair lists are empty.
    """
    positive_pairs = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    negative_pairs = np.asarray(negative_pairs, dtype=np.int64).reshape(-1, 2)
    if len(positive_pairs) + len(negative_pairs) == 0:
        raise ValueError("Feature loss needs at least one pair")
    value = 0.0
    grad = np.zeros_like(z)
    for pairs, gamma, sign in (
        (positive_pairs, h.alpha, -1.0),
        (negative_pairs, h.beta, 1.0),
    ):
        left, right = pairs[:, 0], pairs[:, 1]
        values, grad_s = _soft_term(
            _pair_sims(z, left, right),
            np.zeros(len(pairs), dtype=np.int64),
            1,
            gamma,
            sign,
            h.lam,
            False,
        )
        value += float(values[0])
        grad += _scatter_pair_grad(z, left, right, grad_s)
    return value, grad


def feature_batch_loss(
    z: np.ndarray, batch: PairBatch, h: MsHyper = MsHyper()
) -> Tuple[float, np.ndarray]:
    """:func:`feature_pair_loss` over the pairs of compiled feature sets."""
    if batch.n_pairs == 0:
        return 0.0, np.zeros_like(z)
    return feature_pair_loss(
        z,
        np.stack([batch.pos_other, batch.pos_anchor], axis=1),
        np.stack([batch.neg_other, batch.neg_anchor], axis=1),
        h,
    )


def alignment_loss(
    outputs: Sequence[np.ndarray], present: Sequence[np.ndarray]
) -> Tuple[float, List[np.ndarray]]:
    """
    Sum over ordered site pairs ``(m1, m2)`` of the squared Frobenius
    distance between ``outputs[m1]`` and ``outputs[m2]`` on the rows
    ``present[m1]``.

    :return: (loss, gradient w.r.t. each site's output)
    """
    if len(outputs) != len(present):
        raise ValueError(
            "Got %d site outputs but %d row sets" % (len(outputs), len(present))
        )
    shapes = {y.shape for y in outputs}
    if len(shapes) > 1:
        raise ValueError("Site outputs differ in shape: %r" % sorted(shapes))
    grads = [np.zeros_like(y) for y in outputs]
    value = 0.0
    for m1, rows in enumerate(present):
        for m2 in range(len(outputs)):
            if m1 == m2:
                continue
            diff = outputs[m1][rows] - outputs[m2][rows]
            value += float(np.sum(diff * diff))
            grads[m1][rows] += 2.0 * diff
            grads[m2][rows] -= 2.0 * diff
    return value, grads
