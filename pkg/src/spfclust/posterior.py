"""Point estimates and agreement metrics for partitions.

Partitions are handled as membership vectors; a :class:`~spfclust.graph.Partition`
is accepted anywhere a membership vector is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .errors import EmptyTrace, LengthMismatch
from .graph import Partition


def _labels(p) -> np.ndarray:
    if isinstance(p, Partition):
        return np.asarray(p.membership)
    return np.asarray(p)


def _pair(p1, p2) -> tuple[np.ndarray, np.ndarray]:
    a, b = _labels(p1), _labels(p2)
    if a.shape != b.shape:
        raise LengthMismatch(f"partitions have different lengths: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def contingency_table(p1, p2) -> np.ndarray:
    a, b = _pair(p1, p2)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


@dataclass(frozen=True)
class CoclusterMatrix:
    p: np.ndarray
    n_samples_used: int


def cocluster_matrix(trace: Sequence) -> CoclusterMatrix:
    """Fraction of sampled partitions in which each pair of regions shares a cluster."""
    if len(trace) == 0:
        raise EmptyTrace("cannot build a co-clustering matrix from an empty trace")
    labels = np.stack([_labels(t) for t in trace])
    n = labels.shape[1]
    acc = np.zeros((n, n))
    for m in labels:
        acc += m[:, None] == m[None, :]
    p = acc / labels.shape[0]
    return CoclusterMatrix(p, labels.shape[0])


def binder_loss(membership, cocluster: CoclusterMatrix) -> float:
    """``sum_{i<j} 1{same} (1 - p_ij) + 1{diff} p_ij``."""
    m = _labels(membership)
    same = m[:, None] == m[None, :]
    loss = np.where(same, 1.0 - cocluster.p, cocluster.p)
    return float(np.sum(np.triu(loss, k=1)))


def dahl_point_estimate(trace: Sequence, cocluster: CoclusterMatrix | None = None):
    """Traced partition with the smallest Binder loss; earliest wins ties.

    Returns the element of ``trace`` itself (membership vector or partition).
    """
    if len(trace) == 0:
        raise EmptyTrace("cannot select a point estimate from an empty trace")
    if cocluster is None:
        cocluster = cocluster_matrix(trace)
    best, best_loss = 0, math.inf
    seen: dict[bytes, float] = {}
    for k, t in enumerate(trace):
        m = _labels(t)
        key = m.astype(np.int64).tobytes()
        loss = seen.get(key)
        if loss is None:
            loss = seen[key] = binder_loss(m, cocluster)
        if loss < best_loss:
            best, best_loss = k, loss
    return trace[best]


def rand_index(p1, p2) -> float:
    table = contingency_table(p1, p2)
    n = int(table.sum())
    pairs = comb(n, 2, exact=True)
    if pairs == 0:
        return 1.0
    sum_ij = sum(comb(int(x), 2, exact=True) for x in table.ravel())
    sum_a = sum(comb(int(x), 2, exact=True) for x in table.sum(axis=1))
    sum_b = sum(comb(int(x), 2, exact=True) for x in table.sum(axis=0))
    # agreements: pairs together in both plus pairs apart in both
    return (pairs + 2 * sum_ij - sum_a - sum_b) / pairs


def adjusted_rand_index(p1, p2) -> float:
    """Chance-adjusted Rand index from the contingency table.

    When both partitions are trivial in the same way (expected index equals
    its maximum) the value is 1 for identical groupings and 0 otherwise.
    """
    table = contingency_table(p1, p2)
    n = int(table.sum())
    pairs = comb(n, 2, exact=True)
    sum_ij = sum(comb(int(x), 2, exact=True) for x in table.ravel())
    sum_a = sum(comb(int(x), 2, exact=True) for x in table.sum(axis=1))
    sum_b = sum(comb(int(x), 2, exact=True) for x in table.sum(axis=0))
    if pairs == 0:
        return 1.0
    expected = sum_a * sum_b / pairs
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0 if sum_ij == sum_a == sum_b else 0.0
    return (sum_ij - expected) / (max_index - expected)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def normalized_information_distance(p1, p2) -> float:
    """``1 - 2 I(U, V) / (H(U) + H(V))`` in nats; 0 when both entropies vanish."""
    table = contingency_table(p1, p2)
    n = int(table.sum())
    h_u = _entropy(table.sum(axis=1), n)
    h_v = _entropy(table.sum(axis=0), n)
    if h_u + h_v == 0.0:
        return 0.0
    nonzero = table > 0
    if np.all(nonzero.sum(axis=0) == 1) and np.all(nonzero.sum(axis=1) == 1):
        # same grouping up to labels; skip the rounding error of 1 - 2I/(H+H)
        return 0.0
    pij = table / n
    pu = table.sum(axis=1) / n
    pv = table.sum(axis=0) / n
    nz = pij > 0
    # sorted summation makes the value exactly symmetric in its arguments
    mi = float(np.sum(np.sort(pij[nz] * np.log(pij[nz] / np.outer(pu, pv)[nz]))))
    value = 1.0 - 2.0 * mi / (h_u + h_v)
    return min(1.0, max(0.0, value))


def accuracy(estimate, truth) -> float:
    """Share of regions whose matched labels agree.

    Estimated and true clusters are paired one-to-one so the total overlap is
    maximal (Hungarian assignment); unmatched clusters count as errors.
    """
    table = contingency_table(estimate, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / table.sum())


def relabel_by_size(partition) -> np.ndarray:
    """Labels renumbered so 0 is the largest cluster; ties go to the smallest member index."""
    m = _labels(partition)
    labels = np.unique(m)
    info = []
    for c in labels:
        idx = np.flatnonzero(m == c)
        info.append((-idx.size, int(idx[0]), c))
    info.sort()
    mapping = {c: k for k, (_, _, c) in enumerate(info)}
    return np.array([mapping[c] for c in m], dtype=np.int64)


def compare_partitions(estimate, truth) -> dict[str, float]:
    return {
        "ari": adjusted_rand_index(estimate, truth),
        "ri": rand_index(estimate, truth),
        "nid": normalized_information_distance(estimate, truth),
        "accuracy": accuracy(estimate, truth),
    }
