"""Nearest-neighbor outcome features (NNCI).

For every query row the k nearest reference rows are found separately inside
the control group and inside the treated group, and their outcomes are
averaged. Search is exact. On equal distances the lower reference index
wins, and the k outcomes are summed in neighbor-rank order, so the result does
not depend on blocking or on how rows are distributed over workers.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset

__all__ = [
    "DistanceMetric",
    "NeighborFeatures",
    "InsufficientNeighborsError",
    "distance",
    "pairwise_distances",
    "group_average",
    "nnci_features",
    "nnci_features_subsampled",
]

# cap on the (rows, candidates, d) difference tensor per block
_BLOCK_ELEMS = 4_000_000


class DistanceMetric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    CHEBYSHEV = "chebyshev"

    @classmethod
    def parse(cls, value) -> "DistanceMetric":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown metric {value!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def label(self) -> str:
        return self.value.capitalize()


class InsufficientNeighborsError(ValueError):
    """A treatment group has fewer than k eligible reference rows."""


@dataclass(frozen=True, eq=False)
class NeighborFeatures:
    ybar0: np.ndarray
    ybar1: np.ndarray

    def __post_init__(self):
        for name in ("ybar0", "ybar1"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.ybar0.shape != self.ybar1.shape:
            raise ValueError("ybar0 and ybar1 must have equal length")

    def __len__(self):
        return self.ybar0.shape[0]

    def take(self, idx) -> "NeighborFeatures":
        return NeighborFeatures(self.ybar0[idx], self.ybar1[idx])

    def scaled(self, mean: float, std: float) -> "NeighborFeatures":
        """Apply ``(v - mean) / std`` to both columns."""
        return NeighborFeatures((self.ybar0 - mean) / std, (self.ybar1 - mean) / std)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["row", "ybar0", "ybar1"])
            for i, (a, b) in enumerate(zip(self.ybar0, self.ybar1)):
                wr.writerow([i, repr(float(a)), repr(float(b))])

    @classmethod
    def from_csv(cls, path) -> "NeighborFeatures":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([float(r["ybar0"]) for r in rows]),
                   np.array([float(r["ybar1"]) for r in rows]))


def distance(a, b, metric=DistanceMetric.EUCLIDEAN) -> float:
    """Distance between two vectors under a Minkowski-family metric."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(pairwise_distances(a[None, :], b[None, :], metric)[0, 0])


def pairwise_distances(A: np.ndarray, B: np.ndarray, metric=DistanceMetric.EUCLIDEAN) -> np.ndarray:
    """Distance matrix of shape (len(A), len(B))."""
    metric = DistanceMetric.parse(metric)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    # accumulate coordinate by coordinate so the reduction order is fixed
    out = np.zeros((A.shape[0], B.shape[0]))
    for j in range(A.shape[1]):
        diff = np.abs(A[:, j, None] - B[None, :, j])
        if metric is DistanceMetric.EUCLIDEAN:
            out += diff * diff
        elif metric is DistanceMetric.MANHATTAN:
            out += diff
        else:
            np.maximum(out, diff, out=out)
    if metric is DistanceMetric.EUCLIDEAN:
        np.sqrt(out, out=out)
    return out


def _group_average(query_X, ref_X, ref_y, ref_idx, k, metric, self_idx):
    """Mean outcome of the k nearest rows among ``ref_idx`` for each query row.

    ``self_idx[i]`` is the reference index that query row i must not pick
    (-1 for none).
    """
    nq = query_X.shape[0]
    out = np.empty(nq)
    cand_X = ref_X[ref_idx]
    cand_y = ref_y[ref_idx]
    block = max(1, _BLOCK_ELEMS // max(1, cand_X.shape[0]))
    for start in range(0, nq, block):
        stop = min(start + block, nq)
        D = pairwise_distances(query_X[start:stop], cand_X, metric)
        if self_idx is not None:
            # positions of each query's own row inside ref_idx (ref_idx is sorted)
            own = self_idx[start:stop]
            pos = np.searchsorted(ref_idx, own)
            hit = (own >= 0) & (pos < ref_idx.size)
            hit[hit] = ref_idx[pos[hit]] == own[hit]
            D[np.nonzero(hit)[0], pos[hit]] = np.inf
        # candidates are in ascending reference order, so a stable sort gives
        # the lowest index among equal distances
        order = np.argsort(D, axis=1, kind="stable")[:, :k]
        acc = np.zeros(stop - start)
        for j in range(k):
            acc += cand_y[order[:, j]]
        out[start:stop] = acc / k
    return out


def nnci_features(query_X, ref: Dataset, k: int = 11, metric=DistanceMetric.EUCLIDEAN,
                  exclude_self: bool = False) -> NeighborFeatures:
    """Average outcomes of the k nearest control and treated reference rows.

    Parameters
    ----------
    query_X : array of shape (q, d)
        Rows to compute features for.
    ref : Dataset
        Reference rows; their treatment splits them into the two groups.
    k : int
        Number of neighbors per group.
    metric : DistanceMetric or str
        ``euclidean``, ``manhattan`` or ``chebyshev``.
    exclude_self : bool
        The query rows are the reference rows (row i is reference row i) and
        a row may not be its own neighbor. Use this for training features.

    Raises
    ------
    InsufficientNeighborsError
        If a group has fewer than k eligible rows for some query row.
    """
    metric = DistanceMetric.parse(metric)
    if k < 1:
        raise ValueError("k must be at least 1")
    query_X = np.atleast_2d(np.asarray(query_X, dtype=float))
    if query_X.shape[0] == 0:
        return NeighborFeatures(np.empty(0), np.empty(0))
    if query_X.shape[1] != ref.d:
        raise ValueError(f"dimension mismatch: query has {query_X.shape[1]} columns, reference {ref.d}")
    if exclude_self and query_X.shape[0] != ref.n:
        raise ValueError("exclude_self requires the query rows to be the reference rows")
    ybar0 = group_average(query_X, ref, 0, k, metric, exclude_self)
    ybar1 = group_average(query_X, ref, 1, k, metric, exclude_self)
    return NeighborFeatures(ybar0, ybar1)


def group_average(query_X, ref: Dataset, group: int, k: int = 11, metric=DistanceMetric.EUCLIDEAN,
                  exclude_self: bool = False) -> np.ndarray:
    """Mean outcome of the k nearest reference rows with treatment ``group``.

    Same conventions as :func:`nnci_features`, for a single group.
    """
    metric = DistanceMetric.parse(metric)
    if group not in (0, 1):
        raise ValueError("group must be 0 or 1")
    if k < 1:
        raise ValueError("k must be at least 1")
    query_X = np.atleast_2d(np.asarray(query_X, dtype=float))
    if query_X.shape[0] == 0:
        return np.empty(0)
    if query_X.shape[1] != ref.d:
        raise ValueError(f"dimension mismatch: query has {query_X.shape[1]} columns, reference {ref.d}")
    idx = np.flatnonzero(ref.t == group)
    self_idx = None
    eligible = idx.size
    if exclude_self:
        if query_X.shape[0] != ref.n:
            raise ValueError("exclude_self requires the query rows to be the reference rows")
        self_idx = np.arange(ref.n)
        eligible = max(idx.size - 1, 0)
    if eligible < k:
        raise InsufficientNeighborsError(
            f"insufficient group members: group t={group} has {eligible} eligible rows, k={k}")
    return _group_average(query_X, ref.X, ref.y, idx, k, metric, self_idx)


def nnci_features_subsampled(query_X, ref: Dataset, k: int = 11, metric=DistanceMetric.EUCLIDEAN,
                             m: int = 1000, seed: int = 0,
                             exclude_self: bool = False) -> NeighborFeatures:
    """NNCI features against a random subset of the reference rows.

    Each treatment group is sampled independently, without replacement, down
    to at most ``m`` rows; groups already no larger than ``m`` are kept whole,
    so ``m >= n`` reproduces :func:`nnci_features`. The cost is O(m n)
    instead of O(n^2).
    """
    if m < k:
        raise InsufficientNeighborsError(f"insufficient group members: m={m} < k={k}")
    query_X = np.atleast_2d(np.asarray(query_X, dtype=float))
    rng = np.random.default_rng(seed)
    keep = []
    for g in (0, 1):
        idx = np.flatnonzero(ref.t == g)
        if idx.size > m:
            idx = np.sort(rng.choice(idx, size=m, replace=False))
        keep.append(idx)
    keep = np.sort(np.concatenate(keep))
    sub = ref.take(keep)
    if not exclude_self:
        return nnci_features(query_X, sub, k, metric)
    if query_X.shape[0] != ref.n:
        raise ValueError("exclude_self requires the query rows to be the reference rows")
    metric = DistanceMetric.parse(metric)
    # query row i may only be excluded where it survived the sampling
    pos = np.full(ref.n, -1)
    pos[keep] = np.arange(keep.size)
    feats = []
    for g in (0, 1):
        idx = np.flatnonzero(sub.t == g)
        if idx.size - 1 < k:
            raise InsufficientNeighborsError(
                f"insufficient group members: group t={g} has {idx.size - 1} eligible rows, k={k}")
        feats.append(_group_average(query_X, sub.X, sub.y, idx, k, metric, pos))
    return NeighborFeatures(feats[0], feats[1])
