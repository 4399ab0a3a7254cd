"""Model comparison over many problems.

Dolan-More performance profiles, the Friedman aligned-ranks omnibus test
(Hodges and Lehmann), and Finner's step-down post-hoc procedure against the
best-ranked model. Scores are "smaller is better".
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

__all__ = [
    "PerformanceMatrix",
    "ProfileCurve",
    "RankReport",
    "Comparison",
    "ZERO_SHIFT",
    "performance_profile",
    "far_test",
    "finner_adjust",
    "finner_posthoc",
    "rank_report",
    "write_profiles_csv",
    "read_profiles_csv",
    "write_rank_report_csv",
]

ZERO_SHIFT = 1e-10
# slack on ratio <= tau so that ratios computed from rescaled rows do not flip on
# the last bit
_RATIO_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class PerformanceMatrix:
    """P problems x S models; entry (p, s) is model s's error on problem p."""

    scores: np.ndarray
    model_ids: tuple
    problem_ids: tuple = ()

    def __post_init__(self):
        s = np.array(self.scores, dtype=float)
        if s.ndim != 2:
            raise ValueError("scores must be a 2-d matrix")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("scores must be finite and non-negative")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)
        model_ids = tuple(self.model_ids) if self.model_ids else tuple(f"m{j}" for j in range(s.shape[1]))
        problem_ids = tuple(self.problem_ids) if self.problem_ids else tuple(range(s.shape[0]))
        if len(model_ids) != s.shape[1] or len(problem_ids) != s.shape[0]:
            raise ValueError("id lists do not match the matrix shape")
        object.__setattr__(self, "model_ids", model_ids)
        object.__setattr__(self, "problem_ids", problem_ids)

    @property
    def n_problems(self) -> int:
        return self.scores.shape[0]

    @property
    def n_models(self) -> int:
        return self.scores.shape[1]

    def select(self, model_ids: Sequence[str]) -> "PerformanceMatrix":
        cols = [self.model_ids.index(m) for m in model_ids]
        return PerformanceMatrix(self.scores[:, cols], tuple(model_ids), self.problem_ids)

    @classmethod
    def from_long(cls, rows, problem_key: str, model_key: str, value_key: str) -> "PerformanceMatrix":
        """Pivot long-format records; problems missing any model are dropped."""
        models, problems, cell = [], [], {}
        for r in rows:
            p, m = r[problem_key], r[model_key]
            if m not in models:
                models.append(m)
            if p not in problems:
                problems.append(p)
            cell[(p, m)] = float(r[value_key])
        complete = [p for p in problems if all((p, m) in cell for m in models)]
        scores = np.array([[cell[(p, m)] for m in models] for p in complete]).reshape(len(complete), len(models))
        return cls(scores, tuple(models), tuple(complete))


@dataclass(frozen=True, eq=False)
class ProfileCurve:
    model_id: str
    tau: np.ndarray
    rho: np.ndarray


def _ratios(m: PerformanceMatrix):
    s = m.scores
    has_zero = s.min(axis=1) == 0
    shifted = bool(np.any(has_zero))
    if shifted:
        # the shift scales with the row so that rescaling a row leaves its ratios unchanged
        s = s + np.where(has_zero, ZERO_SHIFT * s.max(axis=1), 0.0)[:, None]
    best = s.min(axis=1, keepdims=True)
    # an all-zero row is a full tie
    return np.divide(s, best, out=np.ones_like(s), where=best > 0), shifted


def performance_profile(m: PerformanceMatrix, tau_grid=None, n_points: int = 200) -> list:
    """Fraction of problems on which each model is within a factor tau of the best.

    The default grid has ``n_points`` log-spaced values from 1 to the largest
    ratio in the matrix. Rows containing a zero are shifted by ``ZERO_SHIFT``
    times the row maximum before the ratios are taken.
    """
    if m.n_problems < 1 or m.n_models < 1:
        raise ValueError("performance profiles need at least one problem and one model")
    r, _ = _ratios(m)
    if tau_grid is None:
        r_max = float(r.max())
        tau_grid = np.logspace(0.0, math.log10(r_max), n_points) if r_max > 1 else np.ones(n_points)
        tau_grid[0] = 1.0
        tau_grid[-1] = r_max
    tau = np.asarray(tau_grid, dtype=float)
    if np.any(tau < 1):
        raise ValueError("tau values must be >= 1")
    hits = r[:, :, None] <= tau[None, None, :] * (1.0 + _RATIO_RTOL)
    rho = hits.sum(axis=0) / m.n_problems
    return [ProfileCurve(mid, tau.copy(), rho[j]) for j, mid in enumerate(m.model_ids)]


# -- Friedman aligned ranks --------------------------------------------------------

@dataclass(frozen=True)
class FarResult:
    statistic: float
    p_value: float
    avg_ranks: tuple
    model_ids: tuple
    n_problems: int


def far_test(m: PerformanceMatrix) -> FarResult:
    """Friedman aligned-ranks test.

    Each score is aligned by subtracting its row mean. All P*S aligned values
    are ranked jointly (midranks on ties), and the statistic

        T = (S - 1) [sum_j Rj^2 - (S P^2 / 4)(SP + 1)^2]
            / ([SP(SP + 1)(2SP + 1) / 6] - (1/S) sum_i Ri^2)

    is referred to chi-squared with S - 1 degrees of freedom. Rj and Ri are
    column and row rank totals.
    """
    P, S = m.scores.shape
    if P < 2 or S < 2:
        raise ValueError("the aligned-ranks test needs at least 2 problems and 2 models")
    aligned = m.scores - m.scores.mean(axis=1, keepdims=True)
    ranks = stats.rankdata(aligned.ravel(), method="average").reshape(P, S)
    col = ranks.sum(axis=0)
    row = ranks.sum(axis=1)
    N = P * S
    num = (S - 1) * (np.sum(col ** 2) - (S * P ** 2 / 4.0) * (N + 1) ** 2)
    den = N * (N + 1) * (2 * N + 1) / 6.0 - np.sum(row ** 2) / S
    statistic = float(num / den) if den > 0 else 0.0
    # the numerator is a difference of large nearly equal sums; clamp roundoff
    if abs(statistic) < 1e-9:
        statistic = 0.0
    p_value = float(stats.chi2.sf(statistic, S - 1))
    return FarResult(statistic, p_value, tuple(float(v) for v in col / P), m.model_ids, P)


# -- Finner post-hoc ---------------------------------------------------------------

def finner_adjust(p_sorted, n_models: int) -> np.ndarray:
    """Finner step-down adjustment of ascending p-values.

    adj_i = max_{j <= i} 1 - (1 - p_j) ** ((S - 1) / j), capped at 1.
    """
    p = np.asarray(p_sorted, dtype=float)
    i = np.arange(1, p.size + 1)
    raw = 1.0 - (1.0 - p) ** ((n_models - 1) / i)
    return np.minimum(np.maximum.accumulate(raw), 1.0)


@dataclass(frozen=True)
class Comparison:
    model_id: str
    z: float
    p_raw: float
    p_adjusted: float
    reject: bool

    @property
    def decision(self) -> str:
        return "Reject" if self.reject else "Fail to reject"


@dataclass(frozen=True)
class RankReport:
    """FAR scores plus Finner comparisons of every model against the control.

    ``comparisons`` are in step-down order (ascending raw p-value).
    """

    model_ids: tuple
    avg_ranks: tuple
    control: str
    statistic: float
    p_value: float
    comparisons: tuple
    alpha: float = 0.05
    n_problems: int = 0
    metadata: dict = field(default_factory=dict)

    def comparison(self, model_id: str) -> Optional[Comparison]:
        for c in self.comparisons:
            if c.model_id == model_id:
                return c
        return None

    def rows(self) -> list:
        """Table rows ``(model, FAR, p_F, H0)`` sorted by FAR, control first."""
        order = sorted(range(len(self.model_ids)), key=lambda j: (self.avg_ranks[j], j))
        out = []
        for j in order:
            mid = self.model_ids[j]
            c = self.comparison(mid)
            if c is None:
                out.append((mid, self.avg_ranks[j], None, None))
            else:
                out.append((mid, self.avg_ranks[j], c.p_adjusted, c.decision))
        return out


def finner_posthoc(avg_ranks, n_problems: int, n_models: int, alpha_sig: float = 0.05,
                   model_ids: Optional[Sequence[str]] = None, statistic: float = float("nan"),
                   p_value: float = float("nan")) -> RankReport:
    """Compare each model with the best-ranked one.

    z = (R_j - R_control) / sqrt(S (S P + 1) / 6) on average aligned ranks,
    two-sided normal p-values, Finner-adjusted in ascending order; a
    hypothesis is rejected when its adjusted p-value is <= ``alpha_sig``.
    """
    ranks = np.asarray(avg_ranks, dtype=float)
    S, P = int(n_models), int(n_problems)
    if ranks.shape != (S,) or S < 2 or P < 1:
        raise ValueError("avg_ranks must hold one value per model (at least 2 models)")
    ids = tuple(model_ids) if model_ids is not None else tuple(f"m{j}" for j in range(S))
    if len(ids) != S:
        raise ValueError("model_ids does not match the number of ranks")
    control = int(np.argmin(ranks))
    se = math.sqrt(S * (S * P + 1) / 6.0)
    others = [j for j in range(S) if j != control]
    z = np.array([(ranks[j] - ranks[control]) / se for j in others])
    p_raw = 2.0 * stats.norm.sf(np.abs(z))
    order = np.argsort(p_raw, kind="stable")
    adj = finner_adjust(p_raw[order], S)
    comps = tuple(
        Comparison(ids[others[o]], float(z[o]), float(p_raw[o]), float(a), bool(a <= alpha_sig))
        for o, a in zip(order, adj)
    )
    return RankReport(ids, tuple(float(v) for v in ranks), ids[control], float(statistic),
                      float(p_value), comps, alpha_sig, P)


def rank_report(m: PerformanceMatrix, alpha_sig: float = 0.05) -> RankReport:
    far = far_test(m)
    return finner_posthoc(far.avg_ranks, far.n_problems, m.n_models, alpha_sig, m.model_ids,
                          far.statistic, far.p_value)


# -- CSV ---------------------------------------------------------------------------

def write_profiles_csv(curves, path, header_comment: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model", "tau", "log10_tau", "rho"])
        for c in curves:
            for tau, rho in zip(c.tau, c.rho):
                wr.writerow([c.model_id, repr(float(tau)), repr(math.log10(tau)), repr(float(rho))])


def read_profiles_csv(path) -> list:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    by_model: dict = {}
    for r in rows:
        by_model.setdefault(r["model"], []).append((float(r["tau"]), float(r["rho"])))
    return [ProfileCurve(k, np.array([a for a, _ in v]), np.array([b for _, b in v]))
            for k, v in by_model.items()]


def write_rank_report_csv(report: RankReport, path, header_comment: Optional[str] = None) -> None:
    """Rows ``Model, FAR, p_F-value, H0``; the control shows ``-`` in the last two."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["Model", "FAR", "p_F-value", "H0"])
        for mid, far, p, decision in report.rows():
            wr.writerow([mid, f"{far:.2f}", "-" if p is None else f"{p:.6f}", "-" if decision is None else decision])
