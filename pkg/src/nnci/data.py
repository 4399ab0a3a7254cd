"""Datasets, the hidden-confounder synthetic generator, CSV ingestion and splitting.

All randomness goes through ``numpy.random.Generator`` backed by PCG64
(``numpy.random.default_rng``), seeded explicitly, so a given seed produces the
same draws on every platform.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "SyntheticConfig",
    "CsvSchema",
    "DataFormatError",
    "GroundTruthUnavailable",
    "generate_synthetic",
    "true_ate",
    "load_csv",
    "save_csv",
    "split",
    "sigmoid",
]


class DataFormatError(ValueError):
    """Raised for unreadable or invalid dataset files."""


class GroundTruthUnavailable(ValueError):
    """Raised when an operation needs mu0/mu1 and the dataset lacks them."""

    def __init__(self, msg: str = "ground truth unavailable"):
        super().__init__(msg)


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _frozen(a, dtype=float, ndim=1):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 1)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observational data: covariates, binary treatment, factual outcome.

    ``mu0``/``mu1`` hold the noiseless potential outcomes when the generator
    knows them. Arrays are copied and made read-only on construction.
    ``flags`` carries non-fatal warnings, e.g. ``"missing-treated-group"``
    after a split left one arm empty.
    """

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None
    name: str = ""
    flags: tuple = ()
    covariate_names: Optional[tuple] = None
    # generator internals (hidden confounder); not part of the observed data
    w: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        X = _frozen(self.X, ndim=2)
        t = _frozen(self.t)
        y = _frozen(self.y)
        n = X.shape[0]
        if t.shape[0] != n or y.shape[0] != n:
            raise ValueError(f"row counts differ: X={n}, t={t.shape[0]}, y={y.shape[0]}")
        if n and not np.all((t == 0) | (t == 1)):
            raise ValueError("treatment values must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        for attr in ("mu0", "mu1", "w"):
            v = getattr(self, attr)
            if v is not None:
                v = _frozen(v)
                if v.shape[0] != n:
                    raise ValueError(f"{attr} has length {v.shape[0]}, expected {n}")
                object.__setattr__(self, attr, v)
        if self.covariate_names is not None:
            names = tuple(self.covariate_names)
            if len(names) != X.shape[1]:
                raise ValueError("covariate_names does not match the number of columns")
            object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return self.mu0 is not None and self.mu1 is not None

    @property
    def n_treated(self) -> int:
        return int(np.sum(self.t == 1))

    @property
    def n_control(self) -> int:
        return int(np.sum(self.t == 0))

    def both_groups(self) -> bool:
        return self.n_treated >= 1 and self.n_control >= 1

    def take(self, idx, name: Optional[str] = None) -> "Dataset":
        """Row subset in the order given by ``idx``."""
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(
            X=self.X[idx], t=self.t[idx], y=self.y[idx],
            mu0=pick(self.mu0), mu1=pick(self.mu1),
            name=self.name if name is None else name,
            covariate_names=self.covariate_names, w=pick(self.w),
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(X=self.X, t=self.t, y=self.y, mu0=self.mu0, mu1=self.mu1,
                      name=self.name, flags=self.flags,
                      covariate_names=self.covariate_names, w=self.w)
        fields.update(changes)
        return Dataset(**fields)


@dataclass(frozen=True)
class SyntheticConfig:
    n: int
    sigma_z0: float = 3.0
    sigma_z1: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not (self.sigma_z0 > 0 and self.sigma_z1 > 0):
            raise ValueError("sigma_z0 and sigma_z1 must be positive")


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Draw the hidden-confounder toy dataset.

    w ~ Bern(0.5); t | w ~ Bern(0.75 w + 0.25 (1 - w));
    x | w ~ N(w, sigma_z1^2 w + sigma_z0^2 (1 - w));
    y | t, w ~ Bern(sigmoid(3 (w + 2 (2 t - 1)))).

    ``mu0``/``mu1`` store the Bernoulli means sigmoid(3(w - 2)) and
    sigmoid(3(w + 2)), not sampled counterfactuals.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n
    w = rng.binomial(1, 0.5, size=n).astype(float)
    t = rng.binomial(1, 0.75 * w + 0.25 * (1.0 - w)).astype(float)
    sd = config.sigma_z1 * w + config.sigma_z0 * (1.0 - w)
    x = rng.normal(loc=w, scale=sd)
    p = sigmoid(3.0 * (w + 2.0 * (2.0 * t - 1.0)))
    y = rng.binomial(1, p).astype(float)
    return Dataset(
        X=x.reshape(n, 1), t=t, y=y,
        mu0=sigmoid(3.0 * (w - 2.0)), mu1=sigmoid(3.0 * (w + 2.0)),
        name=f"synthetic-seed{config.seed}", covariate_names=("x1",), w=w,
    )


def true_ate(ds: Dataset) -> float:
    if not ds.has_ground_truth:
        raise GroundTruthUnavailable()
    if ds.n == 0:
        raise ValueError("empty dataset")
    return float(np.mean(ds.mu1 - ds.mu0))


# -- CSV ----------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for a dataset file.

    ``covariates`` lists column names (or 0-based indices); ``None`` means
    every column not claimed by another role.
    """

    treatment: str = "t"
    outcome: str = "y"
    covariates: Optional[Sequence] = None
    mu0: Optional[str] = "mu0"
    mu1: Optional[str] = "mu1"
    delimiter: str = ","
    require_ground_truth: bool = False


def _resolve(header: list, col, path) -> int:
    if isinstance(col, int):
        if not 0 <= col < len(header):
            raise DataFormatError(f"{path}: column index {col} out of range")
        return col
    try:
        return header.index(col)
    except ValueError:
        raise DataFormatError(f"{path}: column {col!r} not found in header") from None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Read a dataset from a headed CSV file.

    Missing ``mu0``/``mu1`` columns are tolerated unless
    ``schema.require_ground_truth`` is set. Errors name the 1-based data row
    (header excluded) and the column.
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (header row required)") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    t_col = _resolve(header, schema.treatment, path)
    y_col = _resolve(header, schema.outcome, path)
    gt = {}
    for role in ("mu0", "mu1"):
        col = getattr(schema, role)
        if col is None:
            continue
        if isinstance(col, str) and col not in header:
            if schema.require_ground_truth:
                raise DataFormatError(f"{path}: column {col!r} not found in header")
            continue
        gt[role] = _resolve(header, col, path)
    if schema.covariates is None:
        claimed = {t_col, y_col, *gt.values()}
        cov_cols = [i for i in range(len(header)) if i not in claimed]
    else:
        cov_cols = [_resolve(header, c, path) for c in schema.covariates]

    def num(row, r, c):
        try:
            v = float(row[c])
        except IndexError:
            raise DataFormatError(f"{path}: row {r}: missing column {header[c]!r}") from None
        except ValueError:
            raise DataFormatError(
                f"{path}: row {r}, column {header[c]!r}: malformed number {row[c]!r}") from None
        if not math.isfinite(v):
            raise DataFormatError(f"{path}: row {r}, column {header[c]!r}: non-finite value")
        return v

    n = len(rows)
    X = np.empty((n, len(cov_cols)))
    t = np.empty(n)
    y = np.empty(n)
    mus = {role: np.empty(n) for role in gt}
    for i, row in enumerate(rows):
        r = i + 1
        tv = num(row, r, t_col)
        if tv not in (0.0, 1.0):
            raise DataFormatError(
                f"{path}: row {r}, column {header[t_col]!r}: treatment must be 0 or 1, got {row[t_col]!r}")
        t[i] = tv
        y[i] = num(row, r, y_col)
        for j, c in enumerate(cov_cols):
            X[i, j] = num(row, r, c)
        for role, c in gt.items():
            mus[role][i] = num(row, r, c)
    return Dataset(
        X=X, t=t, y=y, mu0=mus.get("mu0"), mu1=mus.get("mu1"), name=path.stem,
        covariate_names=tuple(header[c] for c in cov_cols),
    )


def save_csv(ds: Dataset, path, schema: CsvSchema = CsvSchema()) -> None:
    """Write ``ds`` so that ``load_csv(path, schema)`` reads it back."""
    names = list(ds.covariate_names or [f"x{j + 1}" for j in range(ds.d)])
    if schema.covariates is not None:
        names = [str(c) for c in schema.covariates]
    header = [schema.treatment, schema.outcome]
    cols = [ds.t, ds.y]
    if ds.has_ground_truth and schema.mu0 and schema.mu1:
        header += [schema.mu0, schema.mu1]
        cols += [ds.mu0, ds.mu1]
    header += names
    cols += [ds.X[:, j] for j in range(ds.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        wr.writerow(header)
        for i in range(ds.n):
            wr.writerow([_fmt(c[i]) for c in cols])


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2 ** 53 else repr(v)


# -- splitting ----------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Uniformly shuffled train/test partition of the rows.

    The train part gets ``round(train_fraction * n)`` rows (halves round up).
    A part that ends up without treated or control rows is returned with a
    ``missing-*-group`` flag and a ``UserWarning`` is issued.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_train = _round_half_up(train_fraction * ds.n)
    parts = []
    for idx, tag in ((perm[:n_train], "train"), (perm[n_train:], "test")):
        part = ds.take(idx, name=f"{ds.name}:{tag}" if ds.name else tag)
        flags = []
        if part.n_treated == 0:
            flags.append("missing-treated-group")
        if part.n_control == 0:
            flags.append("missing-control-group")
        if flags:
            warnings.warn(f"{tag} part has an empty group: {', '.join(flags)}", stacklevel=2)
            part = part.replace(flags=tuple(flags))
        parts.append(part)
    return parts[0], parts[1]
