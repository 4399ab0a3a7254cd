"""Optimization loops, standardization and early stopping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset
from .losses import LossConfig, factual, objective_with_grads, propensity_ce, propensity_ce_grad
from .models import ThreeHeadModel, reinit_heads
from .neighbors import NeighborFeatures

__all__ = [
    "TrainConfig",
    "Scaler",
    "History",
    "TrainingDivergedError",
    "standardize",
    "fit_end_to_end",
    "fit_two_stage",
    "fit",
    "Adam",
    "SGDMomentum",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_decay_factor: float = 0.5
    lr_patience: int = 5
    min_learning_rate: float = 1e-6
    batch_size: int = 64
    max_epochs: int = 300
    early_stop_patience: int = 40
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be at least 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -- scaling ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scaler:
    """Column means/stds for X and mean/std for y (population std, ddof=0).

    Zero-variance columns get std 1 so they pass through centered.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, ds: Dataset) -> "Scaler":
        if ds.n < 1:
            raise ValueError("cannot standardize an empty dataset")
        x_std = ds.X.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_std = float(ds.y.std())
        return cls(ds.X.mean(axis=0), x_std, float(ds.y.mean()), y_std if y_std > 0 else 1.0)

    def transform_X(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def inverse_effect(self, effect):
        """Differences of outcomes only rescale; the mean cancels."""
        return np.asarray(effect, dtype=float) * self.y_std

    def transform(self, ds: Dataset) -> Dataset:
        """Scale X and y; ground-truth columns are left on the original scale."""
        return ds.replace(X=self.transform_X(ds.X), y=self.transform_y(ds.y))

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["x_mean"], dtype=float), np.array(d["x_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_std"]))


def standardize(train: Dataset):
    """Fit a :class:`Scaler` on ``train`` and return it with the scaled data."""
    scaler = Scaler.fit(train)
    return scaler, scaler.transform(train)


# -- optimizers -----------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.steps = 0

    def step(self, grads: dict, keys) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1.0 - b2 ** self.steps) / (1.0 - b1 ** self.steps)
        for k in keys:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params[k] -= lr_t * m / (np.sqrt(v) + self.eps)


class SGDMomentum:
    def __init__(self, params: dict, lr=1e-3, momentum=0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, keys) -> None:
        for k in keys:
            vel = self.vel[k]
            vel *= self.momentum
            vel -= self.lr * grads[k]
            self.params[k] += vel


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGDMomentum(params, cfg.learning_rate, cfg.momentum)


# -- history ----------------------------------------------------------------------------

@dataclass
class History:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def add(self, **row) -> None:
        self.records.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_csv(self, path) -> None:
        cols = ["stage", "epoch", "train_loss", "val_loss", "epsilon", "learning_rate"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.records:
                wr.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in cols])


# -- loops ------------------------------------------------------------------------------

def _carve_validation(n: int, cfg: TrainConfig, rng):
    perm = rng.permutation(n)
    n_val = int(math.floor(cfg.validation_fraction * n + 0.5)) if cfg.validation_fraction else 0
    if n - n_val < 1:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _check_inputs(model: ThreeHeadModel, train: Dataset, features: Optional[NeighborFeatures]):
    if not train.both_groups():
        raise ValueError("training data needs at least one treated and one control row")
    if model.arch.use_neighbor_features:
        if features is None:
            raise ValueError("this model uses neighbor features; features are required")
        if len(features) != train.n:
            raise ValueError(f"features have {len(features)} rows, training data {train.n}")


def _subset(train: Dataset, features, idx):
    return train.X[idx], train.t[idx], train.y[idx], (None if features is None else features.take(idx))


def _batch_objective(model, X, t, y, feats, cfg: LossConfig, stage: str, frozen=()):
    if stage == "propensity":
        q0, q1, g, traces = model.forward(X, *(
            (feats.ybar0, feats.ybar1) if feats is not None else (None, None)))
        zeros = np.zeros(g.shape[0])
        return model.backward(traces, zeros, zeros, propensity_ce_grad(g, t), 0.0, propensity_ce(g, t), frozen)
    return model.objective_gradients(X, t, y, feats, cfg, frozen)


def _eval_objective(model, X, t, y, feats, cfg: LossConfig, stage: str) -> float:
    """Data loss without the weight penalty, for validation."""
    ybar = (feats.ybar0, feats.ybar1) if feats is not None else (None, None)
    q0, q1, g, _ = model.forward(X, *ybar)
    if stage == "propensity":
        return propensity_ce(g, t)
    return objective_with_grads(factual(q0, q1, t), y, t, g, cfg, float(model.epsilon[0]))[0]


def _run(model: ThreeHeadModel, train: Dataset, features, loss_cfg: LossConfig, cfg: TrainConfig,
         stage: str, trainable: list, frozen: tuple, history: History, rng) -> None:
    fit_idx, val_idx = _carve_validation(train.n, cfg, rng)
    Xf, tf, yf, ff = _subset(train, features, fit_idx)
    Xv, tv, yv, fv = _subset(train, features, val_idx)
    params = model.parameters()
    opt = _optimizer(params, cfg)
    best, best_state, wait, plateau_wait = math.inf, None, 0, 0
    plateau_best = math.inf
    n = fit_idx.size
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            bundle = _batch_objective(model, Xf[b], tf[b], yf[b],
                                      None if ff is None else ff.take(b), loss_cfg, stage, frozen)
            if not math.isfinite(bundle.loss):
                raise TrainingDivergedError(
                    f"non-finite loss in stage {stage!r} at epoch {epoch}, batch starting at {start}")
            opt.step(bundle.grads, trainable)
            model.touch()
            total += bundle.loss * b.size
            seen += b.size
        train_loss = total / seen
        if val_idx.size:
            val_loss = _eval_objective(model, Xv, tv, yv, fv, loss_cfg, stage)
        else:
            val_loss = _eval_objective(model, Xf, tf, yf, ff, loss_cfg, stage)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss in stage {stage!r} at epoch {epoch}")
        history.add(stage=stage, epoch=epoch, train_loss=float(train_loss), val_loss=float(val_loss),
                    epsilon=float(model.epsilon[0]), learning_rate=float(opt.lr))
        if val_loss < best:
            best, wait = val_loss, 0
            best_state = model.snapshot()
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                history.stopped_early = True
                break
        if val_loss < plateau_best:
            plateau_best, plateau_wait = val_loss, 0
        else:
            plateau_wait += 1
            if plateau_wait >= cfg.lr_patience:
                opt.lr = max(cfg.min_learning_rate, opt.lr * cfg.lr_decay_factor)
                plateau_wait = 0
    if best_state is not None:
        model.restore({k: best_state[k] for k in trainable})


def _trainable(model: ThreeHeadModel, prefixes, with_epsilon: bool) -> list:
    keys = [k for k in model.parameters() if k != "epsilon" and k.split(".")[0] in prefixes]
    if with_epsilon:
        keys.append("epsilon")
    return keys


def fit_end_to_end(model: ThreeHeadModel, train: Dataset, features: Optional[NeighborFeatures],
                   loss_cfg: LossConfig, train_cfg: TrainConfig):
    """Train all parameters jointly by mini-batch gradient descent.

    epsilon is trained only when ``loss_cfg.beta > 0``. Returns
    ``(model, history)``; ``model`` is updated in place and ends at the
    best-validation parameters.
    """
    _check_inputs(model, train, features)
    if model.prop is None and (loss_cfg.alpha or loss_cfg.beta):
        raise ValueError("a model without a propensity head needs alpha = beta = 0")
    rng = np.random.default_rng(train_cfg.seed)
    model.epsilon[0] = loss_cfg.epsilon_init
    history = History()
    keys = _trainable(model, model.networks().keys(), loss_cfg.beta > 0)
    _run(model, train, features, loss_cfg, train_cfg, "end-to-end", keys, (), history, rng)
    return model, history


def fit_two_stage(model: ThreeHeadModel, train: Dataset, features: Optional[NeighborFeatures],
                  loss_cfg: LossConfig, train_cfg: TrainConfig):
    """Propensity pre-training, then outcome heads on a frozen representation.

    Stage 1 fits the representation and propensity head on cross-entropy.
    Stage 2 re-initializes both outcome heads and fits only them on outcome
    MSE; the representation and propensity parameters are not touched.
    """
    if model.prop is None:
        raise ValueError("two-stage training needs a propensity head")
    _check_inputs(model, train, features)
    rng = np.random.default_rng(train_cfg.seed)
    history = History()
    stage1 = _trainable(model, ("rep", "prop"), False)
    _run(model, train, features, loss_cfg, train_cfg, "propensity", stage1,
         ("head0", "head1", "epsilon"), history, rng)
    reinit_heads(model, seed=rng.integers(2 ** 32))
    stage2 = _trainable(model, ("head0", "head1"), False)
    mse_only = LossConfig(alpha=0.0, beta=0.0, g_clip=loss_cfg.g_clip)
    _run(model, train, features, mse_only, train_cfg, "outcome", stage2,
         ("rep", "prop", "epsilon"), history, rng)
    return model, history


def fit(model: ThreeHeadModel, train: Dataset, features, loss_cfg: LossConfig, train_cfg: TrainConfig):
    """Dispatch on the model family: NEDnet trains in two stages, the rest end to end.

    TARnet models always train on outcome MSE alone.
    """
    family = model.arch.family
    if family == "nednet":
        return fit_two_stage(model, train, features, loss_cfg, train_cfg)
    if family == "tarnet":
        loss_cfg = LossConfig(alpha=0.0, beta=0.0, g_clip=loss_cfg.g_clip)
    return fit_end_to_end(model, train, features, loss_cfg, train_cfg)
