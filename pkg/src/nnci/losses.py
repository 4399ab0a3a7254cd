"""Training objectives.

Every loss is a mean over samples. ``q_pred`` is always the factual
prediction: entry i comes from the head matching ``t[i]`` (see
:func:`factual`). The compound objective is

    outcome_mse + alpha * propensity_ce + beta * targeted_term

where the targeted term scores the fluctuated prediction
q + epsilon * (t / g - (1 - t) / (1 - g)) against y, with g clipped into
[g_clip, 1 - g_clip] before dividing.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

__all__ = [
    "LossConfig",
    "factual",
    "outcome_mse",
    "propensity_ce",
    "propensity_ce_grad",
    "dragonnet_objective",
    "targeted_term",
    "total_objective",
    "objective_with_grads",
    "CE_FLOOR",
]

CE_FLOOR = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    epsilon_init: float = 0.0
    g_clip: float = 0.01
    propensity_loss: str = "bce"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 < self.g_clip < 0.5:
            raise ValueError("g_clip must lie in (0, 0.5)")
        if self.propensity_loss != "bce":
            raise ValueError("only binary cross-entropy ('bce') is supported as the propensity loss")

    def to_dict(self) -> dict:
        return asdict(self)


def _vec(a, name):
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError(f"{name}: empty input (n = 0)")
    return a


def _check(*arrays):
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("inputs must have equal length")


def factual(q0, q1, t):
    """Pick q1 where t == 1 and q0 elsewhere."""
    t = np.asarray(t, dtype=float).ravel()
    return np.where(t == 1, np.asarray(q1, dtype=float).ravel(), np.asarray(q0, dtype=float).ravel())


def outcome_mse(q_pred, y) -> float:
    q = _vec(q_pred, "q_pred")
    y = _vec(y, "y")
    _check(q, y)
    r = q - y
    return float(np.mean(r * r))


def propensity_ce(g, t, floor: float = CE_FLOOR) -> float:
    g = _vec(g, "g")
    t = _vec(t, "t")
    _check(g, t)
    return float(-np.mean(t * np.log(np.maximum(g, floor)) + (1.0 - t) * np.log(np.maximum(1.0 - g, floor))))


def propensity_ce_grad(g, t, floor: float = CE_FLOOR) -> np.ndarray:
    """Per-sample derivative of :func:`propensity_ce` with respect to ``g``.

    Zero wherever the floor is active, matching the clamped value.
    """
    g = _vec(g, "g")
    t = _vec(t, "t")
    one_m = 1.0 - g
    d = np.zeros_like(g)
    np.divide(-t, g, out=d, where=g > floor)
    upper = np.zeros_like(g)
    np.divide(1.0 - t, one_m, out=upper, where=one_m > floor)
    return (d + upper) / g.shape[0]


def dragonnet_objective(q_pred, y, g, t, alpha: float = 1.0) -> float:
    mse = outcome_mse(q_pred, y)
    if alpha == 0:
        return mse
    return mse + alpha * propensity_ce(g, t)


def _fluctuation(t, g, g_clip):
    gc = np.clip(g, g_clip, 1.0 - g_clip)
    return t / gc - (1.0 - t) / (1.0 - gc), gc


def targeted_term(y, t, q_pred, g, epsilon: float, g_clip: float = 0.01) -> float:
    y = _vec(y, "y")
    t = _vec(t, "t")
    q = _vec(q_pred, "q_pred")
    g = _vec(g, "g")
    _check(y, t, q, g)
    h, _ = _fluctuation(t, g, g_clip)
    # (q + eps h) - y, ordered as in outcome_mse so eps = 0 reproduces it bitwise
    r = (q + epsilon * h) - y
    return float(np.mean(r * r))


def total_objective(q_pred, y, g, t, alpha: float = 1.0, beta: float = 1.0,
                    epsilon: float = 0.0, g_clip: float = 0.01) -> float:
    base = dragonnet_objective(q_pred, y, g, t, alpha)
    if beta == 0:
        return base
    return base + beta * targeted_term(y, t, q_pred, g, epsilon, g_clip)


def objective_with_grads(q_pred, y, t, g: Optional[np.ndarray], cfg: LossConfig, epsilon: float = 0.0):
    """Value of the compound objective and its partial derivatives.

    Returns ``(value, d_q, d_g, d_epsilon)`` where ``d_q``/``d_g`` are
    per-sample derivatives (already divided by n). ``d_g`` is ``None`` when
    neither propensity term is active; ``g`` may then be ``None`` too.
    """
    q = _vec(q_pred, "q_pred")
    y = _vec(y, "y")
    t = _vec(t, "t")
    _check(q, y, t)
    n = q.shape[0]
    r = q - y
    value = float(np.mean(r * r))
    d_q = 2.0 * r / n
    d_g = None
    d_eps = 0.0
    if cfg.alpha == 0 and cfg.beta == 0:
        return value, d_q, d_g, d_eps
    if g is None:
        raise ValueError("propensity predictions are required when alpha or beta is non-zero")
    g = _vec(g, "g")
    _check(q, g)
    d_g = np.zeros(n)
    if cfg.alpha:
        value += cfg.alpha * propensity_ce(g, t)
        d_g += cfg.alpha * propensity_ce_grad(g, t)
    if cfg.beta:
        h, gc = _fluctuation(t, g, cfg.g_clip)
        rt = (q + epsilon * h) - y
        value += cfg.beta * float(np.mean(rt * rt))
        d_q = d_q + cfg.beta * 2.0 * rt / n
        d_eps = cfg.beta * float(2.0 * np.sum(rt * h) / n)
        inside = (g > cfg.g_clip) & (g < 1.0 - cfg.g_clip)
        dh = -t / (gc * gc) - (1.0 - t) / ((1.0 - gc) ** 2)
        d_g += np.where(inside, cfg.beta * 2.0 * rt * epsilon * dh / n, 0.0)
    return value, d_q, d_g, d_eps
