"""ATE and PEHE estimation errors.

``epsilon_pehe`` is the mean squared ITE error, with no square root.
``sqrt_pehe`` gives the rooted variant common elsewhere in the literature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["EffectEstimate", "epsilon_ate", "epsilon_pehe", "sqrt_pehe", "true_effects"]


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    ite_hat: np.ndarray
    model_id: str = ""
    realization_id: int = 0

    @property
    def ate_hat(self) -> float:
        return float(np.mean(self.ite_hat))


def _aligned(mu1, mu0, ite_hat):
    mu1 = np.asarray(mu1, dtype=float).ravel()
    mu0 = np.asarray(mu0, dtype=float).ravel()
    ite_hat = np.asarray(ite_hat, dtype=float).ravel()
    if not (mu1.shape == mu0.shape == ite_hat.shape):
        raise ValueError("mu1, mu0 and ite_hat must have equal length")
    if mu1.size == 0:
        raise ValueError("metrics need at least one sample (n = 0)")
    return mu1, mu0, ite_hat


def true_effects(mu1, mu0) -> np.ndarray:
    return np.asarray(mu1, dtype=float) - np.asarray(mu0, dtype=float)


def epsilon_ate(mu1, mu0, ite_hat) -> float:
    """|mean(mu1 - mu0) - mean(ite_hat)|"""
    mu1, mu0, ite_hat = _aligned(mu1, mu0, ite_hat)
    return abs(float(np.mean(mu1 - mu0)) - float(np.mean(ite_hat)))


def epsilon_pehe(mu1, mu0, ite_hat) -> float:
    """mean(((mu1 - mu0) - ite_hat) ** 2)"""
    mu1, mu0, ite_hat = _aligned(mu1, mu0, ite_hat)
    r = (mu1 - mu0) - ite_hat
    return float(np.mean(r * r))


def sqrt_pehe(mu1, mu0, ite_hat) -> float:
    return math.sqrt(epsilon_pehe(mu1, mu0, ite_hat))
