import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nnci.losses import (LossConfig, dragonnet_objective, objective_with_grads, outcome_mse, propensity_ce,
                         targeted_term, total_objective)
from oracles import central_differences, relative_error


def test_outcome_mse_examples():
    assert outcome_mse([1, 2], [1, 2]) == 0.0
    assert outcome_mse([1, 2], [0, 0]) == 2.5
    assert outcome_mse([1 + 7, 2 + 7], [0 + 7, 0 + 7]) == 2.5
    with pytest.raises(ValueError):
        outcome_mse([], [])
    with pytest.raises(ValueError):
        outcome_mse([1, 2], [1])


def test_propensity_ce_examples():
    assert propensity_ce([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-6)
    for t in ([0, 1, 1], [1, 1, 1]):
        assert propensity_ce([0.5] * 3, t) == pytest.approx(math.log(2), abs=1e-15)
    assert propensity_ce([0.9], [1]) == pytest.approx(0.10536, abs=1e-5)
    # the floor keeps a confidently wrong classifier finite
    assert propensity_ce([0.0], [1]) == pytest.approx(-math.log(1e-7))


def test_dragonnet_objective_examples():
    q, y = [1.0, 2.0], [0.0, 0.0]
    assert dragonnet_objective(q, y, [0.5, 0.5], [0, 1], alpha=0) == outcome_mse(q, y)
    assert dragonnet_objective(q, y, [0.5, 0.5], [0, 1], alpha=1) == pytest.approx(3.19315, abs=1e-5)
    assert dragonnet_objective(y, y, [0.0, 1.0], [0, 1]) == pytest.approx(0.0, abs=1e-6)


def test_targeted_term_examples():
    assert targeted_term([1.0], [1], [1.0], [0.5], 0.1) == pytest.approx(0.04, abs=1e-15)
    a = targeted_term([0.3, 1.0], [0, 1], [0.1, 0.4], [0.001, 0.001], 0.2, g_clip=0.01)
    b = targeted_term([0.3, 1.0], [0, 1], [0.1, 0.4], [0.01, 0.01], 0.2, g_clip=0.01)
    assert a == b


def test_epsilon_gradient_closed_form(rng):
    n = 9
    q, y = rng.normal(size=n), rng.normal(size=n)
    t = (rng.uniform(size=n) < 0.5).astype(float)
    g = rng.uniform(0.1, 0.9, size=n)
    _, _, _, d_eps = objective_with_grads(q, y, t, g, LossConfig(alpha=1, beta=1), 0.0)
    h = t / g - (1 - t) / (1 - g)
    assert d_eps == pytest.approx(-2.0 / n * np.sum((y - q) * h), rel=1e-12)


def test_epsilon_stationary_at_perfect_fit(rng):
    y = rng.normal(size=6)
    t = np.array([0, 1, 0, 1, 1, 0.0])
    g = rng.uniform(0.2, 0.8, size=6)
    _, _, _, d_eps = objective_with_grads(y, y, t, g, LossConfig(alpha=0, beta=1), 0.0)
    assert d_eps == 0.0
    for eps in (-0.1, 0.05):
        assert targeted_term(y, t, y, g, eps) > targeted_term(y, t, y, g, 0.0) == 0.0


@pytest.mark.parametrize("alpha,beta", [(1, 1), (0, 1), (1, 0), (0.5, 2.0)])
def test_objective_gradients_match_finite_differences(alpha, beta, rng):
    n = 8
    q, y = rng.normal(size=n), rng.normal(size=n)
    t = (rng.uniform(size=n) < 0.5).astype(float)
    g = rng.uniform(0.05, 0.95, size=n)
    eps = np.array([0.17])
    cfg = LossConfig(alpha=alpha, beta=beta)
    value, d_q, d_g, d_eps = objective_with_grads(q, y, t, g, cfg, float(eps[0]))
    f = lambda: total_objective(q, y, g, t, alpha, beta, float(eps[0]))  # noqa: E731
    assert value == pytest.approx(f(), rel=1e-13)
    fd = central_differences(f, {"q": q, "g": g, "eps": eps})
    assert relative_error(d_q, fd["q"]).max() < 1e-4
    assert relative_error(d_g, fd["g"]).max() < 1e-4
    assert relative_error([d_eps], fd["eps"]).max() < 1e-4


def test_tarnet_objective_needs_no_propensity(rng):
    value, d_q, d_g, d_eps = objective_with_grads([1.0, 2.0], [0.0, 0.0], [0, 1], None, LossConfig(0, 0))
    assert value == 2.5 and d_g is None and d_eps == 0.0
    with pytest.raises(ValueError):
        objective_with_grads([1.0], [0.0], [1], None, LossConfig(1, 0))


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        LossConfig(g_clip=0.5)
    with pytest.raises(ValueError):
        LossConfig(propensity_loss="hinge")


vec = arrays(np.float64, 5, elements=st.floats(-10, 10))
prob = arrays(np.float64, 5, elements=st.floats(0.001, 0.999))
bits = arrays(np.float64, 5, elements=st.sampled_from([0.0, 1.0]))


@given(vec, vec, prob, bits, st.floats(-2, 2))
def test_reduction_identities_bitwise(q, y, g, t, eps):
    assert total_objective(q, y, g, t, 1.0, 0.0, eps) == dragonnet_objective(q, y, g, t, 1.0)
    assert total_objective(q, y, g, t, 0.0, 0.0, eps) == outcome_mse(q, y)
    assert targeted_term(y, t, q, g, 0.0) == outcome_mse(q, y)


@given(vec, vec, prob, bits, st.floats(-2, 2))
def test_losses_non_negative(q, y, g, t, eps):
    assert outcome_mse(q, y) >= 0
    assert propensity_ce(g, t) >= 0
    assert targeted_term(y, t, q, g, eps) >= 0
