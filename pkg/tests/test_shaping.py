import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from echo_lab.shaping import (
    ShapingParams,
    as_score,
    critic_reward,
    difficulty_weight,
    intrinsic_gain,
    linear_critic_reward,
    linear_gain,
)

P = ShapingParams(eta=0.1)
scores = st.floats(0.0, 1.0, allow_nan=False)
etas = st.floats(1e-3, 10.0, allow_nan=False)


def midpoint_integral(f, a, b, panels=10_000):
    h = (b - a) / panels
    x = a + h * (np.arange(panels) + 0.5)
    return float(np.sum(f(x)) * h)


@pytest.mark.parametrize(
    "s, expected",
    [(0.0, 1 / 1.1), (1.0, 10.0), (0.9, 5.0)],
)
def test_difficulty_weight_examples(s, expected):
    assert difficulty_weight(s, P) == pytest.approx(expected, rel=1e-12)


def test_intrinsic_gain_examples():
    assert intrinsic_gain(0.5, 0.5, P) == 0.0
    assert intrinsic_gain(0.0, 0.5, P) == pytest.approx(0.606136, abs=1e-6)
    high = intrinsic_gain(0.9, 0.95, P)
    low = intrinsic_gain(0.1, 0.15, P)
    assert high == pytest.approx(0.287682, abs=1e-6)
    assert low == pytest.approx(0.051293, abs=1e-6)
    assert high > low


def test_critic_reward_examples():
    assert critic_reward(0.2, 0.8, ShapingParams(0.1, 1.0)) == intrinsic_gain(0.2, 0.8, P)
    half = ShapingParams(0.1, 0.5)
    assert critic_reward(0.8, 0.2, half) == pytest.approx(0.5 * intrinsic_gain(0.8, 0.2, P))
    for lam in (0.0, 0.5, 1.0, 3.0):
        assert critic_reward(0.3, 0.3, ShapingParams(0.1, lam)) == 0.0


def test_linear_gain_examples():
    assert linear_gain(0.9, 0.95) == pytest.approx(0.05)
    assert linear_gain(0.1, 0.15) == pytest.approx(0.05)
    assert linear_gain(0.7, 0.7) == 0.0
    assert linear_critic_reward(0.8, 0.2, ShapingParams(0.1, 0.5)) == pytest.approx(-0.3)


@pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan"), float("inf")])
def test_score_validation(bad):
    with pytest.raises(ValueError):
        as_score(bad)
    with pytest.raises(ValueError):
        intrinsic_gain(bad, 0.5)


@pytest.mark.parametrize("eta, lam", [(0.0, 1.0), (-0.1, 1.0), (0.1, -1.0), (float("nan"), 1.0)])
def test_params_validation(eta, lam):
    with pytest.raises(ValueError):
        ShapingParams(eta, lam)


def test_score_one_is_finite():
    g = intrinsic_gain(0.0, 1.0, P)
    assert math.isfinite(g) and g == pytest.approx(math.log(1.1 / 0.1))


@given(scores, scores, scores, etas)
def test_additivity(a, m, b, eta):
    p = ShapingParams(eta)
    assert abs(intrinsic_gain(a, m, p) + intrinsic_gain(m, b, p) - intrinsic_gain(a, b, p)) < 1e-12


@given(scores, scores, etas)
def test_antisymmetry_and_sign(a, b, eta):
    p = ShapingParams(eta)
    g = intrinsic_gain(a, b, p)
    assert abs(g + intrinsic_gain(b, a, p)) < 1e-12
    assert np.sign(g) == np.sign(b - a)


@given(st.floats(0.0, 0.9), st.floats(0.0, 0.9), st.floats(1e-3, 0.1), etas)
def test_saturation_awareness(a, a2, delta, eta):
    lo, hi = sorted((a, a2))
    if hi - lo < 1e-6 or hi + delta > 1.0:
        return
    p = ShapingParams(eta)
    assert intrinsic_gain(hi, hi + delta, p) > intrinsic_gain(lo, lo + delta, p)


@settings(max_examples=50)
@given(scores, scores, st.floats(0.01, 2.0))
def test_matches_quadrature(a, b, eta):
    p = ShapingParams(eta)
    f = lambda s: 1.0 / (1.0 - s + eta)
    ref, _ = quad(f, a, b, epsabs=1e-13, epsrel=1e-13)
    assert abs(ref - intrinsic_gain(a, b, p)) < 1e-8
    # independent midpoint rule, loose because of its O(h^2) error
    assert abs(midpoint_integral(f, a, b) - intrinsic_gain(a, b, p)) < 1e-6


def test_barrier_monotone():
    s = np.linspace(0.0, 1.0, 1001)
    w = np.array([difficulty_weight(x, P) for x in s])
    assert np.all(np.diff(w) > 0)
    assert w[-1] == pytest.approx(1 / P.eta)
