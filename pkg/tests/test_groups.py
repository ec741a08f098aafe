from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from echo_lab.groups import critic_advantages, normalize_group, policy_advantages
from echo_lab.shaping import ShapingParams


def group(s_o, s_r):
    return SimpleNamespace(s_o=s_o, s_r=list(s_r))


def test_normalize_examples():
    np.testing.assert_allclose(normalize_group([1, 2, 3]), [-1.224745, 0, 1.224745], atol=1e-6)
    assert normalize_group([5, 5, 5, 5]).tolist() == [0, 0, 0, 0]
    np.testing.assert_allclose(normalize_group([0, 1]), [-1, 1], atol=1e-12)


@pytest.mark.parametrize("bad", [[], [1.0], [1.0, float("nan")], [float("inf"), 0.0]])
def test_normalize_rejects(bad):
    with pytest.raises(ValueError):
        normalize_group(bad)


def test_policy_advantages():
    np.testing.assert_allclose(
        policy_advantages(group(0.5, [0.25, 0.5, 0.75, 1.0])),
        [-1.341641, -0.447214, 0.447214, 1.341641],
        atol=1e-6,
    )
    assert policy_advantages(group(0.5, [0.5] * 8)).tolist() == [0.0] * 8
    np.testing.assert_allclose(policy_advantages(group(0.0, [0.0, 1.0])), [-1, 1])


def test_critic_advantages():
    p = ShapingParams(0.1)
    assert critic_advantages(group(0.5, [0.5, 0.5]), p).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(critic_advantages(group(0.0, [0.5, 1.0]), p), [-1, 1], atol=1e-12)
    adv = critic_advantages(group(0.3, [0.1, 0.2, 0.9, 0.4]), p)
    assert int(np.argmax(adv)) == 2


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(st.lists(finite, min_size=2, max_size=16))
def test_zero_mean_unit_std(xs):
    a = normalize_group(xs)
    if np.std(xs) < 1e-8:
        assert np.all(a == 0)
    else:
        assert abs(a.sum()) < 1e-9 * len(xs)
        assert abs(a.std() - 1.0) < 1e-9


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16), st.floats(-100, 100))
def test_shift_invariance(xs, c):
    if np.std(xs) < 1e-6:
        return
    np.testing.assert_allclose(normalize_group(np.add(xs, c)), normalize_group(xs), atol=1e-9)


@given(
    st.sampled_from([i / 6 for i in range(7)]),
    st.lists(st.sampled_from([i / 6 for i in range(7)]), min_size=2, max_size=8),
)
def test_critic_rank_order_matches_scores(s_o, s_r):
    adv = critic_advantages(group(s_o, s_r), ShapingParams(0.1))
    if np.std(s_r) == 0:
        return
    for i in range(len(s_r)):
        for j in range(len(s_r)):
            if s_r[i] < s_r[j]:
                assert adv[i] < adv[j]
            elif s_r[i] == s_r[j]:
                assert adv[i] == pytest.approx(adv[j], abs=1e-12)
