"""Group-relative advantages for the policy and critic tracks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from echo_lab.shaping import DEFAULT_SHAPING, ShapingParams, critic_reward

DEGENERATE_STD = 1e-8


def normalize_group(raw: Sequence[float]) -> np.ndarray:
    """Standardize ``raw`` with its mean and population std.

    Groups whose std falls below ``DEGENERATE_STD`` carry no ranking signal and
    map to all zeros.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"a group needs at least 2 values, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("group values must be finite")
    std = x.std()
    if std < DEGENERATE_STD:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def policy_advantages(group) -> np.ndarray:
    """A_P: normalized refinement scores, element j pairs with refinement j."""
    return normalize_group(group.s_r)


def critic_rewards(
    group,
    p: ShapingParams = DEFAULT_SHAPING,
    reward_fn: Callable[[float, float, ShapingParams], float] = critic_reward,
) -> np.ndarray:
    return np.array([reward_fn(group.s_o, s, p) for s in group.s_r], dtype=np.float64)


def critic_advantages(
    group,
    p: ShapingParams = DEFAULT_SHAPING,
    reward_fn: Callable[[float, float, ShapingParams], float] = critic_reward,
) -> np.ndarray:
    """A_C: normalized critic rewards, element j pairs with critique j."""
    return normalize_group(critic_rewards(group, p, reward_fn))
