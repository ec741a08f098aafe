"""Saturation-aware reward kernel.

The difficulty weight ``omega(s) = 1 / (1 - s + eta)`` is a soft barrier that
grows as the score approaches the ceiling. Integrating it between the
pre-refinement score ``s_o`` and the post-refinement score ``s_r`` gives the
intrinsic gain, which is used (optionally with a down-weighted negative
branch) as the critic's reward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


def as_score(value: float) -> float:
    """Validate a reward-model score and return it as a float."""
    s = float(value)
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"score must lie in [0, 1], got {value!r}")
    return s


@dataclass(frozen=True)
class ShapingParams:
    eta: float = 0.1
    lam: float = 1.0  # weight on negative gains, applied before group normalization

    def __post_init__(self) -> None:
        if not (self.eta > 0.0) or not math.isfinite(self.eta):
            raise ValueError(f"eta must be positive and finite, got {self.eta!r}")
        if not (self.lam >= 0.0) or not math.isfinite(self.lam):
            raise ValueError(f"lambda must be non-negative and finite, got {self.lam!r}")


DEFAULT_SHAPING = ShapingParams()


def difficulty_weight(s: float, p: ShapingParams = DEFAULT_SHAPING) -> float:
    return 1.0 / (1.0 - as_score(s) + p.eta)


def intrinsic_gain(s_o: float, s_r: float, p: ShapingParams = DEFAULT_SHAPING) -> float:
    """Closed-form integral of :func:`difficulty_weight` from ``s_o`` to ``s_r``."""
    s_o, s_r = as_score(s_o), as_score(s_r)
    if s_o == s_r:
        return 0.0
    # log1p form keeps the sign exact for tiny score differences
    return math.log1p((s_r - s_o) / (1.0 - s_r + p.eta))


def critic_reward(s_o: float, s_r: float, p: ShapingParams = DEFAULT_SHAPING) -> float:
    g = intrinsic_gain(s_o, s_r, p)
    return g if g >= 0.0 else p.lam * g


def linear_gain(s_o: float, s_r: float) -> float:
    return as_score(s_r) - as_score(s_o)


def linear_critic_reward(s_o: float, s_r: float, p: ShapingParams = DEFAULT_SHAPING) -> float:
    """Linear-improvement baseline with the same negative-branch weighting."""
    d = linear_gain(s_o, s_r)
    return d if d >= 0.0 else p.lam * d
