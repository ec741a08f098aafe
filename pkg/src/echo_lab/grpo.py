"""Clipped importance-ratio surrogate with a per-token KL anchor.

The same objective serves both tracks. A :class:`TrackBatch` wraps a token
table from :mod:`echo_lab.models` (anything with ``seq``, ``logprobs(params)``
and ``grad(params, weights)``) together with the frozen old/reference
log-probabilities and one advantage per sequence.

    J = 1/N sum_i 1/|o_i| sum_t [ min(rho A_i, clip(rho, 1-eps, 1+eps) A_i) - beta * kl_t ]

Sequences without tokens contribute zero but still count towards N.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from echo_lab.models import Params, add_scaled


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 1e-2
    inner_epochs: int = 2

    def __post_init__(self) -> None:
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps!r}")
        if not (self.kl_beta >= 0.0) or not math.isfinite(self.kl_beta):
            raise ValueError(f"kl_beta must be >= 0, got {self.kl_beta!r}")
        if not (self.learning_rate > 0.0) or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if self.inner_epochs < 1:
            raise ValueError(f"inner_epochs must be >= 1, got {self.inner_epochs!r}")


def token_ratio(logp_live, logp_old):
    return np.exp(np.subtract(logp_live, logp_old))


def clipped_term(ratio, advantage, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def kl_token(logp_live, logp_ref):
    """``r - ln r - 1`` with ``r = p_ref / p_live``; zero iff the two agree."""
    log_r = np.subtract(logp_ref, logp_live)
    return np.expm1(log_r) - log_r


@dataclass(eq=False)
class TrackBatch:
    tokens: Any  # PolicyTokens | CriticTokens
    advantages: np.ndarray  # [num_sequences]
    logp_old: np.ndarray  # [num_tokens]
    logp_ref: np.ndarray
    logp_live: np.ndarray = field(default=None)  # type: ignore[assignment]
    group_ids: Optional[np.ndarray] = None  # owning rollout group per sequence

    def __post_init__(self) -> None:
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        if self.logp_live is None:
            self.logp_live = self.logp_old.copy()
        self.logp_live = np.asarray(self.logp_live, dtype=np.float64)
        n_tok = self.tokens.seq.size
        if not (self.logp_old.shape == self.logp_ref.shape == self.logp_live.shape == (n_tok,)):
            raise ValueError("per-token log-probability arrays must match the token table")
        if n_tok and self.tokens.seq.max() >= self.advantages.size:
            raise ValueError("token table references a sequence without an advantage")

    @property
    def num_sequences(self) -> int:
        return int(self.advantages.size)

    @property
    def token_counts(self) -> np.ndarray:
        return np.bincount(self.tokens.seq, minlength=self.num_sequences)

    def token_weights(self) -> np.ndarray:
        """``1 / (N |o_i|)`` broadcast to every token of sequence ``i``."""
        counts = self.token_counts
        return 1.0 / (self.num_sequences * counts[self.tokens.seq])

    def with_live(self, params: Params) -> "TrackBatch":
        return replace(self, logp_live=self.tokens.logprobs(params))


def surrogate_objective(batch: TrackBatch, cfg: GrpoConfig) -> float:
    if batch.num_sequences == 0:
        raise ValueError("surrogate objective of an empty batch")
    if batch.tokens.seq.size == 0:
        return 0.0
    adv = batch.advantages[batch.tokens.seq]
    ratio = token_ratio(batch.logp_live, batch.logp_old)
    per_tok = clipped_term(ratio, adv, cfg.clip_eps)
    if cfg.kl_beta:
        per_tok = per_tok - cfg.kl_beta * kl_token(batch.logp_live, batch.logp_ref)
    return float(np.sum(per_tok * batch.token_weights()))


def _dlogp_weights(batch: TrackBatch, cfg: GrpoConfig) -> np.ndarray:
    """dJ / d logp_live for every token."""
    adv = batch.advantages[batch.tokens.seq]
    ratio = token_ratio(batch.logp_live, batch.logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    # the unclipped branch is the one that carries gradient; ties go to it
    d = np.where(unclipped <= clipped, unclipped, 0.0)
    if cfg.kl_beta:
        d = d + cfg.kl_beta * np.expm1(batch.logp_ref - batch.logp_live)
    return d * batch.token_weights()


def objective_and_grad(params: Params, batch: TrackBatch, cfg: GrpoConfig) -> tuple[float, Params]:
    """Surrogate value and exact gradient at ``params``."""
    live = batch.with_live(params)
    value = surrogate_objective(live, cfg)
    return value, live.tokens.grad(params, _dlogp_weights(live, cfg))


def clip_fraction(batch: TrackBatch, cfg: GrpoConfig) -> float:
    """Fraction of tokens whose clipped branch is active (zero gradient)."""
    if batch.tokens.seq.size == 0:
        return 0.0
    adv = batch.advantages[batch.tokens.seq]
    ratio = token_ratio(batch.logp_live, batch.logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    return float(np.mean(unclipped > clipped))


def mean_kl(batch: TrackBatch) -> float:
    if batch.tokens.seq.size == 0:
        return 0.0
    return float(np.mean(kl_token(batch.logp_live, batch.logp_ref)))


@dataclass(frozen=True)
class UpdateInfo:
    objective: float  # surrogate at the start of the last inner epoch
    clip_fraction: float
    mean_kl: float
    num_tokens: int


def _grad_is_finite(g: Params) -> bool:
    return bool(np.all(np.isfinite(g.to_vector())))


def update_step(params: Params, batch: TrackBatch, cfg: GrpoConfig) -> tuple[Params, UpdateInfo]:
    """``inner_epochs`` plain gradient-ascent steps on the surrogate.

    Live log-probabilities are recomputed before every epoch, so ratios move
    away from 1 after the first pass. ``params`` is never modified.
    """
    current = params
    value, live = 0.0, batch
    for epoch in range(cfg.inner_epochs):
        live = batch.with_live(current)
        value = surrogate_objective(live, cfg)
        grad = live.tokens.grad(current, _dlogp_weights(live, cfg))
        if not (math.isfinite(value) and _grad_is_finite(grad)):
            raise NonFiniteGradientError(f"non-finite surrogate gradient at inner epoch {epoch}")
        current = add_scaled(current, grad, cfg.learning_rate)
    info = UpdateInfo(value, clip_fraction(live, cfg), mean_kl(live), int(batch.tokens.seq.size))
    return current, info
