"""Toy policy and critic with exact sampling, log-probabilities and gradients.

Policy: an independent categorical per (query, position) with logits
``theta[q, i, :]``. A refinement copies the proposal at unflagged positions
and resamples flagged positions with the proposal's token masked out.

Critic: one Bernoulli "this token is wrong" flag per position, with logit
``psi.flag_logits[q, i, tokens[i]] + psi.score_bias * (1 - s_o)``.

Besides the per-trajectory API, :class:`PolicyTokens` and :class:`CriticTokens`
hold flattened token tables so that a whole track batch can be re-scored and
differentiated in a few vectorized calls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from echo_lab.shaping import as_score
from echo_lab.toyworld import Trajectory, WorldSpec


def _frozen_copy(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = logits - m
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(log_sigmoid(z))


# --------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class PolicyParams:
    logits: np.ndarray  # [Q, L, V]

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3:
            raise ValueError(f"policy logits must be [Q, L, V], got shape {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("policy logits must be finite")

    @classmethod
    def init(cls, world: WorldSpec, rng: np.random.Generator, scale: float = 0.0) -> "PolicyParams":
        noise = rng.standard_normal(world.shape) * scale if scale else np.zeros(world.shape)
        return cls(noise)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(np.zeros_like(self.logits))

    def to_vector(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def with_vector(self, vec: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.asarray(vec, dtype=np.float64).reshape(self.logits.shape).copy())

    def is_frozen(self) -> bool:
        return not self.logits.flags.writeable

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return np.array_equal(self.logits, other.logits)


@dataclass(eq=False)
class CriticParams:
    flag_logits: np.ndarray  # [Q, L, V]
    score_bias: float = 0.0

    def __post_init__(self) -> None:
        self.flag_logits = np.asarray(self.flag_logits, dtype=np.float64)
        self.score_bias = float(self.score_bias)
        if self.flag_logits.ndim != 3:
            raise ValueError(f"flag logits must be [Q, L, V], got shape {self.flag_logits.shape}")
        if not (np.all(np.isfinite(self.flag_logits)) and np.isfinite(self.score_bias)):
            raise ValueError("critic parameters must be finite")

    @classmethod
    def init(
        cls,
        world: WorldSpec,
        rng: np.random.Generator,
        flag_logit: float = 0.0,
        scale: float = 0.0,
        score_bias: float = 0.0,
    ) -> "CriticParams":
        base = np.full(world.shape, float(flag_logit))
        if scale:
            base = base + rng.standard_normal(world.shape) * scale
        return cls(base, score_bias)

    def zeros_like(self) -> "CriticParams":
        return CriticParams(np.zeros_like(self.flag_logits), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.flag_logits.ravel(), [self.score_bias]])

    def with_vector(self, vec: np.ndarray) -> "CriticParams":
        vec = np.asarray(vec, dtype=np.float64)
        n = self.flag_logits.size
        return CriticParams(vec[:n].reshape(self.flag_logits.shape).copy(), float(vec[n]))

    def is_frozen(self) -> bool:
        return not self.flag_logits.flags.writeable

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CriticParams):
            return NotImplemented
        return self.score_bias == other.score_bias and np.array_equal(
            self.flag_logits, other.flag_logits
        )


Params = Union[PolicyParams, CriticParams]


def snapshot(params: Params) -> Params:
    """Deep, read-only copy (serves as the old and reference models)."""
    if params.is_frozen():
        return params
    if isinstance(params, PolicyParams):
        snap = PolicyParams.__new__(PolicyParams)
        snap.logits = _frozen_copy(params.logits)
        return snap
    snap = CriticParams.__new__(CriticParams)
    snap.flag_logits = _frozen_copy(params.flag_logits)
    snap.score_bias = params.score_bias
    return snap


def add_scaled(params: Params, grad: Params, alpha: float) -> Params:
    """Return ``params + alpha * grad`` as a new, writable parameter set."""
    if isinstance(params, PolicyParams):
        return PolicyParams(params.logits + alpha * grad.logits)
    return CriticParams(
        params.flag_logits + alpha * grad.flag_logits,
        params.score_bias + alpha * grad.score_bias,
    )


# --------------------------------------------------------------------------
# critiques


@dataclass(eq=False)
class Critique:
    flags: np.ndarray  # [L] bool
    flag_logprobs: np.ndarray  # [L]

    def __post_init__(self) -> None:
        self.flags = np.asarray(self.flags, dtype=bool)
        self.flag_logprobs = np.asarray(self.flag_logprobs, dtype=np.float64)
        if self.flags.shape != self.flag_logprobs.shape or self.flags.ndim != 1:
            raise ValueError("flags and flag_logprobs must be 1-D of equal length")
        if np.any(self.flag_logprobs > 0.0):
            raise ValueError("flag log-probabilities must be <= 0")

    @property
    def num_flags(self) -> int:
        return int(np.count_nonzero(self.flags))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Critique):
            return NotImplemented
        return np.array_equal(self.flags, other.flags) and np.array_equal(
            self.flag_logprobs, other.flag_logprobs
        )


# --------------------------------------------------------------------------
# sampling


def _sample_rows(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sample one index per row of a log-probability table."""
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(logp.shape[:-1]) * cdf[..., -1]
    idx = np.sum(cdf <= u[..., None], axis=-1)
    # zero-probability columns can never be selected, even at ties
    return np.minimum(idx, logp.shape[-1] - 1)


def policy_sample_proposal(
    theta: PolicyParams, query_id: int, rng: np.random.Generator
) -> Trajectory:
    logp = log_softmax(theta.logits[query_id])
    tokens = _sample_rows(logp, rng)
    lp = np.minimum(logp[np.arange(tokens.size), tokens], 0.0)
    return Trajectory(query_id, tokens, lp)


def critic_logits(
    psi: CriticParams, query_id: int, tokens: np.ndarray, s_o: float
) -> np.ndarray:
    L = tokens.shape[0]
    return psi.flag_logits[query_id, np.arange(L), tokens] + psi.score_bias * (1.0 - s_o)


def critic_sample(
    psi: CriticParams,
    query_id: int,
    proposal: Trajectory,
    s_o: float,
    rng: np.random.Generator,
) -> Critique:
    s_o = as_score(s_o)
    z = critic_logits(psi, query_id, proposal.tokens, s_o)
    log_p_true = log_sigmoid(z)
    flags = np.log(rng.random(z.shape)) < log_p_true
    lp = np.where(flags, log_p_true, log_sigmoid(-z))
    return Critique(flags, np.minimum(lp, 0.0))


def _masked_log_softmax(rows: np.ndarray, masked: np.ndarray) -> np.ndarray:
    """Log-softmax of each row with column ``masked[r]`` removed (``-1``: no mask)."""
    rows = np.array(rows, dtype=np.float64, copy=True)
    sel = masked >= 0
    rows[np.nonzero(sel)[0], masked[sel]] = -np.inf
    return log_softmax(rows)


def policy_sample_refinement(
    theta: PolicyParams,
    query_id: int,
    proposal: Trajectory,
    critique: Critique,
    rng: np.random.Generator,
) -> Trajectory:
    if critique.flags.shape != proposal.tokens.shape:
        raise ValueError("critique length does not match the proposal")
    tokens = proposal.tokens.copy()
    lp = np.zeros(tokens.shape, dtype=np.float64)
    pos = np.nonzero(critique.flags)[0]
    # one uniform per position keeps the stream layout independent of the flags
    u = rng.random(tokens.shape)
    if pos.size:
        logp = _masked_log_softmax(theta.logits[query_id, pos], proposal.tokens[pos])
        cdf = np.cumsum(np.exp(logp), axis=-1)
        idx = np.sum(cdf <= (u[pos] * cdf[:, -1])[:, None], axis=-1)
        idx = np.minimum(idx, logp.shape[-1] - 1)
        # guard against landing on the masked column through rounding at the cdf edge
        bad = idx == proposal.tokens[pos]
        if np.any(bad):
            idx[bad] = np.argmax(logp[bad], axis=-1)
        tokens[pos] = idx
        lp[pos] = np.minimum(logp[np.arange(pos.size), idx], 0.0)
    return Trajectory(query_id, tokens, lp)


# --------------------------------------------------------------------------
# per-sequence log-probabilities and gradients


def policy_logprob_and_grad(
    theta: PolicyParams,
    query_id: int,
    refinement: Trajectory,
    proposal: Trajectory,
    critique: Critique,
) -> tuple[float, PolicyParams]:
    """Log-probability of ``refinement`` given its critique, and its gradient.

    Copied positions contribute nothing; flagged positions contribute their
    masked-softmax log-probability.
    """
    flags = critique.flags
    if not (flags.shape == proposal.tokens.shape == refinement.tokens.shape):
        raise ValueError("refinement, proposal and critique lengths differ")
    if np.any(refinement.tokens[~flags] != proposal.tokens[~flags]):
        raise ValueError("refinement differs from the proposal at an unflagged position")
    if np.any(refinement.tokens[flags] == proposal.tokens[flags]):
        raise ValueError("refinement kept a masked token at a flagged position")
    table = PolicyTokens.from_refinements([(query_id, refinement, proposal, critique)])
    lp = table.logprobs(theta)
    return float(lp.sum()), table.grad(theta, np.ones_like(lp))


def critic_logprob_and_grad(
    psi: CriticParams,
    query_id: int,
    critique: Critique,
    proposal: Trajectory,
    s_o: float,
) -> tuple[float, CriticParams]:
    if critique.flags.shape != proposal.tokens.shape:
        raise ValueError("critique length does not match the proposal")
    table = CriticTokens.from_critiques([(query_id, critique, proposal, as_score(s_o))])
    lp = table.logprobs(psi)
    return float(lp.sum()), table.grad(psi, np.ones_like(lp))


# --------------------------------------------------------------------------
# flattened token tables


@dataclass(frozen=True, eq=False)
class PolicyTokens:
    """Sampled policy tokens, one row each; ``masked = -1`` means no mask."""

    query: np.ndarray
    pos: np.ndarray
    token: np.ndarray
    masked: np.ndarray
    seq: np.ndarray  # owning sequence index

    @property
    def size(self) -> int:
        return int(self.token.size)

    @classmethod
    def from_refinements(cls, items: Sequence[tuple]) -> "PolicyTokens":
        """``items``: ``(query_id, refinement, proposal, critique)``; flagged positions only."""
        cols: list[list[int]] = [[], [], [], [], []]
        for s, (q, ref, prop, crit) in enumerate(items):
            pos = np.nonzero(crit.flags)[0]
            cols[0].extend([q] * pos.size)
            cols[1].extend(pos.tolist())
            cols[2].extend(ref.tokens[pos].tolist())
            cols[3].extend(prop.tokens[pos].tolist())
            cols[4].extend([s] * pos.size)
        return cls(*(np.asarray(c, dtype=np.int64) for c in cols))

    @classmethod
    def from_proposals(cls, items: Sequence[Trajectory]) -> "PolicyTokens":
        """Unguided proposals: every position is a sampled token, nothing masked."""
        q = np.concatenate([np.full(t.tokens.size, t.query_id) for t in items])
        pos = np.concatenate([np.arange(t.tokens.size) for t in items])
        tok = np.concatenate([t.tokens for t in items])
        seq = np.concatenate([np.full(t.tokens.size, s) for s, t in enumerate(items)])
        return cls(q.astype(np.int64), pos.astype(np.int64), tok.astype(np.int64),
                   np.full(tok.size, -1, dtype=np.int64), seq.astype(np.int64))

    def _logp_rows(self, theta: PolicyParams) -> np.ndarray:
        return _masked_log_softmax(theta.logits[self.query, self.pos], self.masked)

    def logprobs(self, theta: PolicyParams) -> np.ndarray:
        if self.size == 0:
            return np.zeros(0)
        rows = self._logp_rows(theta)
        return rows[np.arange(self.size), self.token]

    def grad(self, theta: PolicyParams, weights: np.ndarray) -> PolicyParams:
        """Gradient of ``sum(weights * logprobs)``."""
        out = np.zeros_like(theta.logits)
        if self.size == 0:
            return PolicyParams(out)
        probs = np.exp(self._logp_rows(theta))
        d = -probs
        d[np.arange(self.size), self.token] += 1.0
        d *= np.asarray(weights, dtype=np.float64)[:, None]
        np.add.at(out, (self.query, self.pos), d)
        return PolicyParams(out)


@dataclass(frozen=True, eq=False)
class CriticTokens:
    """Critic flag decisions, one row per (critique, position)."""

    query: np.ndarray
    pos: np.ndarray
    obs_token: np.ndarray
    flag: np.ndarray
    cond: np.ndarray  # 1 - s_o
    seq: np.ndarray

    @property
    def size(self) -> int:
        return int(self.flag.size)

    @classmethod
    def from_critiques(cls, items: Sequence[tuple]) -> "CriticTokens":
        """``items``: ``(query_id, critique, proposal, s_o)``; every position is a token."""
        q, pos, obs, flag, cond, seq = [], [], [], [], [], []
        for s, (qid, crit, prop, s_o) in enumerate(items):
            L = crit.flags.size
            q.append(np.full(L, qid))
            pos.append(np.arange(L))
            obs.append(prop.tokens)
            flag.append(crit.flags)
            cond.append(np.full(L, 1.0 - s_o))
            seq.append(np.full(L, s))
        if not items:
            e = np.zeros(0, dtype=np.int64)
            return cls(e, e, e, np.zeros(0, dtype=bool), np.zeros(0), e)
        return cls(
            np.concatenate(q).astype(np.int64),
            np.concatenate(pos).astype(np.int64),
            np.concatenate(obs).astype(np.int64),
            np.concatenate(flag).astype(bool),
            np.concatenate(cond).astype(np.float64),
            np.concatenate(seq).astype(np.int64),
        )

    def _z(self, psi: CriticParams) -> np.ndarray:
        return psi.flag_logits[self.query, self.pos, self.obs_token] + psi.score_bias * self.cond

    def logprobs(self, psi: CriticParams) -> np.ndarray:
        z = self._z(psi)
        return np.where(self.flag, log_sigmoid(z), log_sigmoid(-z))

    def grad(self, psi: CriticParams, weights: np.ndarray) -> CriticParams:
        out = np.zeros_like(psi.flag_logits)
        if self.size == 0:
            return CriticParams(out, 0.0)
        dz = (self.flag.astype(np.float64) - sigmoid(self._z(psi))) * weights
        np.add.at(out, (self.query, self.pos, self.obs_token), dz)
        return CriticParams(out, float(np.sum(dz * self.cond)))


# --------------------------------------------------------------------------
# parameter dump format

PARAMS_FORMAT = "echo-lab-params v1"


def dumps_params(params: Params, seed: Optional[int] = None, step: Optional[int] = None) -> str:
    """Text dump: header lines, then one ``repr`` float per line in C order."""
    if isinstance(params, PolicyParams):
        kind, arr, extra = "policy", params.logits, []
    else:
        kind, arr, extra = "critic", params.flag_logits, [params.score_bias]
    head = [
        f"# {PARAMS_FORMAT}",
        f"kind = {kind}",
        "shape = " + " ".join(str(n) for n in arr.shape),
        f"seed = {'none' if seed is None else seed}",
        f"step = {'none' if step is None else step}",
        f"count = {arr.size + len(extra)}",
        "---",
    ]
    body = [repr(float(x)) for x in arr.ravel()] + [repr(float(x)) for x in extra]
    return "\n".join(head + body) + "\n"


def loads_params(text: str) -> tuple[Params, dict]:
    head_text, sep, body = text.partition("\n---\n")
    if not sep:
        raise ValueError("parameter dump is missing the '---' separator")
    meta: dict[str, str] = {}
    for line in head_text.splitlines():
        if line.startswith("#") or not line.strip():
            continue
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    shape = tuple(int(n) for n in meta["shape"].split())
    values = np.array([float(x) for x in body.split()], dtype=np.float64)
    if values.size != int(meta["count"]):
        raise ValueError(f"expected {meta['count']} values, found {values.size}")
    n = int(np.prod(shape))
    if meta["kind"] == "policy":
        params: Params = PolicyParams(values[:n].reshape(shape))
    elif meta["kind"] == "critic":
        params = CriticParams(values[:n].reshape(shape), float(values[n]))
    else:
        raise ValueError(f"unknown parameter kind {meta['kind']!r}")
    return params, meta
