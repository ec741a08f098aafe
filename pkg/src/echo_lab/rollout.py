"""Cascaded rollout: propose, diagnose N ways, refine N ways, score everything."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from echo_lab.models import (
    Critique,
    CriticParams,
    PolicyParams,
    critic_sample,
    policy_sample_proposal,
    policy_sample_refinement,
)
from echo_lab.toyworld import Trajectory, WorldSpec, env_score

RngBase = Union[int, Sequence[int]]


@dataclass(eq=False)
class RolloutGroup:
    query_id: int
    proposal: Trajectory
    s_o: float
    critiques: list[Critique]
    refinements: list[Trajectory]
    s_r: list[float]

    def __post_init__(self) -> None:
        n = len(self.critiques)
        if not (n == len(self.refinements) == len(self.s_r)):
            raise ValueError("critiques, refinements and s_r must have equal length")
        if self.proposal.score != self.s_o:
            raise ValueError("proposal.score does not match s_o")
        if any(r.score != s for r, s in zip(self.refinements, self.s_r)):
            raise ValueError("refinement scores do not match s_r")

    @property
    def size(self) -> int:
        return len(self.s_r)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RolloutGroup):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and self.s_o == other.s_o
            and self.s_r == other.s_r
            and self.proposal == other.proposal
            and self.critiques == other.critiques
            and self.refinements == other.refinements
        )


@dataclass(frozen=True)
class GroupStats:
    s_o: float
    mean_s_r: float
    max_s_r: float
    improvement_fraction: float
    mean_flags: float


def _scored(world: WorldSpec, traj: Trajectory) -> Trajectory:
    traj.score = env_score(world, traj.query_id, traj.tokens)
    return traj


def run_cascade(
    world: WorldSpec,
    theta: PolicyParams,
    psi: CriticParams,
    query_id: int,
    N: int,
    rng: np.random.Generator,
) -> RolloutGroup:
    """One proposal, N critiques of it, and N refinements (one per critique).

    Every stage draws from its own child stream of ``rng`` (index 0 for the
    proposal, ``1..N`` for critiques, ``N+1..2N`` for refinements), so the
    result does not depend on the order stages are evaluated in.
    """
    if N < 2:
        raise ValueError(f"group size must be >= 2, got {N}")
    streams = rng.spawn(2 * N + 1)
    proposal = _scored(world, policy_sample_proposal(theta, query_id, streams[0]))
    s_o = proposal.score
    critiques = [critic_sample(psi, query_id, proposal, s_o, streams[1 + j]) for j in range(N)]
    refinements = [
        _scored(world, policy_sample_refinement(theta, query_id, proposal, c, streams[1 + N + j]))
        for j, c in enumerate(critiques)
    ]
    return RolloutGroup(query_id, proposal, s_o, critiques, refinements, [r.score for r in refinements])


def query_stream(rng_base: RngBase, index: int) -> np.random.Generator:
    """Independent generator for the ``index``-th entry of a batch."""
    base = [rng_base] if isinstance(rng_base, (int, np.integer)) else list(rng_base)
    return np.random.default_rng(np.random.SeedSequence(entropy=base, spawn_key=(index,)))


def _parallel_map(fn, n: int, workers: int) -> list:
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def run_batch(
    world: WorldSpec,
    theta: PolicyParams,
    psi: CriticParams,
    query_ids: Sequence[int],
    N: int,
    rng_base: RngBase,
    workers: int = 1,
) -> list[RolloutGroup]:
    query_ids = list(query_ids)
    if not query_ids:
        raise ValueError("run_batch needs at least one query")
    return _parallel_map(
        lambda k: run_cascade(world, theta, psi, query_ids[k], N, query_stream(rng_base, k)),
        len(query_ids),
        workers,
    )


def run_proposal_batch(
    world: WorldSpec,
    theta: PolicyParams,
    query_ids: Sequence[int],
    N: int,
    rng_base: RngBase,
) -> list[list[Trajectory]]:
    """N unguided, scored proposals per query (the plain group-relative baseline)."""
    query_ids = list(query_ids)
    if not query_ids:
        raise ValueError("run_proposal_batch needs at least one query")
    if N < 2:
        raise ValueError(f"group size must be >= 2, got {N}")
    out = []
    for k, q in enumerate(query_ids):
        streams = query_stream(rng_base, k).spawn(N)
        out.append([_scored(world, policy_sample_proposal(theta, q, s)) for s in streams])
    return out


def group_stats(group: RolloutGroup) -> GroupStats:
    s_r = np.asarray(group.s_r, dtype=np.float64)
    return GroupStats(
        s_o=group.s_o,
        mean_s_r=float(s_r.mean()),
        max_s_r=float(s_r.max()),
        improvement_fraction=float(np.mean(s_r > group.s_o)),
        mean_flags=float(np.mean([c.num_flags for c in group.critiques])),
    )


def dump_rollouts(
    groups: Iterable[RolloutGroup], fh: TextIO, step: Optional[int] = None
) -> None:
    """Append one JSON line per cascade: query, s_o, s_r list, flag counts."""
    for g in groups:
        rec = {"step": step, "query_id": g.query_id, "s_o": g.s_o, "s_r": list(g.s_r),
               "flag_counts": [c.num_flags for c in g.critiques]}
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
