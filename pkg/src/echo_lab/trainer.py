"""Outer training loop: synchronized policy/critic updates and the ablation modes.

Modes
-----
``echo``           both tracks updated every step from the same rollout groups
``frozen_critic``  critic sampled but never updated
``linear_reward``  critic rewarded with the linear score difference
``grpo_only``      no critic; N unguided proposals per query, plain GRPO
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Union

import numpy as np

from echo_lab import grpo
from echo_lab.groups import critic_advantages, normalize_group, policy_advantages
from echo_lab.models import (
    CriticParams,
    CriticTokens,
    PolicyParams,
    PolicyTokens,
    log_softmax,
    snapshot,
    _sample_rows,
)
from echo_lab.rollout import RolloutGroup, run_batch, run_proposal_batch
from echo_lab.shaping import (
    ShapingParams,
    critic_reward,
    intrinsic_gain,
    linear_critic_reward,
)
from echo_lab.toyworld import Trajectory, WorldSpec, make_world

MODES = ("echo", "frozen_critic", "linear_reward", "grpo_only")

PAPER_LR = 1e-6
DEFAULT_LR_SCALE = 5e6  # toy models need far larger steps than an LLM; 1e-6 * 5e6 = 5


class TrainingError(RuntimeError):
    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"training failed at step {step}: {cause}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "echo"
    steps: int = 300
    batch_queries: int = 8
    group_size: int = 8
    shaping: ShapingParams = field(default_factory=ShapingParams)
    grpo: grpo.GrpoConfig = field(
        default_factory=lambda: grpo.GrpoConfig(learning_rate=PAPER_LR * DEFAULT_LR_SCALE)
    )
    seed: int = 0
    vocab_size: int = 4
    seq_len: int = 6
    num_queries: int = 8
    critic_init_logit: float = 0.0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.batch_queries < 1:
            raise ValueError(f"batch_queries must be >= 1, got {self.batch_queries}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def flat(self) -> dict:
        """Flattened field dict (nested configs prefixed) for manifests."""
        out: dict = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("shaping", "grpo"):
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = sub
            else:
                out[f.name] = v
        return out


RECORD_FIELDS = (
    "step",
    "mean_s_o",
    "mean_s_r",
    "mean_gain",
    "improvement_fraction",
    "policy_objective",
    "critic_objective",
    "mean_kl_policy",
    "mean_kl_critic",
    "clip_fraction",
)


@dataclass(frozen=True)
class TrainRecord:
    step: int
    mean_s_o: float
    mean_s_r: float
    mean_gain: float
    improvement_fraction: float
    policy_objective: float
    critic_objective: float
    mean_kl_policy: float
    mean_kl_critic: float
    clip_fraction: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.improvement_fraction <= 1.0):
            raise ValueError("improvement_fraction must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class TrainState:
    theta: PolicyParams
    psi: CriticParams
    theta_ref: PolicyParams
    psi_ref: CriticParams


@dataclass(frozen=True, eq=False)
class StepResult:
    state: TrainState
    record: TrainRecord
    groups: list  # RolloutGroup per query, or list of proposals in grpo_only
    policy_batch: Optional[grpo.TrackBatch] = None
    critic_batch: Optional[grpo.TrackBatch] = None

    @property
    def theta(self) -> PolicyParams:
        return self.state.theta

    @property
    def psi(self) -> CriticParams:
        return self.state.psi


def init_state(world: WorldSpec, cfg: TrainConfig) -> TrainState:
    """Initial parameters depend only on the world and ``cfg.seed``, never the mode."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    theta = PolicyParams.init(world, rng)
    psi = CriticParams.init(world, rng, flag_logit=cfg.critic_init_logit)
    return TrainState(theta, psi, snapshot(theta), snapshot(psi))


def _select_queries(world: WorldSpec, cfg: TrainConfig, step: int) -> list[int]:
    Q = world.num_queries
    if cfg.batch_queries == Q:
        return list(range(Q))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, step]))
    return rng.choice(Q, size=cfg.batch_queries, replace=cfg.batch_queries > Q).tolist()


def policy_track(groups: list[RolloutGroup], theta_ref: PolicyParams) -> grpo.TrackBatch:
    items, adv, gids, old = [], [], [], []
    for g_idx, g in enumerate(groups):
        adv.append(policy_advantages(g))
        for ref, crit in zip(g.refinements, g.critiques):
            items.append((g.query_id, ref, g.proposal, crit))
            old.append(ref.token_logprobs[crit.flags])
            gids.append(g_idx)
    tokens = PolicyTokens.from_refinements(items)
    return grpo.TrackBatch(
        tokens,
        np.concatenate(adv),
        np.concatenate(old),
        tokens.logprobs(theta_ref),
        group_ids=np.asarray(gids),
    )


def critic_track(
    groups: list[RolloutGroup],
    psi_ref: CriticParams,
    shaping: ShapingParams,
    reward_fn=critic_reward,
) -> grpo.TrackBatch:
    items, adv, gids, old = [], [], [], []
    for g_idx, g in enumerate(groups):
        adv.append(critic_advantages(g, shaping, reward_fn))
        for crit in g.critiques:
            items.append((g.query_id, crit, g.proposal, g.s_o))
            old.append(crit.flag_logprobs)
            gids.append(g_idx)
    tokens = CriticTokens.from_critiques(items)
    return grpo.TrackBatch(
        tokens,
        np.concatenate(adv),
        np.concatenate(old),
        tokens.logprobs(psi_ref),
        group_ids=np.asarray(gids),
    )


def proposal_track(proposals: list[list[Trajectory]], theta_ref: PolicyParams) -> grpo.TrackBatch:
    flat = [t for grp in proposals for t in grp]
    adv = np.concatenate([normalize_group([t.score for t in grp]) for grp in proposals])
    tokens = PolicyTokens.from_proposals(flat)
    gids = np.concatenate([np.full(len(grp), k) for k, grp in enumerate(proposals)])
    return grpo.TrackBatch(
        tokens,
        adv,
        np.concatenate([t.token_logprobs for t in flat]),
        tokens.logprobs(theta_ref),
        group_ids=gids,
    )


def _combined_clip_fraction(infos: list[grpo.UpdateInfo]) -> float:
    n = sum(i.num_tokens for i in infos)
    if n == 0:
        return 0.0
    return sum(i.clip_fraction * i.num_tokens for i in infos) / n


def _frozen_info(batch: grpo.TrackBatch, params, cfg: grpo.GrpoConfig) -> grpo.UpdateInfo:
    live = batch.with_live(params)
    return grpo.UpdateInfo(
        grpo.surrogate_objective(live, cfg),
        grpo.clip_fraction(live, cfg),
        grpo.mean_kl(live),
        int(batch.tokens.seq.size),
    )


def train_step(world: WorldSpec, state: TrainState, cfg: TrainConfig, step: int) -> StepResult:
    """One synchronized update. ``state`` is never modified; on error nothing changes."""
    qids = _select_queries(world, cfg, step)
    rng_base = (cfg.seed, 2, step)
    N = cfg.group_size

    if cfg.mode == "grpo_only":
        proposals = run_proposal_batch(world, state.theta, qids, N, rng_base)
        batch = proposal_track(proposals, state.theta_ref)
        theta, info = grpo.update_step(state.theta, batch, cfg.grpo)
        mean_s = float(np.mean([t.score for grp in proposals for t in grp]))
        # no refinement stage: s_r is taken as s_o, so gain columns are zero
        record = TrainRecord(
            step=step,
            mean_s_o=mean_s,
            mean_s_r=mean_s,
            mean_gain=0.0,
            improvement_fraction=0.0,
            policy_objective=info.objective,
            critic_objective=0.0,
            mean_kl_policy=info.mean_kl,
            mean_kl_critic=0.0,
            clip_fraction=info.clip_fraction,
        )
        new = TrainState(theta, state.psi, state.theta_ref, state.psi_ref)
        return StepResult(new, record, proposals, policy_batch=batch)

    groups = run_batch(world, state.theta, state.psi, qids, N, rng_base, workers=cfg.workers)
    reward_fn = linear_critic_reward if cfg.mode == "linear_reward" else critic_reward
    p_batch = policy_track(groups, state.theta_ref)
    c_batch = critic_track(groups, state.psi_ref, cfg.shaping, reward_fn)

    # the critic batch carries log-probs recorded at rollout time, so updating
    # theta first cannot leak into the critic's objective
    theta, p_info = grpo.update_step(state.theta, p_batch, cfg.grpo)
    if cfg.mode == "frozen_critic":
        psi, c_info = state.psi, _frozen_info(c_batch, state.psi, cfg.grpo)
    else:
        psi, c_info = grpo.update_step(state.psi, c_batch, cfg.grpo)

    s_r = np.array([s for g in groups for s in g.s_r])
    s_o_rep = np.repeat([g.s_o for g in groups], [g.size for g in groups])
    gains = [intrinsic_gain(a, b, cfg.shaping) for a, b in zip(s_o_rep, s_r)]
    record = TrainRecord(
        step=step,
        mean_s_o=float(np.mean([g.s_o for g in groups])),
        mean_s_r=float(s_r.mean()),
        mean_gain=float(np.mean(gains)),
        improvement_fraction=float(np.mean(s_r > s_o_rep)),
        policy_objective=p_info.objective,
        critic_objective=c_info.objective,
        mean_kl_policy=p_info.mean_kl,
        mean_kl_critic=c_info.mean_kl,
        clip_fraction=_combined_clip_fraction([p_info, c_info]),
    )
    new = TrainState(theta, psi, state.theta_ref, state.psi_ref)
    return StepResult(new, record, groups, policy_batch=p_batch, critic_batch=c_batch)


StepCallback = Callable[[StepResult], None]


def train_run(
    cfg: TrainConfig,
    world: Optional[WorldSpec] = None,
    callback: Optional[StepCallback] = None,
    state: Optional[TrainState] = None,
) -> list[TrainRecord]:
    """Run ``cfg.steps`` synchronized steps and return one record per step.

    ``callback`` sees every :class:`StepResult` (parameters, groups, batches);
    the harness uses it to stream metrics and collect export windows.
    """
    if world is None:
        world = make_world(cfg.vocab_size, cfg.seq_len, cfg.num_queries, cfg.seed)
    if state is None:
        state = init_state(world, cfg)
    records: list[TrainRecord] = []
    for step in range(cfg.steps):
        try:
            result = train_step(world, state, cfg, step)
            if callback is not None:
                callback(result)
        except Exception as exc:
            raise TrainingError(step, exc) from exc
        state = result.state
        records.append(result.record)
    return records


def evaluate(
    world: WorldSpec,
    theta: PolicyParams,
    num_episodes: int,
    rng: Union[np.random.Generator, int],
) -> float:
    """Mean score of unguided proposals; episode ``k`` uses query ``k mod Q``."""
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    qids = np.arange(num_episodes) % world.num_queries
    logp = log_softmax(theta.logits)[qids]
    tokens = _sample_rows(logp, rng)
    return float(np.mean(tokens == world.targets[qids]))


def expected_score(world: WorldSpec, theta: PolicyParams) -> float:
    """Exact expectation of :func:`evaluate` (uniform over queries)."""
    p = np.exp(log_softmax(theta.logits))
    Q, L = world.num_queries, world.seq_len
    hit = p[np.arange(Q)[:, None], np.arange(L)[None, :], world.targets]
    return float(hit.mean())
