from dataclasses import replace
from unittest import mock

import numpy as np
import pytest

from echo_lab import trainer
from echo_lab.grpo import GrpoConfig
from echo_lab.models import CriticParams, PolicyParams
from echo_lab.trainer import (
    TrainConfig,
    TrainingError,
    evaluate,
    expected_score,
    init_state,
    train_run,
    train_step,
)
from echo_lab.toyworld import make_world

FAST = GrpoConfig(learning_rate=5.0)


def cfg(**kw):
    base = dict(steps=5, seed=3, grpo=FAST)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize(
    "kw", [dict(mode="bogus"), dict(steps=-1), dict(group_size=1), dict(batch_queries=0)]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_steps_zero():
    assert train_run(cfg(steps=0)) == []


def test_initial_state_independent_of_mode(world):
    a = init_state(world, cfg(mode="echo"))
    b = init_state(world, cfg(mode="grpo_only"))
    assert a.theta == b.theta and a.psi == b.psi


def test_echo_deterministic():
    assert train_run(cfg()) == train_run(cfg())


def test_frozen_critic_never_updates(world):
    c = cfg(mode="frozen_critic")
    state = init_state(world, c)
    psi0 = state.psi
    for step in range(5):
        r = train_step(world, state, c, step)
        assert r.psi == psi0
        state = r.state
    assert state.theta != init_state(world, c).theta


def test_grpo_only_never_invokes_critic(world):
    c = cfg(mode="grpo_only")
    with mock.patch("echo_lab.rollout.critic_sample", side_effect=AssertionError("critic used")):
        r = train_step(world, init_state(world, c), c, 0)
    assert r.critic_batch is None and r.record.critic_objective == 0.0


def test_synchronized_tracks_share_groups(world):
    c = cfg()
    r = train_step(world, init_state(world, c), c, 0)
    np.testing.assert_array_equal(r.policy_batch.group_ids, r.critic_batch.group_ids)
    assert r.theta != init_state(world, c).theta
    assert r.psi != init_state(world, c).psi


def test_no_signal_step_leaves_params_unchanged(world):
    # critic that never flags: every refinement copies its proposal, s_r == s_o
    c = cfg(grpo=GrpoConfig(learning_rate=5.0, kl_beta=0.0), critic_init_logit=-1000.0)
    state = init_state(world, c)
    r = train_step(world, state, c, 0)
    assert r.record.improvement_fraction == 0.0
    assert r.theta == state.theta and r.psi == state.psi


def test_linear_reward_changes_critic_signal_only(world):
    a = train_step(world, init_state(world, cfg()), cfg(), 0)
    b = train_step(world, init_state(world, cfg()), cfg(mode="linear_reward"), 0)
    assert a.theta == b.theta
    assert a.psi != b.psi


def test_aborted_step_is_atomic(world):
    c = cfg()
    state = init_state(world, c)
    calls = {"n": 0}
    real = trainer.grpo.update_step

    def flaky(params, batch, g):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("boom")
        return real(params, batch, g)

    with mock.patch.object(trainer.grpo, "update_step", side_effect=flaky):
        with pytest.raises(FloatingPointError):
            train_step(world, state, c, 0)
    assert state.theta == init_state(world, c).theta


def test_train_run_attaches_step_index():
    calls = {"n": 0}

    def boom(result):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("sink broke")

    with pytest.raises(TrainingError) as info:
        train_run(cfg(), callback=boom)
    assert info.value.step == 2


def test_records_have_unit_interval_fractions():
    for mode in trainer.MODES:
        for rec in train_run(cfg(mode=mode, steps=3)):
            assert 0.0 <= rec.improvement_fraction <= 1.0
            assert 0.0 <= rec.clip_fraction <= 1.0


def test_evaluate_examples(world):
    logits = np.zeros(world.shape)
    for q in range(world.num_queries):
        logits[q, np.arange(world.seq_len), world.targets[q]] = 1000.0
    assert evaluate(world, PolicyParams(logits), 100, 0) == 1.0

    uniform = PolicyParams(np.zeros(world.shape))
    n = 10_000
    v = evaluate(world, uniform, n, np.random.default_rng(1))
    se = np.sqrt(0.25 * 0.75 / (n * world.seq_len))
    assert abs(v - 0.25) < 3 * se
    assert evaluate(world, uniform, 500, 7) == evaluate(world, uniform, 500, 7)
    assert expected_score(world, uniform) == pytest.approx(0.25)


def test_evaluate_rejects_zero_episodes(world):
    with pytest.raises(ValueError):
        evaluate(world, PolicyParams(np.zeros(world.shape)), 0, 0)


def test_echo_learns_on_default_world():
    c = TrainConfig(steps=60, seed=0, grpo=FAST)
    world = make_world(4, 6, 8, 0)
    last = {}
    train_run(c, world, callback=lambda r: last.__setitem__("theta", r.theta))
    assert expected_score(world, last["theta"]) > expected_score(world, init_state(world, c).theta) + 0.1
