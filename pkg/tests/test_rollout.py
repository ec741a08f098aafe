import io
import json

import numpy as np
import pytest

from echo_lab.models import CriticParams, PolicyParams
from echo_lab.rollout import (
    RolloutGroup,
    dump_rollouts,
    group_stats,
    run_batch,
    run_cascade,
    run_proposal_batch,
)
from echo_lab.toyworld import Trajectory, env_score


def params(world, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return (
        PolicyParams(rng.normal(size=world.shape) * scale),
        CriticParams(rng.normal(size=world.shape) * scale, rng.normal()),
    )


def test_cascade_shape(world):
    theta, psi = params(world)
    g = run_cascade(world, theta, psi, 3, 8, np.random.default_rng(0))
    assert g.query_id == 3 and g.size == 8
    assert len(g.critiques) == len(g.refinements) == len(g.s_r) == 8
    assert g.proposal.score == g.s_o


def test_cascade_rejects_small_group(world):
    theta, psi = params(world)
    with pytest.raises(ValueError):
        run_cascade(world, theta, psi, 0, 1, np.random.default_rng(0))


def test_full_score_short_circuit(world):
    logits = np.zeros(world.shape)
    for q in range(world.num_queries):
        logits[q, np.arange(world.seq_len), world.targets[q]] = 1000.0
    theta = PolicyParams(logits)
    psi = CriticParams(np.full(world.shape, -1000.0), 0.0)
    g = run_cascade(world, theta, psi, 0, 8, np.random.default_rng(1))
    assert g.s_o == 1.0
    assert all(r.tokens.tolist() == g.proposal.tokens.tolist() for r in g.refinements)
    assert g.s_r == [1.0] * 8


def test_cascade_deterministic(world):
    theta, psi = params(world)
    a = run_cascade(world, theta, psi, 2, 8, np.random.default_rng(42))
    b = run_cascade(world, theta, psi, 2, 8, np.random.default_rng(42))
    assert a == b


def test_batch_order_and_parallel_determinism(world):
    theta, psi = params(world, seed=1)
    qids = list(range(world.num_queries))
    serial = run_batch(world, theta, psi, qids, 8, (5, 7), workers=1)
    parallel = run_batch(world, theta, psi, qids, 8, (5, 7), workers=8)
    assert [g.query_id for g in serial] == qids
    assert serial == parallel


def test_batch_rejects_empty(world):
    theta, psi = params(world)
    with pytest.raises(ValueError):
        run_batch(world, theta, psi, [], 8, 0)


def test_group_stats():
    prop = Trajectory(0, [0, 0], [0.0, 0.0], score=0.5)
    from echo_lab.models import Critique

    crits = [Critique([True, False], [-0.1, -0.1]), Critique([True, True], [-0.1, -0.1])]
    refs = [Trajectory(0, [1, 0], [-1.0, 0.0], score=0.25), Trajectory(0, [2, 1], [-1.0, -1.0], score=0.75)]
    g = RolloutGroup(0, prop, 0.5, crits, refs, [0.25, 0.75])
    st = group_stats(g)
    assert st.improvement_fraction == 0.5 and st.mean_s_r == 0.5
    assert st.max_s_r == 0.75 and st.mean_flags == 1.5
    assert group_stats(g) == st

    same = RolloutGroup(0, prop, 0.5, crits, [Trajectory(0, [0, 0], [0.0, 0.0], score=0.5)] * 2, [0.5, 0.5])
    assert group_stats(same).improvement_fraction == 0.0


def test_group_invariants_enforced():
    prop = Trajectory(0, [0], [0.0], score=0.0)
    with pytest.raises(ValueError):
        RolloutGroup(0, prop, 0.0, [], [prop], [0.0])
    with pytest.raises(ValueError):
        RolloutGroup(0, prop, 1.0, [], [], [])


def test_pairing_integrity_and_rescoring(world):
    rng = np.random.default_rng(0)
    for k in range(200):
        theta, psi = params(world, seed=k)
        g = run_cascade(world, theta, psi, k % world.num_queries, 4, rng)
        assert env_score(world, g.query_id, g.proposal.tokens) == g.s_o
        for c, r, s in zip(g.critiques, g.refinements, g.s_r):
            diff = r.tokens != g.proposal.tokens
            assert np.array_equal(diff, c.flags)
            assert env_score(world, g.query_id, r.tokens) == s


def test_critique_diversity_at_uniform_critic(world):
    theta = PolicyParams(np.zeros(world.shape))
    psi = CriticParams(np.zeros(world.shape), 0.0)
    rng = np.random.default_rng(3)
    distinct = []
    for k in range(1000):
        g = run_cascade(world, theta, psi, k % world.num_queries, 8, rng)
        distinct.append(len({c.flags.tobytes() for c in g.critiques}))
    assert np.mean(distinct) > 1


def test_proposal_batch(world):
    theta, _ = params(world)
    out = run_proposal_batch(world, theta, [0, 1], 8, 3)
    assert [len(g) for g in out] == [8, 8]
    assert all(t.score == env_score(world, t.query_id, t.tokens) for g in out for t in g)
    assert run_proposal_batch(world, theta, [0, 1], 8, 3)[1][5] == out[1][5]


def test_dump_rollouts(world):
    theta, psi = params(world)
    groups = run_batch(world, theta, psi, [0, 1], 4, 0)
    buf = io.StringIO()
    dump_rollouts(groups, buf, step=7)
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["query_id"] for r in recs] == [0, 1]
    assert recs[0]["step"] == 7 and len(recs[0]["s_r"]) == 4
    assert recs[1]["flag_counts"] == [c.num_flags for c in groups[1].critiques]
