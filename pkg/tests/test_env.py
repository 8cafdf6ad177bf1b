from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgrid import grid
from fedgrid.env import (TRAJECTORY_COLUMNS, EnvConfig, MicrogridEnv, action_gate, compute_reward,
                         normalize_observation, write_trajectory)
from fedgrid.scenario import AttackScenario


def attack_all(mag=-0.1, t_a=5):
    return AttackScenario("all", (51, 105, 80), (mag,) * 3, t_a)


# --- pure pieces -------------------------------------------------------------
def test_reward_examples():
    cfg = EnvConfig()
    V_ss = np.ones((2, 3))
    assert compute_reward(3, 5, V_ss, V_ss, 0.05, cfg) == -1.0
    assert compute_reward(8, 5, V_ss, V_ss, 0.0, cfg) == 0.0
    V = V_ss.copy()
    V[0] += 0.03
    assert abs(compute_reward(8, 5, V, V_ss, 0.0, cfg) - (-0.03 * math.sqrt(3))) < 1e-15
    assert abs(-0.03 * math.sqrt(3) - (-0.05196)) < 1e-5


def test_reward_branch_boundary_and_weights():
    cfg = EnvConfig(reward_weights={51: 2.0, 42: 0.0})
    V_ss = np.ones((2, 3))
    V = V_ss + 0.01
    assert compute_reward(5, 5, V, V_ss, 0.0, cfg) == 0.0          # t = t_a: first branch, no penalty
    assert compute_reward(5, 5, V, V_ss, 0.05, cfg) == 0.0         # acting at the attack step is allowed
    r = compute_reward(6, 5, V, V_ss, 0.0, cfg, buses=[51, 42])
    assert abs(r - (-2.0 * 0.01 * math.sqrt(3))) < 1e-15
    with pytest.raises(ValueError):
        compute_reward(6, 5, np.ones(3), np.ones(2), 0.0, cfg)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.lists(st.floats(0.5, 1.5), min_size=6, max_size=6),
       st.floats(-1, 1))
def test_rewards_never_positive(t, t_a, v, a):
    r = compute_reward(t, t_a, np.array(v).reshape(2, 3), np.ones((2, 3)), a, EnvConfig())
    assert r <= 0.0


def test_normalize_examples():
    vss = np.array([0.98, 1.02])
    assert np.array_equal(normalize_observation(vss, vss), [1.0, 1.0])
    assert np.allclose(normalize_observation(0.95 * vss, vss), [0.95, 0.95], rtol=1e-15)
    assert np.allclose(normalize_observation([0.98, 0.98], vss), [1.0, 0.9608], atol=5e-5)
    with pytest.raises(ValueError):
        normalize_observation([1.0], [0.0])


def test_gate_examples():
    assert action_gate(0.08, np.ones(6), 0.02, 0.1) == 0.0
    obs = np.ones(6)
    obs[2] = 0.96
    assert action_gate(0.08, obs, 0.02, 0.1) == 0.08
    assert action_gate(0.5, obs, 0.02, 0.1) == 0.1
    assert action_gate(-0.5, obs, 0.02, 0.1) == -0.1


def test_config_validation():
    for bad in (dict(episode_length=0), dict(reward_weights=-1.0), dict(invalid_penalty=-1),
                dict(action_mode="other"), dict(dt=0.0)):
        with pytest.raises(ValueError):
            EnvConfig(**bad).validate()


# --- lifecycle -----------------------------------------------------------------
def test_reset_observations_and_shape(nm3_env):
    obs = nm3_env.reset(attack_all())
    assert len(obs) == 3 and all(o.shape == (6,) for o in obs)
    assert sum(o.size for o in obs) == 18
    assert all(np.max(np.abs(o - 1.0)) < 1e-6 for o in obs)
    again = nm3_env.reset(attack_all())
    assert all(np.array_equal(a, b) for a, b in zip(obs, again))


def test_reset_rejects_unknown_target(nm3_env):
    with pytest.raises(ValueError, match="unknown GFM"):
        nm3_env.reset(AttackScenario("bad", (999,), (-0.1,), 5))


def test_zero_actions_before_attack_earn_zero(nm3_env):
    nm3_env.reset(attack_all(t_a=10))
    total = 0.0
    for _ in range(10):
        res = nm3_env.step(np.zeros(3))
        total += res.rewards.sum()
        assert np.array_equal(res.rewards, np.zeros(3))
    assert total == 0.0


def test_gate_blocks_actuation_on_healthy_grid(nm3_env):
    nm3_env.reset(attack_all(t_a=30))
    for _ in range(10):
        res = nm3_env.step(np.full(3, 0.1))
        assert np.all(res.info["gated_actions"] == 0.0)
        assert np.all(res.rewards == 0.0)


def test_attack_visible_above_gate(nm3_env):
    nm3_env.reset(attack_all())
    seen = []
    while not nm3_env.done:
        res = nm3_env.step(np.zeros(3))
        seen.append(min(o.min() for o in res.next_obs))
    assert min(seen[6:]) < 0.98


def test_oracle_reward_dominates_zero_action(nm3_model):
    env_a, env_b = MicrogridEnv(nm3_model), MicrogridEnv(nm3_model)
    sc = AttackScenario("mix", (51, 80), (-0.12, 0.09), 7)
    env_a.reset(sc)
    env_b.reset(sc)
    while not env_a.done:
        ra = env_a.step(np.zeros(3), privileged_res=-env_a.attack_now())
        rb = env_b.step(np.zeros(3))
        assert np.all(ra.rewards >= rb.rewards)
        assert np.all(ra.rewards == 0.0)


def test_done_is_joint_and_terminal(nm3_env):
    nm3_env.reset(attack_all())
    n = 0
    while True:
        res = nm3_env.step(np.zeros(3))
        n += 1
        assert len(set(res.done)) == 1
        if res.done[0]:
            break
    assert n == nm3_env.cfg.episode_length
    assert res.info["truncated"] and not res.info["terminated"]
    with pytest.raises(RuntimeError):
        nm3_env.step(np.zeros(3))


def test_instability_terminates_with_penalty(nm3_env, monkeypatch):
    nm3_env.reset(attack_all())

    def boom(*a, **k):
        raise grid.PowerFlowDivergence("forced", 1e9)

    monkeypatch.setattr(grid, "step_dynamics", boom)
    res = nm3_env.step(np.zeros(3))
    assert res.info["unstable"] and res.info["terminated"]
    assert np.array_equal(res.rewards, [-50.0] * 3)
    assert all(res.done)


def test_attack_on_one_microgrid_reaches_the_others(nm3_env):
    nm3_env.reset(AttackScenario("one", (51,), (-0.15,), 2))
    dev = 0.0
    while not nm3_env.done:
        res = nm3_env.step(np.zeros(3))
        dev = max(dev, np.max(np.abs(res.next_obs[1] - 1.0)))
    assert dev > 1e-4


def test_each_agent_action_moves_other_observations(nm3_model):
    sc = AttackScenario("one", (51, 105, 80), (-0.1,) * 3, 1)
    outs = []
    for act in (np.array([0.05, 0.05, 0.05]), np.array([0.0, 0.05, 0.05])):
        env = MicrogridEnv(nm3_model)
        env.reset(sc)
        env.step(np.zeros(3))
        env.step(np.zeros(3))
        outs.append(env.step(act).next_obs)
    assert not np.array_equal(outs[0][1], outs[1][1])


def test_incremental_and_absolute_modes(nm3_model):
    sc = attack_all(t_a=0)
    for mode, expect in (("incremental", [0.05, 0.1]), ("absolute", [0.05, 0.05])):
        env = MicrogridEnv(nm3_model, EnvConfig(action_mode=mode))
        env.reset(sc)
        env.step(np.zeros(3))  # let the attack show up
        got = [env.step(np.full(3, 0.05)).info["v_res"][0] for _ in range(2)]
        assert np.allclose(got, expect)


def test_trajectory_export(nm3_model, tmp_path):
    env = MicrogridEnv(nm3_model, EnvConfig(episode_length=5), record=True)
    env.reset(attack_all(t_a=2))
    while not env.done:
        env.step(np.zeros(3))
    write_trajectory(env.rows, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert list(rows[0]) == TRAJECTORY_COLUMNS
    assert len(rows) == 5 * 3 * 2
    assert {int(r["attacked"]) for r in rows} == {0, 1}
