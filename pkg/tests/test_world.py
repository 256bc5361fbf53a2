"""Dynamics, attacker strategy, and termination checks."""

import numpy as np
import pytest

from arcpursuit.world import (
    G_CLAMP_MAX,
    AgentState,
    AttackerParams,
    EnvConfig,
    attacker_control,
    episode_status,
    nearest_defender,
    saturate,
    step_agent,
    weight_g,
)


def test_saturate_inside_limit_is_identity():
    u = np.array([3.0, 4.0])
    np.testing.assert_allclose(saturate(u, 6.0), u)


def test_saturate_scales_to_limit():
    u = np.array([3.0, 4.0])
    out = saturate(u, 2.5)
    np.testing.assert_allclose(np.linalg.norm(out), 2.5)
    np.testing.assert_allclose(out, u / 2.0)


def test_step_agent_hand_worked_example():
    # p=(0,0), v=(1,0), u=0, C=7.5, dt=0.05:
    # p' = p + dt*v = (0.05, 0); v' = v + dt*(0 - 7.5*v) = (0.625, 0)
    s = AgentState(np.zeros(2), np.array([1.0, 0.0]))
    out = step_agent(s, np.zeros(2), c=7.5, u_max=15.0, dt=0.05)
    np.testing.assert_allclose(out.p, [0.05, 0.0])
    np.testing.assert_allclose(out.v, [0.625, 0.0])


def test_step_agent_position_uses_old_velocity():
    s = AgentState(np.zeros(2), np.array([0.0, 2.0]))
    out = step_agent(s, np.array([10.0, 0.0]), c=7.5, u_max=15.0, dt=0.05)
    np.testing.assert_allclose(out.p, [0.0, 0.1])


def test_step_agent_terminal_speed_is_u_over_c():
    s = AgentState(np.zeros(2), np.zeros(2))
    u = np.array([15.0, 0.0])
    for _ in range(600):
        s = step_agent(s, u, c=7.5, u_max=15.0, dt=0.05)
    np.testing.assert_allclose(np.linalg.norm(s.v), 2.0, atol=1e-9)


def test_speed_never_exceeds_limit_under_any_input():
    rng = np.random.default_rng(7)
    env = EnvConfig()
    for _ in range(200):
        s = AgentState(np.zeros(2), np.zeros(2))
        for _ in range(100):
            u = rng.uniform(-100.0, 100.0, size=2)
            s = step_agent(s, u, c=env.c_d, u_max=env.u_d_max, dt=env.dt)
            assert np.linalg.norm(s.v) <= env.v_d_max + 1e-12


def test_env_config_rejects_unstable_dt():
    with pytest.raises(ValueError):
        EnvConfig(dt=0.2)   # dt*C_d = 1.5


def test_weight_g_midpoint_value():
    # r=5.5, r_safe=1, r_avo=10: (1/4.5)*(1+cos(pi/2)) = 2/9
    assert weight_g(5.5, 1.0, 10.0) == pytest.approx(2.0 / 9.0, rel=1e-12)


def test_weight_g_boundary_and_clamp():
    assert weight_g(10.0, 1.0, 10.0) == pytest.approx(0.0, abs=1e-15)
    assert weight_g(12.0, 1.0, 10.0) == 0.0
    assert weight_g(1.0, 1.0, 10.0) == G_CLAMP_MAX
    assert weight_g(0.5, 1.0, 10.0) == G_CLAMP_MAX
    # just inside the pole the clamp still applies
    assert weight_g(1.0 + 1e-9, 1.0, 10.0) == G_CLAMP_MAX


def test_weight_g_strictly_decreasing_where_unclamped():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        r_safe = rng.uniform(0.2, 3.0)
        r_avo = r_safe + rng.uniform(0.5, 10.0)
        a = rng.uniform(r_safe, r_avo, size=2)
        lo, hi = float(np.min(a)), float(np.max(a))
        if hi - lo < 1e-9:
            continue
        g_lo = weight_g(lo, r_safe, r_avo)
        g_hi = weight_g(hi, r_safe, r_avo)
        if g_lo < G_CLAMP_MAX and g_hi < G_CLAMP_MAX:
            assert g_lo > g_hi


def test_attacker_control_hand_worked_example():
    # attacker at (0,10) heading for the origin, defender at (0,4.5):
    # approach = 10*(0,-1); avoid = 8*(0,1)*g(5.5,1,10) = (0, 16/9)
    s_a = AgentState(np.array([0.0, 10.0]), np.zeros(2))
    u = attacker_control(s_a, np.array([0.0, 4.5]), AttackerParams(), np.zeros(2))
    np.testing.assert_allclose(u, [0.0, -10.0 + 16.0 / 9.0], rtol=1e-12)


def test_attacker_control_printed_sign_flees_target():
    s_a = AgentState(np.array([0.0, 10.0]), np.zeros(2))
    params = AttackerParams(sign_as_printed=True)
    u = attacker_control(s_a, np.array([50.0, 50.0]), params, np.zeros(2))
    assert u[1] > 0.0   # points away from the protected point


def test_attacker_control_beyond_r_avo_is_pure_approach():
    s_a = AgentState(np.array([0.0, 12.0]), np.zeros(2))
    u = attacker_control(s_a, np.array([0.0, 30.0]), AttackerParams(), np.zeros(2))
    np.testing.assert_allclose(u, [0.0, -10.0], rtol=1e-12)


def test_attacker_control_finite_inside_safety_radius():
    s_a = AgentState(np.array([0.0, 5.0]), np.zeros(2))
    u = attacker_control(s_a, np.array([0.0, 5.5]), AttackerParams(), np.zeros(2))
    assert np.all(np.isfinite(u))
    assert np.linalg.norm(u) <= AttackerParams().k_ad * G_CLAMP_MAX + 10.0


def test_attacker_control_continuous_in_defender_position():
    # no jump across r_avo or anywhere with r > r_safe
    rng = np.random.default_rng(3)
    params = AttackerParams()
    s_a = AgentState(np.array([2.0, 3.0]), np.zeros(2))
    for _ in range(300):
        base = rng.uniform(-12.0, 12.0, size=2)
        r = np.linalg.norm(s_a.p - base)
        if r <= params.r_safe + 1e-3:
            continue
        eps = rng.normal(scale=1e-7, size=2)
        u0 = attacker_control(s_a, base, params, np.zeros(2))
        u1 = attacker_control(s_a, base + eps, params, np.zeros(2))
        assert np.linalg.norm(u1 - u0) < 1e-3


def test_nearest_defender_tie_takes_lowest_index():
    ds = [AgentState(np.array([1.0, 0.0]), np.zeros(2)),
          AgentState(np.array([-1.0, 0.0]), np.zeros(2))]
    idx, _ = nearest_defender(np.zeros(2), ds)
    assert idx == 0


def test_episode_status_priority_and_kinds():
    env = EnvConfig()
    far = [AgentState(np.array([8.0, 8.0]), np.zeros(2))]
    near = [AgentState(np.array([0.5, 0.0]), np.zeros(2))]

    s = episode_status(np.array([0.0, 0.0]), near, env, 0.0)
    assert s.kind == "captured" and s.time == 0.0 and s.terminal

    # attacker inside the protected area but also within capture range: capture wins
    s = episode_status(np.array([1.0, 0.0]), near, env, 3.0)
    assert s.kind == "captured"

    s = episode_status(np.array([1.5, 0.0]), far, env, 3.0)
    assert s.kind == "breached" and s.time == 3.0

    s = episode_status(np.array([9.0, 9.0]), far, env, env.t_max)
    assert s.kind == "timeout"

    s = episode_status(np.array([9.0, 9.0]), far, env, 1.0)
    assert s.kind == "running" and not s.terminal
