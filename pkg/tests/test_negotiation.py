"""Topology construction and consensus behavior."""

import numpy as np

from arcpursuit.negotiation import (
    Topology,
    build_topology,
    consensus_error,
    negotiate_update,
)


def test_build_topology_strict_threshold():
    pos = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 3.9]])
    topo = build_topology(pos, r_com=4.0)
    # d(0,1) = 4.0 exactly: excluded; d(1,2) = 3.9: included; d(0,2) > 4
    assert topo.edges == frozenset({(1, 2)})
    assert topo.neighbors(1) == [2]
    assert topo.neighbors(0) == []


def test_connected_components():
    topo = Topology(n=5, edges=frozenset({(0, 1), (1, 2), (3, 4)}))
    comps = sorted(topo.connected_components(), key=min)
    assert comps == [{0, 1, 2}, {3, 4}]


def test_negotiate_update_no_neighbors_is_policy_only():
    pi = np.array([0.1, -0.2, 0.3, 0.0, 0.05])
    out = negotiate_update(np.ones(5), pi, [], c_neg=2.0)
    np.testing.assert_allclose(out, pi)


def test_negotiate_update_equal_estimates_zero_consensus_term():
    theta = np.array([1.0, 2.0, 0.5, 1.0, 3.0])
    pi = np.zeros(5)
    out = negotiate_update(theta, pi, [theta.copy(), theta.copy()], c_neg=2.0)
    np.testing.assert_allclose(out, np.zeros(5))


def test_two_agent_consensus_symmetric_average():
    # zero policy: both estimates converge to the initial average
    a = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
    b = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    avg = (a + b) / 2.0
    dt, c_neg = 0.05, 2.0
    for _ in range(200):
        ra = negotiate_update(a, np.zeros(5), [b], c_neg)
        rb = negotiate_update(b, np.zeros(5), [a], c_neg)
        a, b = a + dt * ra, b + dt * rb
    np.testing.assert_allclose(a, avg, atol=1e-8)
    np.testing.assert_allclose(b, avg, atol=1e-8)


def test_lyapunov_descent_with_aligned_policies():
    # policy pi_i = -k (theta_i - theta_star) satisfies the descent condition
    # (theta_i - theta_star)^T pi_i <= 0; V = 0.5 sum ||theta_i - theta_star||^2
    # must never increase along the discrete flow.
    rng = np.random.default_rng(17)
    theta_star = np.array([1.0, -2.0, 0.3, 1.5, 2.0])
    n, k, c_neg, dt = 5, 1.0, 2.0, 0.05
    thetas = theta_star + rng.uniform(-3, 3, size=(n, 5))
    edges = frozenset({(i, i + 1) for i in range(n - 1)})
    topo = Topology(n=n, edges=edges)
    v_prev = 0.5 * np.sum((thetas - theta_star) ** 2)
    for _ in range(400):
        rates = np.stack([
            negotiate_update(thetas[i], -k * (thetas[i] - theta_star),
                             [thetas[j] for j in topo.neighbors(i)], c_neg)
            for i in range(n)
        ])
        thetas = thetas + dt * rates
        v = 0.5 * np.sum((thetas - theta_star) ** 2)
        assert v <= v_prev + 1e-12
        v_prev = v
    assert consensus_error(thetas) < 1e-3


def test_consensus_error_simple_pair():
    est = np.zeros((3, 5))
    est[2, 0] = 2.0
    assert consensus_error(est) == 2.0
    assert consensus_error(np.ones((4, 5))) == 0.0
