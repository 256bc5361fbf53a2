"""Distributed negotiation of the shape parameters.

Each robot keeps its own estimate theta_i and integrates
    theta_dot_i = pi_i + c_neg * sum_{j in N_i} (theta_j - theta_i)
where pi_i is its local policy output and N_i the robots strictly within
communication range. With a connected topology and aligned policies the
estimates contract toward a common value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Topology:
    n: int
    edges: frozenset   # frozenset of (i, j) tuples with i < j

    def neighbors(self, i: int) -> list[int]:
        out = [b if a == i else a for a, b in self.edges if i in (a, b)]
        return sorted(out)

    def connected_components(self) -> list[set]:
        seen = set()
        comps = []
        adj = {i: set() for i in range(self.n)}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        for start in range(self.n):
            if start in seen:
                continue
            stack, comp = [start], set()
            while stack:
                k = stack.pop()
                if k in comp:
                    continue
                comp.add(k)
                stack.extend(adj[k] - comp)
            seen |= comp
            comps.append(comp)
        return comps


def build_topology(positions: np.ndarray, r_com: float) -> Topology:
    """Proximity graph with edges for pairwise distance strictly below r_com."""
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[0]
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(positions[i] - positions[j]) < r_com:
                edges.add((i, j))
    return Topology(n=n, edges=frozenset(edges))


def negotiate_update(theta_i: np.ndarray, pi_out: np.ndarray,
                     neighbor_thetas: list[np.ndarray] | np.ndarray,
                     c_neg: float) -> np.ndarray:
    """Rate of change of robot i's estimate (not yet integrated)."""
    theta_i = np.asarray(theta_i, dtype=float)
    rate = np.asarray(pi_out, dtype=float).copy()
    for theta_j in neighbor_thetas:
        rate = rate + c_neg * (np.asarray(theta_j, dtype=float) - theta_i)
    return rate


def consensus_error(estimates: np.ndarray) -> float:
    """Largest pairwise parameter disagreement, max_ij ||theta_i - theta_j||."""
    est = np.asarray(estimates, dtype=float)
    diff = est[:, None, :] - est[None, :, :]
    return float(np.max(np.linalg.norm(diff, axis=-1)))
