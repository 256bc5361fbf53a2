"""Planar double-integrator world: agent dynamics, the attacker's potential-field
strategy, and episode termination checks.

All agents share the same damped dynamics  p' = v,  v' = u - C*v  integrated with
a semi-explicit Euler step (position first, with the old velocity). Inputs are
saturated by norm, so the speed limit u_max/C is respected without extra clamping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Hard ceiling for the avoidance weight as r approaches the safety radius.
G_CLAMP_MAX = 1.0e3

STATUS_RUNNING = "running"
STATUS_CAPTURED = "captured"
STATUS_BREACHED = "breached"
STATUS_TIMEOUT = "timeout"


@dataclass
class AgentState:
    """Position and velocity of one agent, both shape (2,) float arrays."""

    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])

    @classmethod
    def from_vector(cls, s: np.ndarray) -> "AgentState":
        s = np.asarray(s, dtype=float)
        return cls(p=s[:2].copy(), v=s[2:4].copy())

    def copy(self) -> "AgentState":
        return AgentState(self.p.copy(), self.v.copy())


@dataclass
class EnvConfig:
    """Shared physical constants. Defaults follow the reference scenario."""

    u_d_max: float = 15.0      # defender input limit, m/s^2
    u_a_max: float = 17.5      # attacker input limit, m/s^2
    c_d: float = 7.5           # defender drag, 1/s
    c_a: float = 7.0           # attacker drag, 1/s
    r_cap: float = 1.0         # capture radius, m
    r_com: float = 4.0         # communication radius, m
    rho_p: float = 2.0         # protected-area radius, m
    p_p: np.ndarray = field(default_factory=lambda: np.zeros(2))
    field_size: tuple = (20.0, 30.0)   # full extents (x, y), centered on origin
    dt: float = 0.05           # physics step, s
    t_max: float = 120.0       # episode cutoff, s

    def __post_init__(self):
        self.p_p = np.asarray(self.p_p, dtype=float)
        if self.dt <= 0.0 or self.t_max <= 0.0:
            raise ValueError("dt and t_max must be positive")
        # Euler integration of the drag term is only sensible for dt*C < 1.
        if self.dt * max(self.c_d, self.c_a) >= 1.0:
            raise ValueError("dt * max(C_d, C_a) must be < 1 for stable integration")
        for name in ("u_d_max", "u_a_max", "c_d", "c_a", "r_cap", "r_com", "rho_p"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def v_d_max(self) -> float:
        return self.u_d_max / self.c_d

    @property
    def v_a_max(self) -> float:
        return self.u_a_max / self.c_a


@dataclass
class AttackerParams:
    """Gains of the attacker's potential-field strategy."""

    k_ap: float = 10.0     # attraction toward the protected point
    k_ad: float = 8.0      # repulsion from the nearest defender
    r_safe: float = 1.0    # inner radius of the repulsion field, m
    r_avo: float = 10.0    # outer radius of the repulsion field, m
    sign_as_printed: bool = False   # keep the (defective) published approach sign

    def __post_init__(self):
        if self.r_avo <= self.r_safe:
            raise ValueError("r_avo must exceed r_safe")


@dataclass(frozen=True)
class EpisodeStatus:
    kind: str
    time: float | None = None

    @property
    def terminal(self) -> bool:
        return self.kind != STATUS_RUNNING


def norm2(x: np.ndarray) -> np.ndarray:
    """Length of 2-vectors along the last axis via the plain formula.

    np.linalg.norm without an axis routes tiny vectors through a BLAS dot
    whose rounding differs from the batched reduction; spelling the sum out
    keeps scalar and batched code paths bit-identical.
    """
    x = np.asarray(x, dtype=float)
    return np.sqrt(x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1])


def saturate(u: np.ndarray, u_max: float) -> np.ndarray:
    """Scale u down to norm u_max if it exceeds it; direction is preserved."""
    u = np.asarray(u, dtype=float)
    norm = float(norm2(u))
    if norm > u_max:
        return u * (u_max / norm)
    return u.copy()


def step_agent(state: AgentState, u: np.ndarray, c: float, u_max: float,
               dt: float) -> AgentState:
    """One semi-explicit Euler step. Position updates with the old velocity."""
    u_s = saturate(u, u_max)
    p_next = state.p + dt * state.v
    v_next = state.v + dt * (u_s - c * state.v)
    return AgentState(p_next, v_next)


def weight_g(r: float, r_safe: float, r_avo: float,
             clamp: float = G_CLAMP_MAX) -> float:
    """Avoidance weight: decays from a clamped pole at r_safe to 0 at r_avo.

    r <= r_safe returns the clamp value rather than raising, so a simulation
    step that lands inside the safety radius stays finite.
    """
    if r_avo <= r_safe:
        raise ValueError("r_avo must exceed r_safe")
    if r > r_avo:
        return 0.0
    if r <= r_safe:
        return clamp
    g = (1.0 + np.cos(np.pi * (r - r_safe) / (r_avo - r_safe))) / (r - r_safe)
    return float(min(g, clamp))


def attacker_control(s_a: AgentState, p_d_near: np.ndarray,
                     params: AttackerParams, p_p: np.ndarray) -> np.ndarray:
    """Potential-field input: approach the protected point, avoid the nearest
    defender. The caller saturates the result to u_a_max."""
    p_p = np.asarray(p_p, dtype=float)
    d_ap = p_p - s_a.p
    n_ap = float(norm2(d_ap))
    if n_ap < 1.0e-12:
        e_ap = np.zeros(2)
    else:
        e_ap = d_ap / n_ap
    if params.sign_as_printed:
        e_ap = -e_ap

    d_ad = s_a.p - np.asarray(p_d_near, dtype=float)
    r = float(norm2(d_ad))
    if r < 1.0e-12:
        avoid = np.zeros(2)
    else:
        avoid = (d_ad / r) * weight_g(r, params.r_safe, params.r_avo)
    return params.k_ap * e_ap + params.k_ad * avoid


def nearest_defender(p_a: np.ndarray, defenders: list[AgentState]) -> tuple[int, AgentState]:
    """Index and state of the defender closest to p_a. Ties pick the lowest index."""
    if not defenders:
        raise ValueError("need at least one defender")
    dists = [float(np.linalg.norm(d.p - p_a)) for d in defenders]
    idx = int(np.argmin(dists))
    return idx, defenders[idx]


def episode_status(p_a: np.ndarray, defenders: list[AgentState], env: EnvConfig,
                   t: float) -> EpisodeStatus:
    """Terminal checks in priority order: capture, breach, timeout."""
    p_a = np.asarray(p_a, dtype=float)
    for d in defenders:
        if float(np.linalg.norm(d.p - p_a)) <= env.r_cap:
            return EpisodeStatus(STATUS_CAPTURED, t)
    if float(np.linalg.norm(p_a - env.p_p)) <= env.rho_p:
        return EpisodeStatus(STATUS_BREACHED, t)
    if t >= env.t_max:
        return EpisodeStatus(STATUS_TIMEOUT, t)
    return EpisodeStatus(STATUS_RUNNING)
