"""Parameterized arc formation and the per-robot tracking controller.

A formation is a 5-parameter shape theta = [p_c (2), phi, zeta, beta]:
center, heading, spacing, and total opening angle. Slot references lie on a
polyline whose segments all have length zeta and turn by the constant angle
beta/(n-1), re-centered so their mean is p_c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# theta vector layout
PC_X, PC_Y, PHI, ZETA, BETA = range(5)
THETA_DIM = 5


@dataclass
class ShapeParams:
    """Arc-shape parameters. p_c is shape (2,); angles in radians."""

    p_c: np.ndarray
    phi: float
    zeta: float
    beta: float

    def __post_init__(self):
        self.p_c = np.asarray(self.p_c, dtype=float)
        if self.zeta <= 0.0:
            raise ValueError("zeta must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")

    def to_vector(self) -> np.ndarray:
        return np.array([self.p_c[0], self.p_c[1], self.phi, self.zeta, self.beta])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "ShapeParams":
        v = np.asarray(v, dtype=float)
        return cls(p_c=v[:2].copy(), phi=float(v[PHI]), zeta=float(v[ZETA]),
                   beta=float(v[BETA]))


@dataclass
class ShapeLimits:
    """Clamp bounds for the shape parameters. phi is unconstrained.

    zeta_max keeps the pattern compact enough that small parameter rates move
    every slot at speeds the robots can actually track; without it the
    planner stretches the arc into a net much wider than the robots can
    swing, and the slot references stop meaning anything physically.

    pc_max leashes the formation center to a disc around the protected
    point. Rotating the pattern (phi) sweeps slots at radius-times-rate,
    which is the only maneuver fast enough to track a quicker opponent
    circling the protected area; translating the center out to the opponent
    trades that away for a race the slower robots always lose."""

    zeta_min: float = 0.5
    zeta_max: float = 3.2
    beta_max: float = 2.0 * np.pi
    pc_max: float | None = 4.0


def clamp_theta(theta: np.ndarray, limits: ShapeLimits,
                center: np.ndarray | None = None) -> np.ndarray:
    """Clamp the shape parameters into their admissible set (vector, (..,5)).

    zeta and beta are boxed; p_c is radially projected onto the disc of
    radius limits.pc_max around `center` (the origin when not given, i.e.
    the protected point in its own frame)."""
    out = np.array(theta, dtype=float, copy=True)
    if limits.pc_max is not None:
        pc = out[..., PC_X:PC_Y + 1]
        if center is not None:
            pc = pc - np.asarray(center, dtype=float)
        rad = np.linalg.norm(pc, axis=-1, keepdims=True)
        pc = pc * np.minimum(1.0, limits.pc_max / np.maximum(rad, 1.0e-12))
        if center is not None:
            pc = pc + np.asarray(center, dtype=float)
        out[..., PC_X:PC_Y + 1] = pc
    out[..., ZETA] = np.clip(out[..., ZETA], limits.zeta_min, limits.zeta_max)
    out[..., BETA] = np.clip(out[..., BETA], 0.0, limits.beta_max)
    return out


def pattern_batch(thetas: np.ndarray, n: int) -> np.ndarray:
    """Reference positions for a batch of shape vectors.

    Parameters
    ----------
    thetas : (..., 5) array of shape vectors.
    n : number of robots, n >= 2.

    Returns
    -------
    (..., n, 2) array of slot references. The mean over slots equals p_c.
    """
    thetas = np.asarray(thetas, dtype=float)
    if n < 2:
        raise ValueError("pattern needs n >= 2")
    phi = thetas[..., PHI]
    zeta = thetas[..., ZETA]
    beta = thetas[..., BETA]

    # segment headings psi_i for i = 2..n (n-1 segments)
    i = np.arange(2, n + 1, dtype=float)
    psi = (phi[..., None] + np.pi / 2.0
           + (2.0 * i - n - 2.0) * beta[..., None] / (2.0 * (n - 1.0)))
    seg = zeta[..., None, None] * np.stack([np.cos(psi), np.sin(psi)], axis=-1)

    q = np.zeros(thetas.shape[:-1] + (n, 2))
    q[..., 1:, :] = np.cumsum(seg, axis=-2)
    refs = q - q.mean(axis=-2, keepdims=True) + thetas[..., None, :2]
    return refs


def pattern(theta: ShapeParams | np.ndarray, n: int) -> np.ndarray:
    """Slot references, shape (n, 2), for a single shape parameter set."""
    vec = theta.to_vector() if isinstance(theta, ShapeParams) else np.asarray(theta, dtype=float)
    return pattern_batch(vec, n)


def formation_control(p_i: np.ndarray, v_i: np.ndarray, p_ref: np.ndarray,
                      pc_dot: np.ndarray, k_p: float, c_d: float,
                      drag_comp_as_printed: bool = False) -> np.ndarray:
    """Tracking input for one robot.

    Default: proportional pull to the slot plus a drag-compensated
    feedforward of the commanded center velocity, k_p*(p_ref - p_i) +
    C_d*pc_dot. The robot's own drag supplies the damping, so the position
    error decays and a slot moving at constant pc_dot is tracked with zero
    steady-state error. The audit switch selects the raw-feedforward variant
    with a v_i/C_d term instead; that one trails a moving slot by about
    (C_d - 1/C_d - 1)/k_p times the center speed.
    """
    p_i = np.asarray(p_i, dtype=float)
    v_i = np.asarray(v_i, dtype=float)
    pc_dot = np.asarray(pc_dot, dtype=float)
    pull = k_p * (np.asarray(p_ref, dtype=float) - p_i)
    if drag_comp_as_printed:
        return pull + pc_dot + v_i / c_d
    return pull + c_d * pc_dot


def assign_slots(positions: np.ndarray, refs: np.ndarray,
                 greedy: bool = False) -> np.ndarray:
    """Map robot index -> slot index.

    Default is the identity. Greedy mode repeatedly pairs the globally closest
    (robot, free slot); with robots already sitting on (permuted) slots this
    recovers the exact matching.
    """
    positions = np.asarray(positions, dtype=float)
    refs = np.asarray(refs, dtype=float)
    n = positions.shape[0]
    if refs.shape[0] != n:
        raise ValueError("need as many slots as robots")
    if not greedy:
        return np.arange(n)

    d = np.linalg.norm(positions[:, None, :] - refs[None, :, :], axis=-1)
    perm = np.full(n, -1, dtype=int)
    free_r = np.ones(n, dtype=bool)
    free_s = np.ones(n, dtype=bool)
    for _ in range(n):
        masked = np.where(free_r[:, None] & free_s[None, :], d, np.inf)
        r, s = np.unravel_index(np.argmin(masked), masked.shape)
        perm[r] = s
        free_r[r] = False
        free_s[s] = False
    return perm
