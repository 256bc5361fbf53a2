"""Receding-horizon shape expert.

The expert scores candidate shape-rate sequences by rolling the shape forward,
propagating the attacker through the learned strategy estimate, and summing a
step cost built from angle coverage (directions in which the attacker can be
intercepted, directions in which it can slip into the protected area),
distance, alignment, and input energy. A small particle swarm refines a handful
of warm-started candidate sequences.

All robots decide from their own shape estimate, but their swarms advance in
lockstep through one batched rollout per iteration so an episode's inner loop
stays in numpy; each robot consumes only its own random stream, which keeps
the group path bit-identical to deciding one robot at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .formation import BETA, PHI, ZETA, ShapeLimits, clamp_theta, pattern_batch
from .world import G_CLAMP_MAX, AttackerParams, EnvConfig, norm2

TWO_PI = 2.0 * np.pi
_R_FLOOR = 1.0e-6   # distance floor used inside rollouts


def wrap_angle(x):
    """Wrap into (-pi, pi]."""
    return x - TWO_PI * np.ceil((np.asarray(x, dtype=float) - np.pi) / TWO_PI)


def _union_length(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Total length covered by linear intervals [start, end], batched over the
    leading axis. Empty intervals are encoded as start == end."""
    order = np.argsort(starts, axis=-1)
    s = np.take_along_axis(starts, order, axis=-1)
    e = np.take_along_axis(ends, order, axis=-1)
    cm = np.maximum.accumulate(e, axis=-1)
    prev = np.concatenate([np.full(s.shape[:-1] + (1,), -np.inf), cm[..., :-1]], axis=-1)
    return np.clip(e - np.maximum(s, prev), 0.0, None).sum(axis=-1)


def _capture_pieces(p_a: np.ndarray, defenders: np.ndarray, r_cap: float):
    """Capture directions as linear interval pieces in [0, 2pi).

    Each defender blocks a bearing interval of half-width asin(r_cap / r); a
    defender already within r_cap blocks the forward half circle. Returns
    (starts, ends, r): wrapped intervals split in two, (P, 2n) each, plus the
    attacker-defender distances (P, n) for reuse.
    """
    d = defenders - p_a[:, None, :]
    r = np.maximum(np.linalg.norm(d, axis=-1), _R_FLOOR)
    c = np.arctan2(d[..., 1], d[..., 0])
    h = np.arcsin(np.minimum(1.0, r_cap / r))
    lo = np.mod(c - h, TWO_PI)
    w = 2.0 * h
    s1, e1 = lo, np.minimum(lo + w, TWO_PI)
    e2 = np.maximum(lo + w - TWO_PI, 0.0)
    s2 = np.zeros_like(e2)
    return np.concatenate([s1, s2], axis=-1), np.concatenate([e1, e2], axis=-1), r


def capture_angle_batch(p_a: np.ndarray, defenders: np.ndarray,
                        r_cap: float) -> np.ndarray:
    """Measure of attacker headings covered by at least one capture disc.

    p_a is (P, 2), defenders (P, n, 2); returns (P,).
    """
    starts, ends, _ = _capture_pieces(p_a, defenders, r_cap)
    return _union_length(starts, ends)


def capture_angle(p_a: np.ndarray, defenders: np.ndarray, r_cap: float) -> float:
    p_a = np.asarray(p_a, dtype=float)
    defenders = np.asarray(defenders, dtype=float)
    r = np.linalg.norm(defenders - p_a[None, :], axis=-1)
    if np.any(r <= 1.0e-6):
        raise ValueError("defender coincides with the attacker")
    return float(capture_angle_batch(p_a[None], defenders[None], r_cap)[0])


def _protected_from_pieces(p_a, p_p, rho_p, pieces):
    """Protected-heading measure given precomputed capture pieces."""
    starts, ends = pieces
    rel = p_p[None, :] - p_a
    dist = np.linalg.norm(rel, axis=-1)
    inside = dist <= rho_p
    dist_safe = np.maximum(dist, rho_p + _R_FLOOR)
    cb = np.arctan2(rel[:, 1], rel[:, 0])
    hb = np.arcsin(rho_p / dist_safe)

    widths = ends - starts
    # rotate so the cone starts at 0, re-split the wrapped pieces, clip to cone
    s_rel = np.mod(starts - (cb - hb)[:, None], TWO_PI)
    span = 2.0 * hb[:, None]
    s1 = np.minimum(s_rel, span)
    e1 = np.minimum(np.minimum(s_rel + widths, TWO_PI), span)
    e2 = np.minimum(np.maximum(s_rel + widths - TWO_PI, 0.0), span)
    s2 = np.zeros_like(e2)
    covered = _union_length(np.concatenate([s1, s2], axis=-1),
                            np.concatenate([np.maximum(e1, s1), e2], axis=-1))
    out = np.maximum(2.0 * hb - covered, 0.0)
    return np.where(inside, TWO_PI, out)


def protected_angle_batch(p_a: np.ndarray, p_p: np.ndarray, rho_p: float,
                          defenders: np.ndarray, r_cap: float) -> np.ndarray:
    """Measure of headings that reach the protected disc without crossing a
    capture disc. Batched and guarded: an attacker already inside the
    protected disc scores the full circle."""
    starts, ends, _ = _capture_pieces(p_a, defenders, r_cap)
    return _protected_from_pieces(p_a, p_p, rho_p, (starts, ends))


def protected_angle(p_a: np.ndarray, p_p: np.ndarray, rho_p: float,
                    defenders: np.ndarray, r_cap: float) -> float:
    p_a = np.asarray(p_a, dtype=float)
    p_p = np.asarray(p_p, dtype=float)
    if np.linalg.norm(p_a - p_p) <= rho_p:
        raise ValueError("attacker is already inside the protected area")
    defenders = np.asarray(defenders, dtype=float)
    r = np.linalg.norm(defenders - p_a[None, :], axis=-1)
    if np.any(r <= 1.0e-6):
        raise ValueError("defender coincides with the attacker")
    return float(protected_angle_batch(p_a[None], p_p, rho_p, defenders[None], r_cap)[0])


@dataclass
class CostWeights:
    k_cap: float = 1.0
    k_pro: float = 1.0
    k_dis: float = 0.02
    k_ali: float = 0.5
    k_ene: float = 0.01


def step_cost_batch(thetas: np.ndarray, s_a: np.ndarray, actions: np.ndarray,
                    env: EnvConfig, w: CostWeights, n: int,
                    refs: np.ndarray | None = None) -> np.ndarray:
    """Stage cost for (P,) predicted states. Defender positions are the slot
    references of each theta. s_a is (P, 4), actions (P, 5)."""
    if refs is None:
        refs = pattern_batch(thetas, n)
    p_a = s_a[:, :2]
    starts, ends, r_ai = _capture_pieces(p_a, refs, env.r_cap)
    phi_cap = _union_length(starts, ends)
    phi_pro = _protected_from_pieces(p_a, env.p_p, env.rho_p, (starts, ends))
    mean_r = r_ai.mean(axis=-1)
    rel = p_a - thetas[:, :2]
    phi_da = np.arctan2(rel[:, 1], rel[:, 0])
    ali = wrap_angle(thetas[:, 2] - phi_da)
    energy = np.sum(actions ** 2, axis=-1)
    return (-w.k_cap * phi_cap ** 2 + w.k_pro * phi_pro ** 2
            + w.k_dis * mean_r ** 2 + w.k_ali * ali ** 2 + w.k_ene * energy)


def step_cost(theta: np.ndarray, s_a: np.ndarray, action: np.ndarray,
              env: EnvConfig, w: CostWeights, n: int) -> float:
    """Stage cost of one predicted state (theta, s_a) under the given action."""
    theta = np.asarray(theta, dtype=float)
    s_a = np.asarray(s_a, dtype=float)
    action = np.asarray(action, dtype=float)
    return float(step_cost_batch(theta[None], s_a[None], action[None], env, w, n)[0])


def _attacker_step_batch(s: np.ndarray, q: np.ndarray, params: AttackerParams,
                         env: EnvConfig, dt: float) -> np.ndarray:
    """One predicted attacker step (p_p frame: protected point at the origin).

    s is (P, 4) attacker states, q (P, 2) nearest-defender positions. Mirrors
    attacker_control + step_agent so a correct parameter estimate reproduces
    the simulator transition exactly.
    """
    p, v = s[:, :2], s[:, 2:]
    n_ap = np.maximum(norm2(p)[:, None], 1.0e-12)
    e_ap = -p / n_ap
    if params.sign_as_printed:
        e_ap = -e_ap
    d = p - q
    r = np.maximum(norm2(d), _R_FLOOR)
    rho = r - params.r_safe
    span = params.r_avo - params.r_safe
    with np.errstate(divide="ignore", invalid="ignore"):
        g_open = (1.0 + np.cos(np.pi * np.clip(rho, 0.0, span) / span)) / rho
    g = np.where(r > params.r_avo, 0.0,
                 np.where(rho <= 0.0, G_CLAMP_MAX, np.minimum(g_open, G_CLAMP_MAX)))
    u = params.k_ap * e_ap + params.k_ad * (d / r[:, None]) * g[:, None]
    norm_u = norm2(u)[:, None]
    u = u * np.minimum(1.0, env.u_a_max / np.maximum(norm_u, 1.0e-12))
    p_next = p + dt * v
    v_next = v + dt * (u - env.c_a * v)
    return np.concatenate([p_next, v_next], axis=-1)


def rollout_batch(theta0: np.ndarray, s_a0: np.ndarray, rates: np.ndarray,
                  model: AttackerParams, env: EnvConfig, w: CostWeights, n: int,
                  limits: ShapeLimits, dt_dec: float, substeps: int) -> np.ndarray:
    """Cost of (P,) candidate rate sequences, rates shaped (P, N_p, 5).

    theta0 is one shape vector (5,) shared by all rows or a per-row (P, 5)
    array. The shape integrates one decision step per stage; the attacker is
    propagated through the strategy estimate at the physics step, with the
    nearest slot reference standing in for the nearest defender.
    """
    P, n_p, _ = rates.shape
    theta0 = np.asarray(theta0, dtype=float)
    thetas = np.tile(theta0, (P, 1)) if theta0.ndim == 1 else theta0.copy()
    s_a = np.tile(np.asarray(s_a0, dtype=float), (P, 1))
    # work in the p_p frame so the strategy estimate aims at the origin
    p_shift = env.p_p
    if np.any(p_shift):
        thetas[:, :2] -= p_shift
        s_a[:, :2] -= p_shift
        env = _origin_env(env)

    dt_sub = dt_dec / substeps
    total = np.zeros(P)
    refs = pattern_batch(thetas, n)
    for m in range(n_p):
        for _ in range(substeps):
            dists = np.linalg.norm(refs - s_a[:, None, :2], axis=-1)
            idx = np.argmin(dists, axis=-1)
            q = np.take_along_axis(refs, idx[:, None, None], axis=1)[:, 0, :]
            s_a = _attacker_step_batch(s_a, q, model, env, dt_sub)
        thetas = clamp_theta(thetas + dt_dec * rates[:, m, :], limits)
        refs = pattern_batch(thetas, n)
        total += step_cost_batch(thetas, s_a, rates[:, m, :], env, w, n, refs=refs)
    return total


def _origin_env(env: EnvConfig) -> EnvConfig:
    out = EnvConfig(**{**env.__dict__})
    out.p_p = np.zeros(2)
    return out


def rollout(theta0, s_a0, seq: "ActionSequence", model: AttackerParams,
            env: EnvConfig, w: CostWeights, n: int, limits: ShapeLimits,
            dt_dec: float, substeps: int = 3) -> float:
    """Cost of a single action sequence."""
    theta0 = np.asarray(theta0, dtype=float)
    s_a0 = np.asarray(s_a0, dtype=float)
    return float(rollout_batch(theta0, s_a0, seq.rates()[None], model, env, w,
                               n, limits, dt_dec, substeps)[0])


@dataclass
class ActionBounds:
    """Per-component bounds on the shape rate [pc_x', pc_y', phi', zeta', beta']."""

    lo: np.ndarray = field(default_factory=lambda: -np.array([1.0, 1.0, 0.8, 0.5, 0.8]))
    hi: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 0.8, 0.5, 0.8]))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("upper bounds must exceed lower bounds")


@dataclass
class ActionSequence:
    """A bounded rate sequence: N_c free entries, repeated out to N_p stages."""

    free: np.ndarray    # (n_c, 5)
    n_p: int

    def __post_init__(self):
        self.free = np.atleast_2d(np.asarray(self.free, dtype=float))
        if self.n_p < self.free.shape[0]:
            raise ValueError("horizon shorter than the free block")

    @property
    def n_c(self) -> int:
        return self.free.shape[0]

    def rates(self) -> np.ndarray:
        tail = np.tile(self.free[-1], (self.n_p - self.n_c, 1))
        return np.concatenate([self.free, tail], axis=0)

    def first(self) -> np.ndarray:
        return self.free[0].copy()

    def shifted(self) -> "ActionSequence":
        """Warm start for the next decision: drop the first stage."""
        rates = self.rates()
        return ActionSequence(rates[1:self.n_c + 1].copy(), self.n_p)


@dataclass
class PsoConfig:
    n_particles: int = 5
    n_iters: int = 5
    omega: float = 0.7
    c1: float = 0.1     # pull toward the global best
    c2: float = 0.1     # pull toward each particle's own best
    sigma: float = 0.2  # seeding spread, fraction of each bound half-range


@dataclass
class PsoResult:
    best: np.ndarray
    best_cost: float
    gbest_trace: np.ndarray   # best cost after seeding and after each iteration


def _pso_group(objective, seeds: np.ndarray, cfg: PsoConfig, lo: np.ndarray,
               hi: np.ndarray, rngs: list):
    """Advance k independent swarms in lockstep.

    seeds is (k, P, D); objective maps (k*P, D) to (k*P,) costs. Swarm i only
    consumes rngs[i], so results match running the swarms one at a time.
    """
    x = np.clip(np.asarray(seeds, dtype=float), lo, hi)
    k, P, D = x.shape
    if P != cfg.n_particles:
        raise ValueError("seed count must match cfg.n_particles")
    scale = cfg.sigma * (hi - lo) / 2.0
    v = np.stack([rng.uniform(-1.0, 1.0, size=(P, D)) for rng in rngs]) * scale

    def evaluate(pos):
        return np.asarray(objective(pos.reshape(k * P, D)), dtype=float).reshape(k, P)

    rows = np.arange(k)
    cost = evaluate(x)
    pbest = x.copy()
    pbest_cost = cost.copy()
    gi = np.argmin(pbest_cost, axis=1)
    gbest = pbest[rows, gi].copy()
    gbest_cost = pbest_cost[rows, gi].copy()
    trace = [gbest_cost.copy()]

    for _ in range(cfg.n_iters):
        r1 = np.stack([rng.random((P, 1)) for rng in rngs])
        r2 = np.stack([rng.random((P, 1)) for rng in rngs])
        v = (cfg.omega * v + cfg.c1 * r1 * (gbest[:, None, :] - x)
             + cfg.c2 * r2 * (pbest - x))
        x = np.clip(x + v, lo, hi)
        cost = evaluate(x)
        better = cost < pbest_cost
        pbest[better] = x[better]
        pbest_cost[better] = cost[better]
        gi = np.argmin(pbest_cost, axis=1)
        improved = pbest_cost[rows, gi] < gbest_cost
        gbest[improved] = pbest[rows, gi][improved]
        gbest_cost[improved] = pbest_cost[rows, gi][improved]
        trace.append(gbest_cost.copy())
    return gbest, gbest_cost, np.stack(trace, axis=1)


def pso_solve(objective: Callable[[np.ndarray], np.ndarray], seeds: np.ndarray,
              cfg: PsoConfig, lo: np.ndarray, hi: np.ndarray,
              rng: np.random.Generator) -> PsoResult:
    """Minimize a batched objective over a box.

    objective maps (P, D) positions to (P,) costs. Positions are clamped to
    the box after every move; r1/r2 are scalar per particle per iteration, so
    the result is deterministic for a fixed generator state.
    """
    seeds = np.asarray(seeds, dtype=float)
    gbest, gbest_cost, trace = _pso_group(objective, seeds[None], cfg, lo, hi, [rng])
    return PsoResult(best=gbest[0], best_cost=float(gbest_cost[0]),
                     gbest_trace=trace[0])


@dataclass
class ExpertConfig:
    n_p: int = 5
    n_c: int = 2
    decision_every: int = 3            # physics steps per decision
    bounds: ActionBounds = field(default_factory=ActionBounds)
    weights: CostWeights = field(default_factory=CostWeights)
    pso: PsoConfig = field(default_factory=PsoConfig)
    limits: ShapeLimits = field(default_factory=ShapeLimits)

    def dt_dec(self, dt: float) -> float:
        return self.decision_every * dt


def _tile_bounds(bounds: ActionBounds, n_c: int):
    return np.tile(bounds.lo, n_c), np.tile(bounds.hi, n_c)


def guess_rates(theta: np.ndarray, s_a: np.ndarray, env: EnvConfig,
                cfg: "ExpertConfig", n: int) -> np.ndarray:
    """Two structured warm-start candidates, (2, 5) rate vectors.

    Row 0 co-rotates the whole pattern with the attacker's angular motion
    about the protected point (tangential center rate plus matching phi
    rate). Rotation is the only formation maneuver whose slot speed scales
    with radius, so it is the move that keeps a faster opponent from simply
    orbiting past the line; a handful of uniform particles almost never
    lines up all three components by chance.

    Row 1 stages the capture. The arc cannot out-run the opponent, but the
    opponent's own drive toward the protected point can be used against it:
    hold a curved wall in its way, turn the opening of the wall to face it,
    back the wall up so the opponent follows the receding repulsion source
    into the concavity, and once it sits closer to the pattern center than
    the radius of the fully closed ring, wrap the opening shut and contract
    the spacing until the capture distance trips. Every branch below is a
    plain function of the decision state, so the swarm stays deterministic
    and the optimizer is free to discard the move whenever it costs more
    than it earns.
    """
    theta = np.asarray(theta, dtype=float)
    s_a = np.asarray(s_a, dtype=float)
    bounds = cfg.bounds
    rel = s_a[:2] - env.p_p
    r_a = max(float(np.hypot(rel[0], rel[1])), 1.0e-9)
    u_hat = rel / r_a
    omega = (rel[0] * s_a[3] - rel[1] * s_a[2]) / r_a ** 2
    pc_rel = theta[:2] - env.p_p
    co_rot = np.array([-omega * pc_rel[1], omega * pc_rel[0]])
    rotate = np.array([co_rot[0], co_rot[1], omega, 0.0, 0.0])

    to_a = s_a[:2] - theta[:2]
    d_ca = max(float(np.hypot(to_a[0], to_a[1])), 0.5)
    lam_c = np.arctan2(to_a[1], to_a[0])
    mouth_err = (lam_c + np.pi - theta[PHI] + np.pi) % (2.0 * np.pi) - np.pi
    rate_phi = 2.0 * mouth_err + omega
    zeta_hi = cfg.limits.zeta_max
    ring_r = theta[ZETA] * (n - 1) / (2.0 * np.pi)   # radius once closed
    if d_ca < max(0.9 * ring_r, 1.6):
        # engulf: close the ring on the opponent, then squeeze
        rate_pc = 2.0 * to_a + co_rot
        rate_beta = bounds.hi[BETA]
        rate_zeta = -0.5 if theta[BETA] > 5.5 else 0.5 * (2.4 - theta[ZETA])
    else:
        # funnel: deep wide bowl between opponent and protected point,
        # opening kept turned toward the opponent so its own attraction
        # rides it down the throat past the wingtips
        pc_target = env.p_p + min(0.55 * r_a, 3.3) * u_hat
        rate_pc = 1.5 * (pc_target - theta[:2]) + co_rot
        rate_beta = 1.5 * (3.6 - theta[BETA])
        rate_zeta = 1.0 * (zeta_hi - theta[ZETA])
    pocket = np.array([rate_pc[0], rate_pc[1], rate_phi, rate_zeta, rate_beta])
    return np.clip(np.stack([rotate, pocket]), bounds.lo, bounds.hi)


def build_seeds(cfg: ExpertConfig, actor_out: np.ndarray | None,
                prev: ActionSequence | None, rng: np.random.Generator,
                guesses: np.ndarray | None = None) -> np.ndarray:
    """Warm-start particle positions, flattened to (n_particles, n_c*5).

    Priority: actor output tiled over the horizon, previous solution
    shifted, structured guesses (see guess_rates), normal perturbations of
    the actor output, uniform fill. Missing sources fall back to uniform
    draws.
    """
    lo, hi = _tile_bounds(cfg.bounds, cfg.n_c)
    d = lo.size
    p = cfg.pso.n_particles
    scale = cfg.pso.sigma * (hi - lo) / 2.0

    def uniform():
        return rng.uniform(lo, hi)

    seeds = []
    if actor_out is not None:
        center = np.tile(np.asarray(actor_out, dtype=float), cfg.n_c)
        seeds.append(center.copy())
    else:
        center = None
        seeds.append(uniform())
    seeds.append(prev.shifted().free.ravel().copy() if prev is not None else uniform())
    if guesses is not None:
        for row in np.asarray(guesses, dtype=float):
            seeds.append(np.tile(row, cfg.n_c))
    for _ in range(max(p // 2 - 1, 0)):
        if center is not None:
            seeds.append(center + rng.normal(size=d) * scale)
        else:
            seeds.append(uniform())
    while len(seeds) < p:
        seeds.append(uniform())
    return np.clip(np.stack(seeds[:p]), lo, hi)


def expert_decide_group(thetas: np.ndarray, s_a: np.ndarray,
                        model: AttackerParams,
                        actor: Callable[[np.ndarray, np.ndarray], np.ndarray] | None,
                        prevs: list, cfg: ExpertConfig, env: EnvConfig, n: int,
                        rngs: list) -> tuple[np.ndarray, list, np.ndarray]:
    """Rolling-horizon decisions for k robots, one swarm per robot.

    thetas is (k, 5) per-robot shape estimates; prevs and rngs are per-robot
    lists. Returns the (k, 5) rate commands, per-robot best sequences, and
    their costs.
    """
    thetas = np.asarray(thetas, dtype=float)
    s_a = np.asarray(s_a, dtype=float)
    k = thetas.shape[0]
    lo, hi = _tile_bounds(cfg.bounds, cfg.n_c)
    dt_dec = cfg.dt_dec(env.dt)
    seeds = np.stack([
        build_seeds(cfg, actor(thetas[i], s_a) if actor is not None else None,
                    prevs[i], rngs[i],
                    guesses=guess_rates(thetas[i], s_a, env, cfg, n))
        for i in range(k)
    ])
    theta_rows = np.repeat(thetas, cfg.pso.n_particles, axis=0)

    def objective(x: np.ndarray) -> np.ndarray:
        free = x.reshape(-1, cfg.n_c, 5)
        tail = np.repeat(free[:, -1:, :], cfg.n_p - cfg.n_c, axis=1)
        rates = np.concatenate([free, tail], axis=1)
        return rollout_batch(theta_rows, s_a, rates, model, env, cfg.weights, n,
                             cfg.limits, dt_dec, cfg.decision_every)

    gbest, gbest_cost, _ = _pso_group(objective, seeds, cfg.pso, lo, hi, rngs)
    seqs = [ActionSequence(gbest[i].reshape(cfg.n_c, 5), cfg.n_p) for i in range(k)]
    rates = np.stack([s.first() for s in seqs])
    return rates, seqs, gbest_cost


def expert_decide(theta: np.ndarray, s_a: np.ndarray, model: AttackerParams,
                  actor: Callable[[np.ndarray, np.ndarray], np.ndarray] | None,
                  prev: ActionSequence | None, cfg: ExpertConfig, env: EnvConfig,
                  n: int, rng: np.random.Generator
                  ) -> tuple[np.ndarray, ActionSequence, float]:
    """One rolling-horizon decision for a single robot.

    Returns the shape-rate command (first stage of the best sequence), the
    best sequence itself (warm start for the next decision), and its cost.
    """
    theta = np.asarray(theta, dtype=float)
    rates, seqs, costs = expert_decide_group(theta[None], s_a, model, actor,
                                             [prev], cfg, env, n, [rng])
    return rates[0], seqs[0], float(costs[0])
