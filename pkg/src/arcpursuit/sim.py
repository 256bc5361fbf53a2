"""Episode orchestration, Monte Carlo evaluation, and the training session.

Each physics step runs the full distributed cycle: communication topology
from current positions, per-defender shape-rate decisions on the decision
cadence, a consensus-coupled parameter update at physics rate, tracking
control from each defender's own shape estimate, and a simultaneous
integration of every agent. Training, when enabled, collects attacker
transitions every step and expert-labeled decisions every decision step,
then updates the three learned components on a fixed cadence.

All randomness flows from per-episode seed sequences, so identical seeds
give identical episodes regardless of how runs are batched across workers.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .expert import ExpertConfig, expert_decide_group
from .formation import assign_slots, clamp_theta, formation_control, pattern_batch
from .learning import (
    ActorWeights,
    BaselineWeights,
    LearningConfig,
    ModelWeights,
    ReplayBuffer,
    Standardizer,
    WeightsBundle,
    actor_forward,
    actor_update,
    augment,
    baseline_update,
    init_actor_weights,
    init_baseline_weights,
    init_model_weights,
    model_update,
    stack_decisions,
    stack_transitions,
)
from .negotiation import build_topology, consensus_error, negotiate_update
from .world import (
    STATUS_BREACHED,
    STATUS_CAPTURED,
    STATUS_RUNNING,
    STATUS_TIMEOUT,
    AgentState,
    AttackerParams,
    EnvConfig,
    EpisodeStatus,
    attacker_control,
    episode_status,
    nearest_defender,
    norm2,
    step_agent,
)

MODES = ("expert", "actor", "actor_seeded_expert")

RECORD_SCHEMA_VERSION = 1

SPAWN_MAX_TRIES = 10_000
SPAWN_ANNULUS_PAD = (1.0, 4.0)    # defender ring, offsets beyond rho_p, m
SPAWN_MIN_SEPARATION = 0.5        # m
SPAWN_BOUNDARY_BAND = 1.0         # attacker strip inside the field edge, m

K_P_DEFAULT = 4.0                 # tracking stiffness, 1/s^2
C_NEG_DEFAULT = 2.0               # negotiation gain, 1/s


@dataclass
class EpisodeConfig:
    """Everything one episode needs; also the unit of Monte Carlo work."""

    n_defenders: int = 6
    mode: str = "expert"
    train: bool = False
    seed: object = 0              # int, or (master, index) tuple for derived runs
    env: EnvConfig = field(default_factory=EnvConfig)
    attacker: AttackerParams = field(default_factory=AttackerParams)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    k_p: float = K_P_DEFAULT
    c_neg: float = C_NEG_DEFAULT
    greedy_slots: bool = True

    def __post_init__(self):
        if self.n_defenders < 2:
            raise ValueError("need at least two defenders")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class EpisodeRecord:
    status: EpisodeStatus
    duration: float
    rows: list
    seed: object
    mode: str
    n_defenders: int


@dataclass
class TrainState:
    """Mutable training context shared across the episodes of a session."""

    model: ModelWeights
    actor: ActorWeights
    baseline: BaselineWeights | None
    std: Standardizer
    model_buf: ReplayBuffer
    actor_buf: ReplayBuffer
    model_losses: list = field(default_factory=list)
    actor_losses: list = field(default_factory=list)
    baseline_losses: list = field(default_factory=list)


def spawn(env: EnvConfig, n: int, rng: np.random.Generator
          ) -> tuple[list[AgentState], AgentState]:
    """Initial states: defenders on an annulus just outside the protected
    area (pairwise separated), attacker in the boundary band, all at rest."""
    r_lo = env.rho_p + SPAWN_ANNULUS_PAD[0]
    r_hi = env.rho_p + SPAWN_ANNULUS_PAD[1]
    placed: list[np.ndarray] = []
    tries = 0
    while len(placed) < n:
        if tries >= SPAWN_MAX_TRIES:
            raise RuntimeError("defender spawn rejection limit exceeded")
        tries += 1
        # uniform over the annulus area
        r = np.sqrt(rng.uniform(r_lo * r_lo, r_hi * r_hi))
        ang = rng.uniform(-np.pi, np.pi)
        cand = env.p_p + r * np.array([np.cos(ang), np.sin(ang)])
        if all(norm2(cand - q) >= SPAWN_MIN_SEPARATION for q in placed):
            placed.append(cand)
    defenders = [AgentState(p, np.zeros(2)) for p in placed]

    half = np.array(env.field_size) / 2.0
    tries = 0
    while True:
        if tries >= SPAWN_MAX_TRIES:
            raise RuntimeError("attacker spawn rejection limit exceeded")
        tries += 1
        cand = rng.uniform(-half, half)
        if np.any(np.abs(cand) > half - SPAWN_BOUNDARY_BAND):
            break
    attacker = AgentState(cand, np.zeros(2))
    return defenders, attacker


def initial_thetas(env: EnvConfig, attacker: AgentState, n: int) -> np.ndarray:
    """Every defender's first guess of the shape parameters.

    Built only from commonly known quantities (protected point, attacker
    state), so the local estimates start in agreement. The guess is a deep
    wide arc posted between the attacker and the protected point with its
    opening turned toward the attacker: the incoming dive then funnels
    past the wingtips instead of piling up against a convex wall."""
    to_a = attacker.p - env.p_p
    r_a = max(float(np.hypot(to_a[0], to_a[1])), 1.0e-9)
    lam = np.arctan2(to_a[1], to_a[0])
    pc = env.p_p + min(0.55 * r_a, 3.3) * to_a / r_a
    theta = np.array([pc[0], pc[1], lam + np.pi, 3.2, 3.6])
    return np.tile(theta, (n, 1))


def _shifts(env: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    theta_shift = np.array([env.p_p[0], env.p_p[1], 0.0, 0.0, 0.0])
    state_shift = np.array([env.p_p[0], env.p_p[1], 0.0, 0.0])
    return theta_shift, state_shift


def make_actor_policy(get_actor, std: Standardizer, bounds, env: EnvConfig):
    """World-frame callable around (possibly live) actor weights."""
    theta_shift, state_shift = _shifts(env)

    def policy(theta: np.ndarray, s_a: np.ndarray) -> np.ndarray:
        return actor_forward(get_actor(), std, bounds, theta - theta_shift,
                             s_a - state_shift)

    return policy


def _train_round(cfg: EpisodeConfig, ts: TrainState) -> dict:
    """One cadence round: a gradient step for each component whose buffer
    holds a full batch. Returns the losses that were computed."""
    lc = cfg.learning
    out = {}
    if len(ts.model_buf) >= lc.batch_size:
        batch = stack_transitions(ts.model_buf.sample(lc.batch_size))
        ts.model, loss, _ = model_update(ts.model, batch, lc.alpha_model,
                                         lc.w_model, cfg.env, cfg.env.dt)
        ts.model_losses.append(loss)
        out["model"] = loss
        if ts.baseline is not None:
            batch = stack_transitions(ts.model_buf.sample(lc.batch_size))
            ts.baseline, loss, _ = baseline_update(ts.baseline, ts.std, batch,
                                                   lc.alpha_baseline, lc.w_model)
            ts.baseline_losses.append(loss)
            out["baseline"] = loss
    if len(ts.actor_buf) >= lc.batch_size:
        batch = stack_decisions(ts.actor_buf.sample(lc.batch_size))
        ts.actor, loss, _ = actor_update(ts.actor, ts.std, batch,
                                         lc.alpha_actor, lc.w_actor)
        ts.actor_losses.append(loss)
        out["actor"] = loss
    return out


def run_episode(cfg: EpisodeConfig, bundle: WeightsBundle | None = None,
                train_state: TrainState | None = None,
                keep_rows: bool = True) -> EpisodeRecord:
    """Simulate one episode.

    Weights come from `train_state` (live, updated in place) when given,
    else from `bundle` (frozen), else from fresh initial estimates. The
    attacker always runs its true strategy from cfg.attacker.
    """
    if cfg.train and train_state is None:
        raise ValueError("train flag needs a TrainState")
    env = cfg.env
    n = cfg.n_defenders
    dt = env.dt

    ss = np.random.SeedSequence(cfg.seed)
    spawn_child, decision_child = ss.spawn(2)
    spawn_rng = np.random.default_rng(spawn_child)
    # One seed per decision round, shared by every defender (common random
    # numbers). Identical local estimates then produce identical proposals,
    # so swarm noise cannot reopen the consensus gap the negotiation closes.
    round_seed_rng = np.random.default_rng(decision_child)

    defenders, attacker = spawn(env, n, spawn_rng)
    thetas = initial_thetas(env, attacker, n)

    if train_state is not None:
        get_model = lambda: train_state.model
        get_actor = lambda: train_state.actor
        std = train_state.std
    elif bundle is not None:
        get_model = lambda: bundle.model
        get_actor = lambda: bundle.actor
        std = bundle.std
    else:
        init_model = init_model_weights()
        get_model = lambda: init_model
        get_actor = lambda: None
        std = Standardizer(vel_scale=1.0 / env.v_a_max)

    needs_actor = cfg.mode in ("actor", "actor_seeded_expert")
    if needs_actor and get_actor() is None:
        raise ValueError(f"mode {cfg.mode!r} needs actor weights")
    actor_policy = (make_actor_policy(get_actor, std, cfg.expert.bounds, env)
                    if needs_actor else None)

    # one-off slot assignment from the average initial guess
    mean_refs = pattern_batch(thetas.mean(axis=0), n)
    perm = assign_slots(np.stack([d.p for d in defenders]), mean_refs,
                        greedy=cfg.greedy_slots)

    theta_shift, state_shift = _shifts(env)
    prevs = [None] * n
    pis = np.zeros((n, 5))
    rows: list = []
    k = 0
    while True:
        t = k * dt
        status = episode_status(attacker.p, defenders, env, t)
        if status.terminal:
            if keep_rows:
                rows.append(_row(t, attacker.as_vector(),
                                 [d.as_vector() for d in defenders],
                                 thetas, None, None, status.kind))
            break

        positions = np.stack([d.p for d in defenders])
        topology = build_topology(positions, env.r_com)
        s_a_vec = attacker.as_vector()

        if k % cfg.expert.decision_every == 0:
            if cfg.mode == "actor":
                pis = np.stack([actor_policy(thetas[i], s_a_vec)
                                for i in range(n)])
            else:
                seeder = actor_policy if cfg.mode == "actor_seeded_expert" else None
                round_seed = int(round_seed_rng.integers(2**63))
                decision_rngs = [np.random.default_rng(round_seed)
                                 for _ in range(n)]
                pis, prevs, _ = expert_decide_group(
                    thetas, s_a_vec, get_model().decode(), seeder, prevs,
                    cfg.expert, env, n, decision_rngs)
                if cfg.train:
                    for i in range(n):
                        train_state.actor_buf.add(
                            (thetas[i] - theta_shift, s_a_vec - state_shift,
                             pis[i].copy(), False))

        theta_dots = np.empty((n, 5))
        for i in range(n):
            nbr_thetas = [thetas[j] for j in topology.neighbors(i)]
            theta_dots[i] = negotiate_update(thetas[i], pis[i], nbr_thetas,
                                             cfg.c_neg)
        thetas_pre = thetas
        thetas = clamp_theta(thetas + dt * theta_dots, cfg.expert.limits,
                             center=env.p_p)

        # each defender tracks the slot of its OWN updated estimate
        own_refs = pattern_batch(thetas, n)   # (n, n, 2)
        controls = [formation_control(defenders[i].p, defenders[i].v,
                                      own_refs[i, perm[i]], theta_dots[i, :2],
                                      cfg.k_p, env.c_d)
                    for i in range(n)]
        _, near = nearest_defender(attacker.p, defenders)
        u_a = attacker_control(attacker, near.p, cfg.attacker, env.p_p)

        near_vec = near.as_vector()
        pre_defender_vecs = [d.as_vector() for d in defenders]
        defenders = [step_agent(defenders[i], controls[i], env.c_d,
                                env.u_d_max, dt) for i in range(n)]
        attacker = step_agent(attacker, u_a, env.c_a, env.u_a_max, dt)

        losses = None
        if cfg.train:
            train_state.model_buf.add((s_a_vec - state_shift,
                                       near_vec - state_shift,
                                       attacker.as_vector() - state_shift))
            if (k + 1) % cfg.learning.train_every == 0:
                losses = _train_round(cfg, train_state)

        if keep_rows:
            rows.append(_row(t, s_a_vec, pre_defender_vecs, thetas_pre,
                             theta_dots, losses, STATUS_RUNNING))
        k += 1

    return EpisodeRecord(status=status, duration=t, rows=rows, seed=cfg.seed,
                         mode=cfg.mode, n_defenders=n)


def _row(t, attacker_vec, defender_vecs, thetas, theta_dots, losses, status):
    row = {
        "kind": "step",
        "t": t,
        "attacker": np.asarray(attacker_vec).tolist(),
        "defenders": [np.asarray(v).tolist() for v in defender_vecs],
        "theta": np.asarray(thetas).tolist(),
        "theta_dot": None if theta_dots is None else np.asarray(theta_dots).tolist(),
        "consensus_error": consensus_error(np.asarray(thetas)),
        "status": status,
    }
    if losses:
        row["losses"] = losses
    return row


def write_record(path, record: EpisodeRecord, env: EnvConfig) -> None:
    """One JSON object per line: header, step rows, summary."""
    header = {
        "kind": "header",
        "schema_version": RECORD_SCHEMA_VERSION,
        "seed": _seed_json(record.seed),
        "mode": record.mode,
        "n_defenders": record.n_defenders,
        "dt": env.dt,
    }
    summary = {"kind": "summary", "status": record.status.kind,
               "duration": record.duration}
    with open(path, "w") as f:
        for obj in [header, *record.rows, summary]:
            f.write(json.dumps(obj, sort_keys=True))
            f.write("\n")


def read_record(path) -> tuple[dict, list, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty record file {path}")
    header = json.loads(lines[0])
    if header.get("schema_version") != RECORD_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported record schema {header.get('schema_version')!r}")
    rows = [json.loads(l) for l in lines[1:-1]]
    summary = json.loads(lines[-1])
    if summary.get("kind") != "summary":
        raise ValueError("record file has no summary line")
    return header, rows, summary


def _seed_json(seed):
    return list(seed) if isinstance(seed, tuple) else seed


@dataclass
class McSummary:
    episodes: int
    captures: int
    breaches: int
    timeouts: int
    success_rate: float
    mean_capture_time: float | None     # successes only
    mean_time_with_failures: float      # failures counted at t_max
    per_episode: list                   # (index, status kind, duration)

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "captures": self.captures,
            "breaches": self.breaches,
            "timeouts": self.timeouts,
            "success_rate": self.success_rate,
            "mean_capture_time": self.mean_capture_time,
            "mean_time_with_failures": self.mean_time_with_failures,
        }


def _episode_outcome(cfg: EpisodeConfig, bundle: WeightsBundle | None,
                     index: int) -> tuple[int, str, float]:
    ep_cfg = replace(cfg, seed=(cfg.seed, index), train=False)
    rec = run_episode(ep_cfg, bundle=bundle, keep_rows=False)
    return index, rec.status.kind, rec.duration


def monte_carlo(cfg: EpisodeConfig, episodes: int,
                bundle: WeightsBundle | None = None,
                workers: int = 1) -> McSummary:
    """Independent episodes with per-index derived seeds; the aggregate does
    not depend on worker count or scheduling."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_episode_outcome, [cfg] * episodes,
                                    [bundle] * episodes, range(episodes),
                                    chunksize=max(1, episodes // (4 * workers))))
    else:
        results = [_episode_outcome(cfg, bundle, i) for i in range(episodes)]
    results.sort(key=lambda r: r[0])

    kinds = [kind for _, kind, _ in results]
    captures = kinds.count(STATUS_CAPTURED)
    breaches = kinds.count(STATUS_BREACHED)
    timeouts = kinds.count(STATUS_TIMEOUT)
    cap_times = [dur for _, kind, dur in results if kind == STATUS_CAPTURED]
    all_times = [dur if kind == STATUS_CAPTURED else cfg.env.t_max
                 for _, kind, dur in results]
    return McSummary(
        episodes=episodes,
        captures=captures,
        breaches=breaches,
        timeouts=timeouts,
        success_rate=captures / episodes,
        mean_capture_time=(sum(cap_times) / len(cap_times)) if cap_times else None,
        mean_time_with_failures=sum(all_times) / episodes,
        per_episode=results,
    )


@dataclass
class SessionResult:
    bundle: WeightsBundle
    model_losses: np.ndarray
    actor_losses: np.ndarray
    baseline_losses: np.ndarray
    episodes: list    # (index, status kind, duration)


def new_train_state(cfg: EpisodeConfig) -> TrainState:
    """Fresh weights and buffers, all seeded from the session master seed."""
    master = np.random.SeedSequence(cfg.seed)
    actor_ss, baseline_ss, model_buf_ss, actor_buf_ss = master.spawn(4)
    std = Standardizer(vel_scale=1.0 / cfg.env.v_a_max)
    return TrainState(
        model=init_model_weights(),
        actor=init_actor_weights(np.random.default_rng(actor_ss)),
        baseline=init_baseline_weights(np.random.default_rng(baseline_ss)),
        std=std,
        model_buf=ReplayBuffer(cfg.learning.buffer_capacity,
                               np.random.default_rng(model_buf_ss)),
        actor_buf=ReplayBuffer(cfg.learning.buffer_capacity,
                               np.random.default_rng(actor_buf_ss)),
    )


def train_session(cfg: EpisodeConfig, n_episodes: int,
                  augment_per_episode: int = 0,
                  progress=None) -> SessionResult:
    """Imitation training: expert-driven episodes with actor-seeded swarms,
    continual updates on the fixed cadence, optional virtual decision states
    after every episode."""
    ts = new_train_state(cfg)
    augment_rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed).spawn(5)[4])
    episodes = []
    for i in range(n_episodes):
        ep_cfg = replace(cfg, seed=(cfg.seed, i), mode="actor_seeded_expert",
                         train=True)
        rec = run_episode(ep_cfg, train_state=ts, keep_rows=False)
        episodes.append((i, rec.status.kind, rec.duration))
        if augment_per_episode > 0:
            policy = make_actor_policy(lambda: ts.actor, ts.std,
                                       cfg.expert.bounds, cfg.env)
            for sample in augment(ts.model.decode(), policy, cfg.expert,
                                  cfg.env, cfg.n_defenders,
                                  augment_per_episode, augment_rng):
                ts.actor_buf.add(sample)
        if progress is not None:
            progress(i, rec)

    bundle = WeightsBundle(
        model=ts.model, actor=ts.actor, baseline=ts.baseline, std=ts.std,
        bounds=cfg.expert.bounds,
        seed_info={"master_seed": _seed_json(cfg.seed),
                   "episodes": n_episodes,
                   "augment_per_episode": augment_per_episode,
                   "n_defenders": cfg.n_defenders},
    )
    return SessionResult(bundle=bundle,
                         model_losses=np.array(ts.model_losses),
                         actor_losses=np.array(ts.actor_losses),
                         baseline_losses=np.array(ts.baseline_losses),
                         episodes=episodes)
