"""Learned pieces: attacker-strategy estimator, imitation actor, baseline.

The strategy estimator has exactly four trainable scalars (approach gain,
avoidance gain, safety radius, avoidance radius), positively reparameterized
and pushed through the same control-plus-integration composition the simulator
uses, so a correct estimate predicts transitions exactly. The actor is a small
dense network mapping (shape estimate, attacker state) to a bounded shape
rate. An unstructured regressor of the same transition serves as a baseline.
Gradients are written out by hand; updates are plain gradient steps on a
summed, diagonally weighted squared error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .expert import ActionBounds, ExpertConfig, expert_decide
from .world import G_CLAMP_MAX, AttackerParams, EnvConfig, norm2

_R_FLOOR = 1.0e-6

WEIGHTS_FORMAT_VERSION = 1


@dataclass
class LearningConfig:
    """Rates, loss weights and cadence for all three learned components.

    The transition losses weight velocity rows heavily: the parameters only
    enter the dynamics through the acceleration, so over one step of length
    dt they move the velocity O(dt) and the position not at all. Velocity
    weight 100 with rate 0.01 recovers the attacker parameters in a couple
    hundred updates; 4x that diverges. The baseline rate is set likewise
    just below its own stability edge.
    """

    alpha_model: float = 0.01
    alpha_actor: float = 0.001
    alpha_baseline: float = 1.0e-4
    batch_size: int = 16
    buffer_capacity: int = 20000
    train_every: int = 10          # physics steps between update rounds
    w_model: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 100.0, 100.0]))
    w_actor: np.ndarray = field(default_factory=lambda: np.ones(5))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    if np.any(np.asarray(y) <= 0.0):
        raise ValueError("softplus inverse needs positive input")
    return np.log(np.expm1(y))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# structured strategy estimator

@dataclass
class ModelWeights:
    """Raw parameters of the strategy estimate; decode() gives the physical
    gains. r_avo is carried as a positive gap above r_safe so the decoded
    radii can never cross."""

    raw: np.ndarray   # (4,) = [w_k_ap, w_k_ad, w_r_safe, w_gap]

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)

    def decode(self) -> AttackerParams:
        k_ap, k_ad, r_safe, gap = softplus(self.raw)
        return AttackerParams(k_ap=float(k_ap), k_ad=float(k_ad),
                              r_safe=float(r_safe), r_avo=float(r_safe + gap))

    @classmethod
    def from_params(cls, k_ap: float, k_ad: float, r_safe: float,
                    r_avo: float) -> "ModelWeights":
        if r_avo <= r_safe:
            raise ValueError("r_avo must exceed r_safe")
        raw = softplus_inv(np.array([k_ap, k_ad, r_safe, r_avo - r_safe]))
        return cls(raw=raw)


def init_model_weights() -> ModelWeights:
    """Deliberately wrong starting estimate of the attacker parameters."""
    return ModelWeights.from_params(5.0, 5.0, 0.5, 5.0)


def _strategy_forward(params: AttackerParams, s_a: np.ndarray, s_d: np.ndarray,
                      env: EnvConfig, dt: float):
    """Batched attacker transition with the intermediates needed for the
    backward pass. Positions are in the frame of the protected point."""
    p, v = s_a[:, :2], s_a[:, 2:]
    q = s_d[:, :2]
    n_ap = np.maximum(norm2(p)[:, None], 1.0e-12)
    e_ap = -p / n_ap
    d = p - q
    r = np.maximum(norm2(d), _R_FLOOR)
    e_ad = d / r[:, None]

    rho = r - params.r_safe
    span = params.r_avo - params.r_safe
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.pi * np.clip(rho, 0.0, span) / span
        g_open = (1.0 + np.cos(a)) / rho
    beyond = r > params.r_avo
    clamped = (rho <= 0.0) | (g_open >= G_CLAMP_MAX)
    g = np.where(beyond, 0.0, np.where(clamped, G_CLAMP_MAX,
                                       np.minimum(g_open, G_CLAMP_MAX)))

    # multiplication order matches the simulator so a correct estimate is
    # reproduced bit for bit
    u = params.k_ap * e_ap + params.k_ad * (e_ad * g[:, None])
    norm_u = np.maximum(norm2(u), 1.0e-12)
    sat = norm_u > env.u_a_max
    u_s = u * np.where(sat, env.u_a_max / norm_u, 1.0)[:, None]

    p_next = p + dt * v
    v_next = v + dt * (u_s - env.c_a * v)
    pred = np.concatenate([p_next, v_next], axis=-1)
    cache = dict(e_ap=e_ap, e_ad=e_ad, rho=rho, span=span, a=a, g=g,
                 open_region=~beyond & ~clamped, u=u, norm_u=norm_u, sat=sat)
    return pred, cache


def model_forward(mw: ModelWeights, s_a: np.ndarray, s_d: np.ndarray,
                  env: EnvConfig, dt: float) -> np.ndarray:
    """Predicted next attacker state for one transition (protected point at
    the origin)."""
    s_a = np.asarray(s_a, dtype=float)[None]
    s_d = np.asarray(s_d, dtype=float)[None]
    pred, _ = _strategy_forward(mw.decode(), s_a, s_d, env, dt)
    return pred[0]


def model_loss(mw: ModelWeights, batch: tuple, w_diag: np.ndarray,
               env: EnvConfig, dt: float) -> float:
    s_a, s_d, s_next = batch
    pred, _ = _strategy_forward(mw.decode(), s_a, s_d, env, dt)
    delta = s_next - pred
    return float(np.sum(w_diag * delta ** 2))


def model_grad(mw: ModelWeights, batch: tuple, w_diag: np.ndarray,
               env: EnvConfig, dt: float) -> tuple[np.ndarray, float]:
    """Analytic gradient of the summed weighted squared error w.r.t. raw."""
    s_a, s_d, s_next = batch
    params = mw.decode()
    pred, c = _strategy_forward(params, s_a, s_d, env, dt)
    delta = s_next - pred
    loss = float(np.sum(w_diag * delta ** 2))

    # only the velocity rows depend on the parameters
    dl_dv = -2.0 * w_diag[2:] * delta[:, 2:]
    dl_dus = dt * dl_dv
    u, norm_u, sat = c["u"], c["norm_u"], c["sat"]
    e_u = u / norm_u[:, None]
    proj = np.sum(e_u * dl_dus, axis=-1, keepdims=True)
    # non-finite targets flow through here and are caught by the caller
    with np.errstate(invalid="ignore", over="ignore"):
        dl_du = np.where(sat[:, None],
                         (env.u_a_max / norm_u)[:, None] * (dl_dus - e_u * proj),
                         dl_dus)

    dl_dkap = float(np.sum(dl_du * c["e_ap"]))
    along = np.sum(dl_du * c["e_ad"], axis=-1)
    dl_dkad = float(np.sum(along * c["g"]))
    dl_dg = params.k_ad * along

    rho, span, a = c["rho"], c["span"], c["a"]
    open_r = c["open_region"]
    with np.errstate(divide="ignore", invalid="ignore"):
        dg_dr1 = (1.0 + np.cos(a)) / rho ** 2 + (np.sin(a) / rho) * np.pi * (span - rho) / span ** 2
        dg_dr2 = np.pi * np.sin(a) / span ** 2
    dl_dr1 = float(np.sum(np.where(open_r, dl_dg * dg_dr1, 0.0)))
    dl_dr2 = float(np.sum(np.where(open_r, dl_dg * dg_dr2, 0.0)))

    jac = sigmoid(mw.raw)
    grad = np.array([dl_dkap * jac[0],
                     dl_dkad * jac[1],
                     (dl_dr1 + dl_dr2) * jac[2],
                     dl_dr2 * jac[3]])
    return grad, loss


def model_update(mw: ModelWeights, batch: tuple, alpha: float,
                 w_diag: np.ndarray, env: EnvConfig, dt: float
                 ) -> tuple[ModelWeights, float, bool]:
    """One plain gradient step. Non-finite gradients skip the update."""
    grad, loss = model_grad(mw, batch, w_diag, env, dt)
    if not (np.all(np.isfinite(grad)) and np.isfinite(loss)):
        return mw, loss, False
    return ModelWeights(mw.raw - alpha * grad), loss, True


# ---------------------------------------------------------------------------
# dense networks (actor and baseline share the machinery)

@dataclass
class MlpWeights:
    """Fully connected layers, tanh hidden activations, linear output."""

    weights: list    # [(out, in) arrays]
    biases: list     # [(out,) arrays]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]


def mlp_init(sizes: tuple, rng: np.random.Generator) -> MlpWeights:
    """Uniform +-1/sqrt(fan_in) initialization."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpWeights(weights=weights, biases=biases)


def mlp_forward(net: MlpWeights, x: np.ndarray):
    """x is (B, in). Returns (y, activations) with activations[0] = x."""
    acts = [np.asarray(x, dtype=float)]
    h = acts[0]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = z if l == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(net: MlpWeights, acts: list, dl_dy: np.ndarray):
    """Gradients of a scalar loss given dl/dy at the linear output."""
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    delta = np.asarray(dl_dy, dtype=float)
    for l in range(len(net.weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * (1.0 - acts[l] ** 2)
    return grads_w, grads_b


def mlp_step(net: MlpWeights, grads_w: list, grads_b: list, alpha: float) -> MlpWeights:
    return MlpWeights(
        weights=[w - alpha * g for w, g in zip(net.weights, grads_w)],
        biases=[b - alpha * g for b, g in zip(net.biases, grads_b)],
    )


@dataclass
class Standardizer:
    """Fixed affine input scaling, recorded alongside the weights. Lengths
    shrink by the half field diagonal, velocities by the attacker speed
    limit, angles by pi; keeps every tanh in its active range."""

    pos_scale: float = 1.0 / 15.0    # half field diagonal
    vel_scale: float = 1.0 / 2.5     # attacker speed limit
    ang_scale: float = 1.0 / np.pi

    def actor_input(self, thetas: np.ndarray, s_a: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        s_a = np.atleast_2d(s_a)
        if s_a.shape[0] == 1 and thetas.shape[0] > 1:
            s_a = np.broadcast_to(s_a, (thetas.shape[0], 4))
        theta_scale = np.array([self.pos_scale, self.pos_scale,
                                self.ang_scale, self.pos_scale, self.ang_scale])
        state_scale = np.array([self.pos_scale, self.pos_scale,
                                self.vel_scale, self.vel_scale])
        return np.concatenate([thetas * theta_scale, s_a * state_scale],
                              axis=-1)

    def transition_input(self, s_a: np.ndarray, s_d: np.ndarray) -> np.ndarray:
        s_a = np.atleast_2d(s_a)
        s_d = np.atleast_2d(s_d)
        scale = np.array([self.pos_scale, self.pos_scale,
                          self.vel_scale, self.vel_scale] * 2)
        return np.concatenate([s_a, s_d], axis=-1) * scale


ACTOR_SIZES = (9, 18, 18, 5)
BASELINE_SIZES = (8, 32, 32, 4)


@dataclass
class ActorWeights:
    net: MlpWeights


@dataclass
class BaselineWeights:
    net: MlpWeights


def init_actor_weights(rng: np.random.Generator) -> ActorWeights:
    return ActorWeights(net=mlp_init(ACTOR_SIZES, rng))


def init_baseline_weights(rng: np.random.Generator) -> BaselineWeights:
    return BaselineWeights(net=mlp_init(BASELINE_SIZES, rng))


def actor_forward_raw(aw: ActorWeights, std: Standardizer, thetas: np.ndarray,
                      s_a: np.ndarray) -> np.ndarray:
    """Unclamped shape rates, (B, 5)."""
    y, _ = mlp_forward(aw.net, std.actor_input(thetas, s_a))
    return y


def actor_forward(aw: ActorWeights, std: Standardizer, bounds: ActionBounds,
                  theta: np.ndarray, s_a: np.ndarray) -> np.ndarray:
    """Bounded shape-rate command for one robot."""
    y = actor_forward_raw(aw, std, theta, s_a)
    return np.clip(y[0], bounds.lo, bounds.hi)


def actor_policy(aw: ActorWeights, std: Standardizer,
                 bounds: ActionBounds) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    def policy(theta, s_a):
        return actor_forward(aw, std, bounds, theta, s_a)
    return policy


def actor_loss(aw: ActorWeights, std: Standardizer, batch: tuple,
               w_diag: np.ndarray) -> float:
    thetas, s_a, labels = batch
    y = actor_forward_raw(aw, std, thetas, s_a)
    # imitation error measured before the output clamp
    return float(np.sum(w_diag * (labels - y) ** 2))


def actor_update(aw: ActorWeights, std: Standardizer, batch: tuple,
                 alpha: float, w_diag: np.ndarray
                 ) -> tuple[ActorWeights, float, bool]:
    thetas, s_a, labels = batch
    x = std.actor_input(thetas, s_a)
    y, acts = mlp_forward(aw.net, x)
    delta = labels - y
    loss = float(np.sum(w_diag * delta ** 2))
    gw, gb = mlp_backward(aw.net, acts, -2.0 * w_diag * delta)
    finite = np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in gw + gb)
    if not finite:
        return aw, loss, False
    return ActorWeights(net=mlp_step(aw.net, gw, gb, alpha)), loss, True


def baseline_forward(bw: BaselineWeights, std: Standardizer, s_a: np.ndarray,
                     s_d: np.ndarray) -> np.ndarray:
    """Unstructured next-state prediction: current state plus a learned
    residual, so zero weights predict zero change."""
    s_a = np.atleast_2d(np.asarray(s_a, dtype=float))
    y, _ = mlp_forward(bw.net, std.transition_input(s_a, s_d))
    return s_a + y


def baseline_loss(bw: BaselineWeights, std: Standardizer, batch: tuple,
                  w_diag: np.ndarray) -> float:
    s_a, s_d, s_next = batch
    pred = baseline_forward(bw, std, s_a, s_d)
    return float(np.sum(w_diag * (s_next - pred) ** 2))


def baseline_update(bw: BaselineWeights, std: Standardizer, batch: tuple,
                    alpha: float, w_diag: np.ndarray
                    ) -> tuple[BaselineWeights, float, bool]:
    s_a, s_d, s_next = batch
    x = std.transition_input(s_a, s_d)
    y, acts = mlp_forward(bw.net, x)
    delta = s_next - (s_a + y)
    loss = float(np.sum(w_diag * delta ** 2))
    gw, gb = mlp_backward(bw.net, acts, -2.0 * w_diag * delta)
    finite = np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in gw + gb)
    if not finite:
        return bw, loss, False
    return BaselineWeights(net=mlp_step(bw.net, gw, gb, alpha)), loss, True


# ---------------------------------------------------------------------------
# replay and augmentation

class ReplayBuffer:
    """Fixed-capacity ring buffer with seeded uniform mini-batch sampling
    (without replacement)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self._items: list = []
        self._pos = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, item):
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._pos] = item
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, k: int) -> list:
        if k > len(self._items):
            raise ValueError("not enough samples in the buffer")
        idx = self.rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]


def stack_transitions(items: list) -> tuple:
    s_a = np.stack([it[0] for it in items])
    s_d = np.stack([it[1] for it in items])
    s_next = np.stack([it[2] for it in items])
    return s_a, s_d, s_next


def stack_decisions(items: list) -> tuple:
    thetas = np.stack([it[0] for it in items])
    s_a = np.stack([it[1] for it in items])
    labels = np.stack([it[2] for it in items])
    return thetas, s_a, labels


@dataclass
class AugmentRanges:
    """Sampling ranges for virtual decision states."""

    pc_fallback: float = 6.0  # center radius when the clamp has no pc leash
    state_margin: float = 2.0  # keep virtual attackers this far inside the field


def augment(model: AttackerParams, actor, expert_cfg: ExpertConfig,
            env: EnvConfig, n: int, count: int, rng: np.random.Generator,
            ranges: AugmentRanges | None = None) -> list:
    """Label `count` synthetic decision states with the expert.

    Shapes are drawn uniformly inside the clamp set, attacker states
    uniformly over the field at admissible speeds. Stored samples are in the
    protected-point frame (positions relative to p_p) and flagged virtual.
    """
    ranges = ranges or AugmentRanges()
    limits = expert_cfg.limits
    half = np.array(env.field_size) / 2.0 - ranges.state_margin
    pc_rad = limits.pc_max if limits.pc_max is not None else ranges.pc_fallback
    theta_shift = np.array([env.p_p[0], env.p_p[1], 0.0, 0.0, 0.0])
    state_shift = np.array([env.p_p[0], env.p_p[1], 0.0, 0.0])
    out = []
    for _ in range(count):
        pc_ang = rng.uniform(-np.pi, np.pi)
        pc_r = pc_rad * np.sqrt(rng.uniform())
        theta = np.array([
            pc_r * np.cos(pc_ang) + env.p_p[0],
            pc_r * np.sin(pc_ang) + env.p_p[1],
            rng.uniform(-np.pi, np.pi),
            rng.uniform(limits.zeta_min, limits.zeta_max),
            rng.uniform(0.0, limits.beta_max),
        ])
        ang = rng.uniform(-np.pi, np.pi)
        speed = env.v_a_max * np.sqrt(rng.uniform())
        s_a = np.array([
            rng.uniform(-half[0], half[0]) + env.p_p[0],
            rng.uniform(-half[1], half[1]) + env.p_p[1],
            speed * np.cos(ang), speed * np.sin(ang),
        ])
        rate, _, _ = expert_decide(theta, s_a, model, actor, None, expert_cfg,
                                   env, n, rng)
        out.append((theta - theta_shift, s_a - state_shift, rate, True))
    return out


# ---------------------------------------------------------------------------
# persistence

@dataclass
class WeightsBundle:
    model: ModelWeights
    actor: ActorWeights
    baseline: BaselineWeights | None
    std: Standardizer
    bounds: ActionBounds
    seed_info: dict = field(default_factory=dict)


def _net_to_json(net: MlpWeights) -> dict:
    return {"sizes": net.sizes,
            "layers": [{"w": w.tolist(), "b": b.tolist()}
                       for w, b in zip(net.weights, net.biases)]}


def _net_from_json(obj: dict) -> MlpWeights:
    return MlpWeights(weights=[np.array(l["w"], dtype=float) for l in obj["layers"]],
                      biases=[np.array(l["b"], dtype=float) for l in obj["layers"]])


def save_weights(path, bundle: WeightsBundle) -> None:
    decoded = bundle.model.decode()
    doc = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "model": {
            "raw": bundle.model.raw.tolist(),
            "decoded": {"k_ap": decoded.k_ap, "k_ad": decoded.k_ad,
                        "r_safe": decoded.r_safe, "r_avo": decoded.r_avo},
        },
        "actor": _net_to_json(bundle.actor.net),
        "baseline": _net_to_json(bundle.baseline.net) if bundle.baseline else None,
        "standardization": {"pos_scale": bundle.std.pos_scale,
                            "vel_scale": bundle.std.vel_scale,
                            "ang_scale": bundle.std.ang_scale},
        "action_bounds": {"lo": bundle.bounds.lo.tolist(),
                          "hi": bundle.bounds.hi.tolist()},
        "seed": bundle.seed_info,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_weights(path) -> WeightsBundle:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"corrupt weights file {path}: {err}") from err
    version = doc.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version!r}")
    std = Standardizer(**doc["standardization"])
    bounds = ActionBounds(lo=np.array(doc["action_bounds"]["lo"]),
                          hi=np.array(doc["action_bounds"]["hi"]))
    baseline = (BaselineWeights(net=_net_from_json(doc["baseline"]))
                if doc.get("baseline") else None)
    return WeightsBundle(
        model=ModelWeights(raw=np.array(doc["model"]["raw"], dtype=float)),
        actor=ActorWeights(net=_net_from_json(doc["actor"])),
        baseline=baseline,
        std=std,
        bounds=bounds,
        seed_info=doc.get("seed", {}),
    )
