"""YAML configuration for episodes and training runs.

One file describes one scenario: physics, attacker strategy, expert
optimizer, learning rates, and episode plumbing, nested under short section
names. Every key is registered in FIELDS with its unit and meaning, so the
command line can enumerate them and loading can reject typos by name and
line. Values omitted from the file keep the defaults of the corresponding
dataclasses, which are the reference-scenario constants.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .expert import ActionBounds, CostWeights, ExpertConfig, PsoConfig
from .formation import ShapeLimits
from .learning import LearningConfig
from .sim import EpisodeConfig
from .world import AttackerParams, EnvConfig


class ConfigError(Exception):
    """Malformed or unknown configuration input."""


def _scalar(kind):
    def conv(v):
        if kind is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if kind is int and isinstance(v, int) and not isinstance(v, bool):
            return int(v)
        if kind is bool and isinstance(v, bool):
            return v
        if kind is str and isinstance(v, str):
            return v
        raise ValueError(f"expected {kind.__name__}, got {v!r}")
    return conv


def _floats(count):
    def conv(v):
        if not isinstance(v, (list, tuple)) or len(v) != count:
            raise ValueError(f"expected a list of {count} numbers, got {v!r}")
        return np.array([float(x) for x in v])
    return conv


_F, _I, _B, _S = _scalar(float), _scalar(int), _scalar(bool), _scalar(str)

# path -> (converter, unit, description); the single registry behind
# loading, dumping, overrides, and --help
FIELDS = {
    "n_defenders": (_I, "count", "number of cooperating defenders"),
    "mode": (_S, "-", "policy source: expert | actor | actor_seeded_expert"),
    "seed": (_I, "-", "master seed; every other stream derives from it"),
    "k_p": (_F, "1/s^2", "slot tracking stiffness"),
    "c_neg": (_F, "1/s", "negotiation (consensus) gain"),
    "greedy_slots": (_B, "-", "assign slots by greedy nearest distance"),
    "env.u_d_max": (_F, "m/s^2", "defender input saturation"),
    "env.u_a_max": (_F, "m/s^2", "attacker input saturation"),
    "env.c_d": (_F, "1/s", "defender drag coefficient"),
    "env.c_a": (_F, "1/s", "attacker drag coefficient"),
    "env.r_cap": (_F, "m", "capture radius around each defender"),
    "env.r_com": (_F, "m", "communication radius between defenders"),
    "env.rho_p": (_F, "m", "protected-area radius"),
    "env.p_p": (_floats(2), "m", "protected-area center"),
    "env.field_size": (_floats(2), "m", "full field extents, centered on p_p"),
    "env.dt": (_F, "s", "physics step"),
    "env.t_max": (_F, "s", "episode cutoff"),
    "attacker.k_ap": (_F, "m/s^2", "attraction gain toward the protected point"),
    "attacker.k_ad": (_F, "m/s^2", "repulsion gain from the nearest defender"),
    "attacker.r_safe": (_F, "m", "repulsion inner radius"),
    "attacker.r_avo": (_F, "m", "repulsion outer radius"),
    "attacker.sign_as_printed": (_B, "-", "keep the published approach sign (flees)"),
    "expert.n_p": (_I, "steps", "prediction horizon of the rolling optimization"),
    "expert.n_c": (_I, "steps", "free control steps; the tail repeats the last"),
    "expert.decision_every": (_I, "steps", "physics steps between decisions"),
    "expert.bounds.lo": (_floats(5), "mixed", "shape-rate lower bounds"),
    "expert.bounds.hi": (_floats(5), "mixed", "shape-rate upper bounds"),
    "expert.weights.k_cap": (_F, "-", "capture-angle reward weight"),
    "expert.weights.k_pro": (_F, "-", "protected-angle penalty weight"),
    "expert.weights.k_dis": (_F, "-", "mean-distance penalty weight"),
    "expert.weights.k_ali": (_F, "-", "alignment penalty weight"),
    "expert.weights.k_ene": (_F, "-", "control-energy penalty weight"),
    "expert.pso.n_particles": (_I, "count", "swarm size"),
    "expert.pso.n_iters": (_I, "count", "swarm iterations per decision"),
    "expert.pso.omega": (_F, "-", "velocity inertia"),
    "expert.pso.c1": (_F, "-", "pull toward the global best"),
    "expert.pso.c2": (_F, "-", "pull toward each particle's own best"),
    "expert.pso.sigma": (_F, "-", "seeding spread, fraction of bound half-range"),
    "expert.limits.zeta_min": (_F, "m", "smallest admissible slot spacing"),
    "expert.limits.zeta_max": (_F, "m", "largest admissible slot spacing"),
    "expert.limits.beta_max": (_F, "rad", "largest admissible opening angle"),
    "expert.limits.pc_max": (_F, "m", "formation-center leash radius about p_p"),
    "learning.alpha_model": (_F, "-", "strategy-estimator learning rate"),
    "learning.alpha_actor": (_F, "-", "actor learning rate"),
    "learning.alpha_baseline": (_F, "-", "unstructured baseline learning rate"),
    "learning.batch_size": (_I, "count", "mini-batch size"),
    "learning.buffer_capacity": (_I, "count", "replay ring capacity"),
    "learning.train_every": (_I, "steps", "physics steps between update rounds"),
    "learning.w_model": (_floats(4), "-", "transition-loss diagonal weights"),
    "learning.w_actor": (_floats(5), "-", "imitation-loss diagonal weights"),
}


def _flatten(node, prefix=""):
    """yaml composer node -> {dotted path: (python value, 1-based line)}."""
    out = {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(
            f"expected a mapping at {prefix or 'the top level'} "
            f"(line {node.start_mark.line + 1})")
    for key_node, val_node in node.value:
        key = str(key_node.value)
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(val_node, yaml.MappingNode):
            out.update(_flatten(val_node, path))
        else:
            out[path] = (yaml.safe_load(yaml.serialize(val_node)),
                         key_node.start_mark.line + 1)
    return out


def parse_config_text(text: str) -> dict:
    """Dotted path -> converted value, with name/type/line checking."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"not valid YAML: {err}") from err
    if root is None:
        return {}
    flat = _flatten(root)
    values = {}
    for path, (raw, line) in flat.items():
        if path not in FIELDS:
            if any(known.startswith(path + ".") for known in FIELDS):
                raise ConfigError(
                    f"expected a mapping under {path!r} (line {line})")
            raise ConfigError(f"unknown config key {path!r} (line {line})")
        conv = FIELDS[path][0]
        try:
            values[path] = conv(raw)
        except ValueError as err:
            raise ConfigError(f"bad value for {path!r} (line {line}): {err}") from err
    return values


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply `path=value` strings (same names as the file) on top."""
    out = dict(values)
    for text in overrides:
        path, sep, raw = text.partition("=")
        path = path.strip()
        if not sep or not path:
            raise ConfigError(f"override {text!r} is not of the form key=value")
        if path not in FIELDS:
            raise ConfigError(f"unknown config key {path!r} in override")
        try:
            out[path] = FIELDS[path][0](yaml.safe_load(raw))
        except (ValueError, yaml.YAMLError) as err:
            raise ConfigError(f"bad value for {path!r} in override: {err}") from err
    return out


def _section(values: dict, prefix: str) -> dict:
    skip = len(prefix) + 1
    return {p[skip:]: v for p, v in values.items()
            if p.startswith(prefix + ".") and "." not in p[skip:]}


def build_episode_config(values: dict) -> EpisodeConfig:
    """Assemble the nested dataclasses; missing keys keep their defaults."""
    kw = {}
    env_kw = _section(values, "env")
    if "field_size" in env_kw:
        env_kw["field_size"] = tuple(env_kw["field_size"])
    expert_kw = _section(values, "expert")
    for name, cls in (("bounds", ActionBounds), ("weights", CostWeights),
                      ("pso", PsoConfig), ("limits", ShapeLimits)):
        part = _section(values, f"expert.{name}")
        if part:
            expert_kw[name] = cls(**part)
    try:
        kw["env"] = EnvConfig(**env_kw)
        kw["attacker"] = AttackerParams(**_section(values, "attacker"))
        kw["expert"] = ExpertConfig(**expert_kw)
        kw["learning"] = LearningConfig(**_section(values, "learning"))
        for name in ("n_defenders", "mode", "seed", "k_p", "c_neg", "greedy_slots"):
            if name in values:
                kw[name] = values[name]
        return EpisodeConfig(**kw)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def load_config(path, overrides: list[str] | None = None) -> EpisodeConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text())
    if overrides:
        values = apply_overrides(values, overrides)
    return build_episode_config(values)


def _lookup(cfg: EpisodeConfig, path: str):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def dump_config(cfg: EpisodeConfig) -> dict:
    """Nested plain-python dict of every registered key (manifest form)."""
    out: dict = {}
    for path in FIELDS:
        value = _lookup(cfg, path)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, tuple):
            value = list(value)
        node = out
        *parents, leaf = path.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def config_help() -> str:
    """One line per key: path, unit, default, description."""
    default = EpisodeConfig()
    lines = []
    for path, (_, unit, doc) in FIELDS.items():
        value = _lookup(default, path)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        lines.append(f"  {path:28s} [{unit}] default {value}: {doc}")
    return "\n".join(lines)
