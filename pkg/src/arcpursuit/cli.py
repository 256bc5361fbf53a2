"""Command-line front end.

Subcommands: train (imitation session -> weights + loss curves), eval
(Monte Carlo summary), replay (record -> plot-ready CSV), augment (virtual
labeled decision states), selftest (fast invariant battery). Exit codes:
0 success, 1 usage, 2 configuration, 3 runtime failure. Artifacts carry no
timestamps, so identical inputs give byte-identical outputs; every run
writes a manifest naming its inputs, seed, and products.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, apply_overrides, build_episode_config,
                     config_help, dump_config, load_config)
from .expert import PsoConfig, capture_angle, protected_angle, pso_solve
from .formation import pattern
from .learning import (LearningConfig, augment, init_actor_weights,
                       init_baseline_weights, init_model_weights, load_weights,
                       mlp_backward, mlp_forward, model_grad, model_loss,
                       save_weights)
from .negotiation import consensus_error, negotiate_update
from .sim import (EpisodeConfig, make_actor_policy, monte_carlo, read_record,
                  run_episode, train_session, write_record)
from .world import EnvConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

OUT_DIR_ENV = "ARCPURSUIT_OUT"
ARTIFACT_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_DIR_ENV) or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_cfg(args) -> EpisodeConfig:
    overrides = list(args.set or [])
    if args.config is not None:
        cfg = load_config(args.config, overrides)
    else:
        cfg = build_episode_config(apply_overrides({}, overrides))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "n_defenders", None) is not None:
        cfg = replace(cfg, n_defenders=args.n_defenders)
    return cfg


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _write_manifest(path: Path, command: str, cfg: EpisodeConfig,
                    extra: dict) -> None:
    doc = {
        "artifact_version": ARTIFACT_VERSION,
        "package_version": __version__,
        "command": command,
        "master_seed": cfg.seed,
        "config": dump_config(cfg),
        **extra,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    tag = f"seed{cfg.seed}"

    def progress(i, rec):
        if not args.quiet:
            print(f"episode {i:4d}: {rec.status.kind:9s} t={rec.duration:7.2f} s",
                  flush=True)

    res = train_session(cfg, args.episodes,
                        augment_per_episode=args.augment, progress=progress)

    weights_path = out / f"weights_{tag}_n{cfg.n_defenders}.json"
    save_weights(weights_path, res.bundle)

    losses_path = out / f"losses_{tag}.csv"
    loss_rows = [("model", i, v) for i, v in enumerate(res.model_losses)]
    loss_rows += [("baseline", i, v) for i, v in enumerate(res.baseline_losses)]
    loss_rows += [("actor", i, v) for i, v in enumerate(res.actor_losses)]
    _write_csv(losses_path, ["component", "update", "loss"], loss_rows)

    episodes_path = out / f"train_episodes_{tag}.csv"
    _write_csv(episodes_path, ["episode", "status", "duration"], res.episodes)

    manifest_path = out / f"manifest_train_{tag}.json"
    _write_manifest(manifest_path, "train", cfg, {
        "episodes": args.episodes,
        "augment_per_episode": args.augment,
        "outputs": {"weights": weights_path.name, "losses": losses_path.name,
                    "episodes": episodes_path.name},
    })

    captures = sum(1 for _, kind, _ in res.episodes if kind == "captured")
    decoded = res.bundle.model.decode()
    print(f"trained {args.episodes} episodes, {captures} captured")
    print(f"learned strategy estimate: k_ap={decoded.k_ap:.3f} "
          f"k_ad={decoded.k_ad:.3f} r_safe={decoded.r_safe:.3f} "
          f"r_avo={decoded.r_avo:.3f}")
    print(f"weights:  {weights_path}")
    print(f"losses:   {losses_path}")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    if args.mode != "expert" and args.weights is None:
        print(f"arcpursuit eval: error: mode {args.mode!r} needs --weights",
              file=sys.stderr)
        return EXIT_USAGE
    cfg = replace(_load_cfg(args), mode=args.mode)
    bundle = load_weights(args.weights) if args.weights else None
    out = _out_dir(args)

    summary = monte_carlo(cfg, args.episodes, bundle=bundle,
                          workers=args.workers)

    tag = f"{args.mode}_n{cfg.n_defenders}_seed{cfg.seed}"
    record_files = []
    for i in range(min(args.keep_records, args.episodes)):
        # same derived seed as the matching Monte Carlo episode, so the
        # saved trajectory is the one that was scored
        rec = run_episode(replace(cfg, seed=(cfg.seed, i), train=False),
                          bundle=bundle)
        rec_path = out / f"record_{tag}_ep{i}.jsonl"
        write_record(rec_path, rec, cfg.env)
        record_files.append(rec_path.name)
    sum_path = out / f"eval_{tag}_summary.csv"
    d = summary.as_dict()
    _write_csv(sum_path, list(d.keys()), [list(d.values())])
    ep_path = out / f"eval_{tag}_episodes.csv"
    _write_csv(ep_path, ["episode", "status", "duration"], summary.per_episode)
    _write_manifest(out / f"manifest_eval_{tag}.json", "eval", cfg, {
        "episodes": args.episodes,
        "weights": str(args.weights) if args.weights else None,
        "outputs": {"summary": sum_path.name, "episodes": ep_path.name,
                    "records": record_files},
        "results": d,
    })

    mct = (f"{summary.mean_capture_time:.2f}"
           if summary.mean_capture_time is not None else "n/a")
    print(f"mode={args.mode} n={cfg.n_defenders} episodes={summary.episodes} "
          f"seed={cfg.seed}")
    print(f"  captures  {summary.captures:5d}")
    print(f"  breaches  {summary.breaches:5d}")
    print(f"  timeouts  {summary.timeouts:5d}")
    print(f"  success rate            {summary.success_rate:.3f}")
    print(f"  mean capture time       {mct} s")
    print(f"  mean time w/ failures   {summary.mean_time_with_failures:.2f} s")
    print(f"summary: {sum_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay

def cmd_replay(args) -> int:
    header, rows, summary = read_record(args.record)
    out = _out_dir(args)
    stem = Path(args.record).stem
    n = header["n_defenders"]

    traj_head = (["t", "a_x", "a_y", "a_vx", "a_vy"]
                 + [f"d{i}_{c}" for i in range(n) for c in ("x", "y", "vx", "vy")]
                 + ["status"])
    traj_rows = [[r["t"], *r["attacker"],
                  *(v for d in r["defenders"] for v in d), r["status"]]
                 for r in rows]
    traj_path = out / f"{stem}_trajectories.csv"
    _write_csv(traj_path, traj_head, traj_rows)

    theta_head = ["t"] + [f"d{i}_{c}" for i in range(n)
                          for c in ("pc_x", "pc_y", "phi", "zeta", "beta")]
    theta_rows = [[r["t"], *(v for th in r["theta"] for v in th)] for r in rows]
    theta_path = out / f"{stem}_theta.csv"
    _write_csv(theta_path, theta_head, theta_rows)

    cons_path = out / f"{stem}_consensus.csv"
    _write_csv(cons_path, ["t", "consensus_error"],
               [[r["t"], r["consensus_error"]] for r in rows])

    loss_rows = [[r["t"],
                  r["losses"].get("model", ""),
                  r["losses"].get("baseline", ""),
                  r["losses"].get("actor", "")]
                 for r in rows if r.get("losses")]
    loss_path = out / f"{stem}_losses.csv"
    _write_csv(loss_path, ["t", "model", "baseline", "actor"], loss_rows)

    print(f"replayed {len(rows)} rows "
          f"(status {summary['status']}, duration {summary['duration']} s)")
    for p in (traj_path, theta_path, cons_path, loss_path):
        print(f"  {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment

def cmd_augment(args) -> int:
    cfg = _load_cfg(args)
    bundle = load_weights(args.weights)
    out = _out_dir(args)
    policy = make_actor_policy(lambda: bundle.actor, bundle.std, bundle.bounds,
                               cfg.env)
    rng = np.random.default_rng(cfg.seed)
    samples = augment(bundle.model.decode(), policy, cfg.expert, cfg.env,
                      cfg.n_defenders, args.count, rng)

    tag = f"seed{cfg.seed}_n{cfg.n_defenders}"
    path = out / f"augment_{tag}.jsonl"
    with open(path, "w") as f:
        f.write(json.dumps({"kind": "header", "frame": "protected-point",
                            "count": len(samples), "seed": cfg.seed,
                            "n_defenders": cfg.n_defenders},
                           sort_keys=True) + "\n")
        for theta, s_a, label, virtual in samples:
            f.write(json.dumps({"theta": theta.tolist(), "s_a": s_a.tolist(),
                                "label": label.tolist(), "virtual": virtual},
                               sort_keys=True) + "\n")
    _write_manifest(out / f"manifest_augment_{tag}.json", "augment", cfg, {
        "count": args.count,
        "weights": str(args.weights),
        "outputs": {"samples": path.name},
    })
    print(f"wrote {len(samples)} virtual decision samples: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest

def _ray_fan(n_rays, phase):
    ang = (np.arange(n_rays) + phase) * (2.0 * np.pi / n_rays)
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def _ray_hits(p_a, dirs, center, radius):
    rel = np.asarray(center, dtype=float) - p_a
    t = dirs @ rel
    return (t > 0.0) & (float(rel @ rel) - t ** 2 <= radius ** 2)


def _check_formation_geometry():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 13))
        theta = np.array([*rng.uniform(-5, 5, size=2),
                          rng.uniform(-np.pi, np.pi),
                          rng.uniform(0.5, 3.0), rng.uniform(0.0, 2 * np.pi)])
        refs = pattern(theta, n)
        assert np.allclose(refs.mean(axis=0), theta[:2], atol=1e-9)
        steps = np.diff(refs, axis=0)
        assert np.allclose(np.hypot(steps[:, 0], steps[:, 1]), theta[3],
                           rtol=1e-9)
        if n > 2:
            head = np.arctan2(steps[:, 1], steps[:, 0])
            turn = (np.diff(head) + np.pi) % (2 * np.pi) - np.pi
            assert np.allclose(turn, theta[4] / (n - 1), atol=1e-9)


def _check_consensus_contraction():
    rng = np.random.default_rng(1)
    k, dt, c = 6, 0.05, 2.0
    thetas = rng.uniform(-2, 2, size=(k, 5))
    target = rng.uniform(-1, 1, size=5)
    neighbors = [[j for j in range(k) if j != i] for i in range(k)]
    v_prev = np.inf
    for step in range(int(10.0 / dt)):
        v = 0.5 * float(np.sum((thetas - target) ** 2))
        assert v <= v_prev + 1e-12
        v_prev = v
        rates = np.stack([negotiate_update(thetas[i], -(thetas[i] - target),
                                           [thetas[j] for j in neighbors[i]], c)
                          for i in range(k)])
        thetas = thetas + dt * rates
    assert consensus_error(thetas) < 1e-3


def _check_gradients():
    rng = np.random.default_rng(2)
    env = EnvConfig()
    lc = LearningConfig()
    mw = init_model_weights()
    h = 1e-5
    for _ in range(3):
        s_a = np.column_stack([rng.uniform(-8, 8, size=(8, 2)),
                               rng.uniform(-2, 2, size=(8, 2))])
        ang = rng.uniform(-np.pi, np.pi, size=8)
        rad = rng.uniform(2.0, 8.0, size=8)
        s_d = s_a.copy()
        s_d[:, 0] += rad * np.cos(ang)
        s_d[:, 1] += rad * np.sin(ang)
        s_next = s_a + rng.normal(scale=0.1, size=(8, 4))
        batch = (s_a, s_d, s_next)
        grad, _ = model_grad(mw, batch, lc.w_model, env, env.dt)
        for j in range(4):
            raw_p, raw_m = mw.raw.copy(), mw.raw.copy()
            raw_p[j] += h
            raw_m[j] -= h
            num = (model_loss(replace(mw, raw=raw_p), batch, lc.w_model, env, env.dt)
                   - model_loss(replace(mw, raw=raw_m), batch, lc.w_model, env, env.dt)
                   ) / (2 * h)
            assert abs(grad[j] - num) / max(abs(num), 1e-6) < 1e-4

    for net in (init_actor_weights(rng).net, init_baseline_weights(rng).net):
        x = rng.uniform(-1, 1, size=(6, net.sizes[0]))
        target = rng.uniform(-1, 1, size=(6, net.sizes[-1]))
        y, acts = mlp_forward(net, x)
        gw, _ = mlp_backward(net, acts, 2.0 * (y - target))
        for l in range(len(net.weights)):
            i = int(rng.integers(net.weights[l].shape[0]))
            j = int(rng.integers(net.weights[l].shape[1]))
            for sign in (1.0, -1.0):
                net.weights[l][i, j] += sign * h
                out, _ = mlp_forward(net, x)
                val = float(np.sum((out - target) ** 2))
                net.weights[l][i, j] -= sign * h
                if sign > 0:
                    plus = val
                else:
                    num = (plus - val) / (2 * h)
            assert abs(gw[l][i, j] - num) / max(abs(num), 1e-6) < 1e-4


def _check_angles_against_rays():
    rng = np.random.default_rng(3)
    for _ in range(3):
        p_a = rng.uniform(-4, 4, size=2)
        defenders = p_a + rng.uniform(-7, 7, size=(5, 2))
        keep = np.hypot(*(defenders - p_a).T) > 1.5
        defenders = defenders[keep]
        if defenders.shape[0] == 0:
            continue
        dirs = _ray_fan(40_000, rng.random())
        hit = np.zeros(len(dirs), dtype=bool)
        for q in defenders:
            hit |= _ray_hits(p_a, dirs, q, 1.0)
        assert abs(capture_angle(p_a, defenders, 1.0)
                   - hit.mean() * 2 * np.pi) < 2e-2

        p_p = p_a + np.array([rng.uniform(6, 10), rng.uniform(-2, 2)])
        reach = _ray_hits(p_a, dirs, p_p, 2.0)
        for q in defenders:
            reach &= ~_ray_hits(p_a, dirs, q, 1.0)
        assert abs(protected_angle(p_a, p_p, 2.0, defenders, 1.0)
                   - reach.mean() * 2 * np.pi) < 2e-2


def _check_pso_quadratic():
    rng = np.random.default_rng(4)
    target = np.array([0.3, -0.7, 0.1])
    lo, hi = -np.ones(3), np.ones(3)

    def objective(x):
        return np.sum((x - target) ** 2, axis=-1)

    seeds = rng.uniform(-1, 1, size=(20, 3))
    res = pso_solve(objective, seeds, PsoConfig(n_particles=20, n_iters=50),
                    lo, hi, rng)
    assert objective(res.best[None])[0] < 1e-2
    assert np.all(np.diff(res.gbest_trace) <= 1e-15)


def _check_episode_determinism():
    cfg = EpisodeConfig(env=EnvConfig(t_max=2.0), seed=99)
    a, b = run_episode(cfg), run_episode(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        pa, pb = Path(tmp) / "a.jsonl", Path(tmp) / "b.jsonl"
        write_record(pa, a, cfg.env)
        write_record(pb, b, cfg.env)
        assert pa.read_bytes() == pb.read_bytes()


SELFTEST_CHECKS = [
    ("formation geometry", _check_formation_geometry),
    ("consensus contraction", _check_consensus_contraction),
    ("gradient checks", _check_gradients),
    ("angle ray oracle", _check_angles_against_rays),
    ("pso quadratic", _check_pso_quadratic),
    ("episode determinism", _check_episode_determinism),
]


def cmd_selftest(args) -> int:
    failures = 0
    for name, check in SELFTEST_CHECKS:
        try:
            check()
        except AssertionError as err:
            failures += 1
            print(f"FAIL {name}: {err}")
        else:
            print(f"ok   {name}")
    if failures:
        print(f"{failures} of {len(SELFTEST_CHECKS)} checks failed")
        return EXIT_RUNTIME
    print(f"all {len(SELFTEST_CHECKS)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p, seed=True):
    p.add_argument("--config", type=Path, default=None,
                   help="YAML config file (defaults used when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override a config key (repeatable)")
    p.add_argument("--out", default=None,
                   help=f"output directory (default $%s or ./runs)" % OUT_DIR_ENV)
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="master seed, overrides the config value")


def build_parser() -> _Parser:
    parser = _Parser(
        prog="arcpursuit",
        description=__doc__,
        epilog="config keys (also usable with --set):\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="run an imitation training session")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=300,
                   help="training episodes (0 writes the initial weights)")
    p.add_argument("--augment", type=int, default=0, metavar="K",
                   help="virtual decision samples added per episode")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-episode progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Monte Carlo evaluation")
    _add_common(p)
    p.add_argument("--weights", type=Path, default=None,
                   help="weights file (required for actor modes)")
    p.add_argument("--mode", default="actor",
                   choices=("expert", "actor", "actor_seeded_expert"))
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--n-defenders", type=int, default=None,
                   help="evaluate with a team size other than the trained one")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel episode workers")
    p.add_argument("--keep-records", type=int, default=0, metavar="K",
                   help="also save full records for the first K episodes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="expand an episode record into CSV")
    p.add_argument("record", type=Path)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("augment", help="write expert-labeled virtual samples")
    _add_common(p)
    p.add_argument("--weights", type=Path, required=True,
                   help="weights file providing the strategy estimate and actor")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--n-defenders", type=int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("selftest", help="run the fast invariant battery")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
