"""Configuration ingestion, run orchestration, and report emission.

Configurations are JSON mappings validated against the schema below: unknown
keys are rejected, defaults are filled in, and the fully resolved
configuration is written next to the outputs so a run can be reproduced
bit-for-bit from its artifacts.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import sim
from .learning import deploy_policy, load_policy
from .objective import SynthesisError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VERIFY = 4
EXIT_RUNFAIL = 5


class ConfigError(ValueError):
    pass


# schema: nested dict of key -> default (None means required); lists typed by
# example element
DEFAULTS = {
    "seed": 0,
    "mode": "unconstrained",            # or "safe"
    "topology": {
        "kind": "line",                  # line | circle | grid | custom
        "robots": 2,
        "spacing": 1.0,
        "radius": 0.0,
        "rows": 0,
        "cols": 0,
        "row_spacing": 1.0,
        "col_spacing": 2.0,
        "lateral_shift": 0.0,
        "pinned": "all",
        "adjacency": [],
        "offsets": [],
    },
    "leader": {
        "start": [0.0, 0.0, 0.0, 0.0],
        "phases": [
            {"kind": "ramp", "duration": 1.0, "speed": 1.0},
            {"kind": "const", "duration": 1e9, "speed": 1.0},
        ],
    },
    "objective": {
        "horizon": 20,
        "q_weight": 1.0,
        "r_weight": 0.5,
        "beta": 1.1,
        "nominal_speed": 1.0,
        "terminal": "riccati",           # riccati | stage | synthesized
    },
    "learner": {
        "rate_critic": 0.4,
        "rate_actor": 0.2,
        "rate_critic_barrier": 1e-5,
        "rate_actor_state_force": 0.1,
        "rate_actor_control_force": 0.1,
        "t_max": 30,
        "cold_start_t_max": 0,
        "err_tol": 1e-4,
        "weight_init_high": 0.1,
        "retry_budget": 5,
        "basis_seed": 1234,
        "basis_scale": 1.0,
        "critic_features": 4,
        "monitor": True,
        "monitor_remedy": True,
        "rate_guard": 0.9,
        "train_state_force": False,
        "init": "uniform",               # uniform | stabilizing
        "episodes": 1,
        "steps_per_episode": 0,          # 0: use sim.steps
        "episode_rate_decay": 0.7,
        "certify_proxy_robots": 8,
        "certify_target": 0.99,
    },
    "safety": {
        "mu": 0.02,
        "kappa": 0.1,
        "influence": 1.0,
        "control_bounds": [5.0, 5.0],
        "obstacles": [],
        "pair_clearance": None,
        "force_init": True,
        "force_init_steer": 1.5,
        "force_init_brake": 1.0,
    },
    "envelope": {
        "mode": "geometric",             # geometric | shifted | off
        "ratio": 0.97,
        "floor": 1e-3,
    },
    "baseline": {
        "max_iterations": 30,
    },
    "sim": {
        "steps": 200,
        "dt": 0.05,
        "disturbance": 0.0,
        "init_jitter": {"pos": 0.3, "theta": 0.1, "v": 0.1},
        "fault_inject_steps": [],
    },
    "transfer": {
        "source_robot": 0,
    },
}

_LIST_VALUED = {"phases", "obstacles", "adjacency", "offsets",
                "fault_inject_steps", "start", "control_bounds", "pinned"}


def resolve_config(user: dict, path="") -> dict:
    """Merge user keys over the defaults, rejecting unknown keys."""
    return _merge(DEFAULTS, user, "")


def _merge(defaults, user, path):
    if not isinstance(user, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}")
    out = {}
    for key, default in defaults.items():
        here = f"{path}.{key}" if path else key
        if key in user:
            val = user[key]
            if isinstance(default, dict) and key not in _LIST_VALUED \
                    and not isinstance(val, dict):
                raise ConfigError(f"{here} must be a mapping")
            if isinstance(default, dict) and isinstance(val, dict):
                out[key] = _merge(default, val, here)
            else:
                out[key] = val
        else:
            out[key] = json.loads(json.dumps(default))  # deep copy
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown configuration keys at {path or 'top level'}: "
            f"{sorted(unknown)}")
    return out


def validate(cfg: dict):
    if cfg["mode"] not in ("unconstrained", "safe"):
        raise ConfigError("mode must be 'unconstrained' or 'safe'")
    if cfg["topology"]["robots"] < 1:
        raise ConfigError("topology.robots must be >= 1")
    if cfg["sim"]["steps"] < 1:
        raise ConfigError("sim.steps must be >= 1")
    if cfg["sim"]["dt"] <= 0:
        raise ConfigError("sim.dt must be positive")
    if cfg["objective"]["horizon"] < 1:
        raise ConfigError("objective.horizon must be >= 1")
    if cfg["envelope"]["mode"] not in ("geometric", "shifted", "off"):
        raise ConfigError("envelope.mode must be geometric, shifted, or off")
    if cfg["learner"]["init"] not in ("uniform", "stabilizing"):
        raise ConfigError("learner.init must be uniform or stabilizing")
    if cfg["topology"]["kind"] not in ("line", "circle", "grid", "custom"):
        raise ConfigError("topology.kind must be line, circle, grid, or custom")


def load_config(path, overrides=None) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    cfg = resolve_config(user)
    for dotted, value in (overrides or {}).items():
        _apply_override(cfg, dotted, value)
    validate(cfg)
    return cfg


def _apply_override(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node[key]
    node[keys[-1]] = value


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonify)
        fh.write("\n")


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_weights(path, bundle):
    arrays = {"meta": np.array(json.dumps({
        "basis_seed": bundle["basis_seed"],
        "basis_scale": bundle["basis_scale"],
        "mode": bundle["mode"],
        "robots": sorted(int(i) for i in bundle["robots"]),
        "own_pos": {str(i): int(bundle["robots"][i]["own_pos"])
                    for i in bundle["robots"]},
        "n_neighbors": {str(i): int(bundle["robots"][i]["n_neighbors"])
                        for i in bundle["robots"]},
    }))}
    for i, entry in bundle["robots"].items():
        for key, val in entry.items():
            if isinstance(val, np.ndarray):
                arrays[f"robot{i}_{key}"] = val
    np.savez(path, **arrays)


def load_weights(path) -> dict:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise FileNotFoundError(f"weights file not found: {path}")
    meta = json.loads(str(data["meta"]))
    bundle = {"basis_seed": meta["basis_seed"], "basis_scale": meta["basis_scale"],
              "mode": meta["mode"], "robots": {}}
    for i in meta["robots"]:
        entry = {"own_pos": meta["own_pos"][str(i)],
                 "n_neighbors": meta["n_neighbors"][str(i)]}
        for key in ("wc", "wa", "wc2", "wa2", "wa3"):
            name = f"robot{i}_{key}"
            if name in data:
                entry[key] = data[name]
        bundle["robots"][int(i)] = entry
    return bundle


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_learn(cfg, out: Path) -> int:
    setup = sim.assemble(cfg)
    lcfg = cfg["learner"]
    if lcfg["episodes"] > 1:
        steps = lcfg["steps_per_episode"] or cfg["sim"]["steps"]
        bundle, report = sim.train_episodes(
            setup, episodes=lcfg["episodes"], steps_per_episode=steps,
            rate_decay=lcfg["episode_rate_decay"],
            proxy_robots=lcfg["certify_proxy_robots"],
            certify_target=lcfg["certify_target"])
        save_weights(out / "weights.npz", bundle)
        write_json(out / "training_report.json", report)
        print(f"episodes: {report['episodes_run']}  "
              f"certified radius: {report['best_radius']:.6f}")
        return EXIT_OK if report["certified"] else EXIT_RUNFAIL
    record = sim.run_closed_loop(setup, "learn")
    record.to_csv(out / "steps.csv")
    record.save_summary(out / "summary.json")
    save_weights(out / "weights.npz", setup.learner.export_weights())
    summary = record.summary()
    print(f"steps: {summary['steps']}  failed: {summary['failed']}  "
          f"final error: {summary.get('final_error_max', float('nan')):.3e}  "
          f"violations: {summary['violations']}")
    return EXIT_RUNFAIL if record.failed else EXIT_OK


def cmd_deploy(cfg, out: Path, weights_path) -> int:
    bundle = load_weights(weights_path)
    bundle["source_robot"] = cfg["transfer"]["source_robot"]
    setup = sim.assemble(cfg)
    record = sim.run_closed_loop(setup, "deploy", weights_bundle=bundle)
    record.to_csv(out / "steps.csv")
    record.save_summary(out / "summary.json")
    summary = record.summary()
    print(f"steps: {summary['steps']}  failed: {summary['failed']}  "
          f"final error: {summary.get('final_error_max', float('nan')):.3e}")
    return EXIT_RUNFAIL if record.failed else EXIT_OK


def cmd_bench(cfg, out: Path, robot_counts, steps) -> int:
    def make_config(m):
        import copy
        sub = copy.deepcopy(cfg)
        sub["topology"]["robots"] = m
        return sub

    result = sim.measure_scaling(make_config, robot_counts, steps=steps)
    write_json(out / "bench.json", result)
    print(f"{'robots':>8} {'learn s/step':>14} {'deploy s/step':>14}")
    for row in result["table"]:
        print(f"{row['robots']:>8} {row['learn_step_s']:>14.6f} "
              f"{row['deploy_step_s']:>14.6f}")
    print(f"linear fit R^2: {result['r_squared']:.4f}")
    return EXIT_OK


def cmd_verify(cfg, out: Path) -> int:
    """Run the invariant suite on the configured scenario and print one
    pass/fail line per check."""
    from .verify import run_verification

    results = run_verification(cfg)
    write_json(out / "verify.json", results)
    failed = [name for name, item in results.items() if not item["ok"]]
    for name, item in results.items():
        mark = "pass" if item["ok"] else "FAIL"
        print(f"[{mark}] {name}: {item['detail']}")
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="swarmpc",
        description="Learned receding-horizon formation control for "
                    "multirobot swarms")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--robots", type=int, default=None,
                       help="override topology.robots")
        p.add_argument("--mode", choices=("safe", "unconstrained"),
                       default=None, help="override constraint mode")

    p_learn = sub.add_parser("learn", help="train policies online")
    common(p_learn)
    p_deploy = sub.add_parser("deploy", help="run a trained policy")
    common(p_deploy)
    p_deploy.add_argument("--weights", required=True, help="weights .npz")
    p_bench = sub.add_parser("bench", help="scaling benchmark")
    common(p_bench)
    p_bench.add_argument("--robot-counts", default="10,100,1000",
                         help="comma-separated fleet sizes")
    p_bench.add_argument("--steps", type=int, default=5,
                         help="steps measured per fleet size")
    p_verify = sub.add_parser("verify", help="run the invariant suite")
    common(p_verify)

    args = parser.parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.robots is not None:
        overrides["topology.robots"] = args.robots
    if args.mode is not None:
        overrides["mode"] = args.mode

    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.resolved.json", cfg)

    try:
        if args.command == "learn":
            return cmd_learn(cfg, out)
        if args.command == "deploy":
            return cmd_deploy(cfg, out, args.weights)
        if args.command == "bench":
            counts = [int(x) for x in args.robot_counts.split(",") if x]
            return cmd_bench(cfg, out, counts, args.steps)
        if args.command == "verify":
            return cmd_verify(cfg, out)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except SynthesisError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_RUNFAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
