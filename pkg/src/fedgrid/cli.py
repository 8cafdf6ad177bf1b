"""Command-line entry points: gen-scenarios, train, eval, serve, replay.

Exit codes: 0 success, 1 configuration or validation error, 2 runtime or
transport failure. ``FEDGRID_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fedsac, grid
from .checkpoint import Checkpoint, CheckpointError, config_hash, from_training
from .env import EnvConfig, MicrogridEnv, write_trajectory
from .scenario import TEST, TRAIN, ScenarioConfig, ScenarioPool, generate_pool, hil_schedule

log = logging.getLogger("fedgrid")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: str = "nm3"
    profile: str = "desk"
    seed: int = 0
    env: dict = field(default_factory=dict)
    fed: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    train_pool: str | None = None
    test_pool: str | None = None

    def model(self) -> grid.NetworkModel:
        if self.network == "nm3":
            return grid.nm3()
        if not Path(self.network).is_file():
            raise ConfigError(f"network file {self.network} does not exist")
        return grid.load_model(self.network)

    def env_config(self) -> EnvConfig:
        cfg = EnvConfig(**self.env)
        cfg.validate()
        return cfg

    def fed_config(self) -> fedsac.FedConfig:
        if self.profile not in fedsac.PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(fedsac.PROFILES)}")
        fed = dict(self.fed)
        if "hidden" in fed:
            fed["hidden"] = tuple(fed["hidden"])
        cfg = fedsac.PROFILES[self.profile](**fed)
        cfg.validate()
        return cfg

    def scenario_config(self) -> ScenarioConfig:
        d = dict(self.scenario)
        for key in ("gfm_ids", "signs"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = ScenarioConfig(**d)
        cfg.validate()
        return cfg

    def resolved(self) -> dict:
        return {"network": self.network, "profile": self.profile, "seed": self.seed,
                "env": asdict(self.env_config()), "fed": self.fed_config().to_dict(),
                "scenario": asdict(self.scenario_config()), "train_pool": self.train_pool,
                "test_pool": self.test_pool}

    def hash(self) -> str:
        return config_hash(self.resolved())


def load_run_config(path: str | None, seed: int | None = None, profile: str | None = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = p.parent
        for key in ("network", "train_pool", "test_pool"):
            if data.get(key) not in (None, "nm3") and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
    try:
        rc = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"unknown config field: {exc}") from exc
    if seed is not None:
        rc.seed = seed
    if profile is not None:
        rc.profile = profile
    for key in ("train_pool", "test_pool"):
        val = getattr(rc, key)
        if val is not None and not Path(val).is_file():
            raise ConfigError(f"{key} file {val} does not exist")
    return rc


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _pool(rc: RunConfig, kind: str) -> ScenarioPool:
    path = rc.train_pool if kind == TRAIN else rc.test_pool
    if path is not None:
        return ScenarioPool.load(path)
    return generate_pool(rc.scenario_config(), kind, rc.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address {text!r} is not host:port")
    return host, int(port)


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #
def cmd_gen_scenarios(args) -> int:
    rc = load_run_config(args.config, args.seed, args.profile)
    cfg = rc.scenario_config()
    out = _out(args)
    for kind in (TRAIN, TEST):
        pool = generate_pool(cfg, kind, rc.seed)
        pool.save(out / f"{kind}_pool.json")
        n_multi = sum(len(s.targets) > 1 for s in pool)
        print(f"{kind}: {len(pool)} scenarios ({n_multi} multi-target) -> {out / f'{kind}_pool.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.seed, args.profile)
    fed_cfg = rc.fed_config()
    if args.steps is not None:
        fed_cfg.total_steps = args.steps
    if args.baseline == "decentralized":
        fed_cfg.federated = False
    env = MicrogridEnv(rc.model(), rc.env_config())
    pool = _pool(rc, TRAIN)
    out = _out(args)
    h = rc.hash()
    metrics_path = out / "metrics.csv"
    try:
        result = fedsac.train(env, pool, fed_cfg, rc.seed)
    except (RuntimeError, FloatingPointError) as exc:
        partial = getattr(exc, "partial_metrics", [])
        write_csv(metrics_path, fedsac.METRIC_COLUMNS + ["config_hash"], [{**r, "config_hash": h} for r in partial])
        print(f"error: training failed: {exc}; {len(partial)} metric rows kept in {metrics_path}", file=sys.stderr)
        return EXIT_RUNTIME
    rows = [{**r, "config_hash": h} for r in result.metrics]
    write_csv(metrics_path, fedsac.METRIC_COLUMNS + ["config_hash"], rows)
    ckpt = from_training(result, env, fed_cfg, rc.seed,
                         {"config_hash": h, "baseline": args.baseline or "fedsac", "network": rc.network})
    ckpt.save(out / "checkpoint.json")
    R = fedsac.episode_rewards(result.metrics, env.n_agents)
    print(f"trained {result.env_steps} steps, {len(R)} episodes, {result.fed_rounds} federated rounds; "
          f"config {h}; outputs in {out}")
    return EXIT_OK


def _policy_for(args, ckpt):
    if args.oracle:
        return fedsac.OraclePolicy()
    return fedsac.AgentPolicy(ckpt.agents)


def cmd_eval(args) -> int:
    rc = load_run_config(args.config, args.seed, args.profile)
    ckpt = Checkpoint.load(args.checkpoint)
    env = MicrogridEnv(rc.model(), ckpt.env_cfg(), record=True)
    ckpt.check_env(env)
    pool = ScenarioPool.load(args.pool) if args.pool else _pool(rc, TEST)
    out = _out(args)
    h = rc.hash()
    reports = {"config_hash": h, "checkpoint_config_hash": ckpt.meta.get("config_hash"), "scenarios": len(pool)}
    policies = [_policy_for(args, ckpt)]
    if args.compare == "no_control":
        policies.append(fedsac.ZeroPolicy())
    hist_rows = []
    for pol in policies:
        rep = fedsac.evaluate(pol, pool, env, args.episodes)
        reports[rep.policy] = rep.to_dict()
        for k, counts in enumerate(rep.histogram):
            for i, c in enumerate(counts):
                hist_rows.append({"policy": rep.policy, "agent": k, "bin_lo": rep.bin_edges[i],
                                  "bin_hi": rep.bin_edges[i + 1], "count": c, "config_hash": h})
        print(f"{rep.policy}: mean reward {np.round(rep.mean_reward, 4).tolist()}, "
              f"success {np.round(rep.success_rate, 3).tolist()}, overall {rep.overall_success_rate:.3f}")
    write_json(out / "report.json", reports)
    write_csv(out / "histogram.csv", ["policy", "agent", "bin_lo", "bin_hi", "count", "config_hash"], hist_rows)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    for sc in list(pool)[: args.trajectories]:
        fedsac.run_episode(env, sc, policies[0])
        write_trajectory(env.rows, traj_dir / f"{sc.id}.csv")
    return EXIT_OK


def cmd_serve(args) -> int:
    from . import serve
    ckpt = Checkpoint.load(args.checkpoint)
    try:
        serve.serve(ckpt, _address(args.bind))
    except OSError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_replay(args) -> int:
    from . import serve
    rc = load_run_config(args.config, args.seed, args.profile)
    ckpt = Checkpoint.load(args.checkpoint)
    model = rc.model()
    if args.pool:
        scenario = ScenarioPool.load(args.pool).scenarios[args.index]
        horizon = None
    else:
        scenario = hil_schedule(dt=ckpt.env_cfg().dt)
        horizon = args.horizon
    out = _out(args)
    address = _address(args.connect)
    cfg = ckpt.env_cfg()
    if horizon is not None:
        cfg.episode_length = horizon
    try:
        rows, actions, flags = serve.loopback_client(model, scenario, address, cfg, timeout=args.timeout,
                                                     abort_after=args.abort_after)
    except serve.TransportAbort as exc:
        write_trajectory(exc.rows, out / "trajectory.csv")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_trajectory(rows, out / "trajectory.csv")
    env = MicrogridEnv(model, cfg)
    ckpt.check_env(env)
    ref = fedsac.run_episode(env, scenario, fedsac.AgentPolicy(ckpt.agents))["gated"]
    same = actions.shape == ref.shape and np.array_equal(actions.view(np.uint64), ref.view(np.uint64))
    print(f"equivalence {'PASS' if same else 'FAIL'} ({len(actions)} steps, {int(flags.sum())} timeouts)")
    if flags.any():
        return EXIT_RUNTIME
    return EXIT_OK if same else EXIT_RUNTIME


# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgrid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--profile", choices=sorted(fedsac.PROFILES))
        if out:
            sp.add_argument("--out", default="runs/latest", help="output directory")

    sp = sub.add_parser("gen-scenarios", help="write train and test scenario pools")
    common(sp)
    sp.set_defaults(func=cmd_gen_scenarios)

    sp = sub.add_parser("train", help="train agents and write checkpoint + metrics")
    common(sp)
    sp.add_argument("--baseline", choices=["decentralized"], help="disable federation")
    sp.add_argument("--steps", type=int, help="override total environment steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a scenario pool")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pool", help="scenario pool JSON (default: generated test pool)")
    sp.add_argument("--compare", choices=["no_control"])
    sp.add_argument("--oracle", action="store_true", help="use the attack-aware reference policy")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--trajectories", type=int, default=5, help="trajectory CSVs to write")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("serve", help="run the datagram policy server")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bind", default="127.0.0.1:9750")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("replay", help="drive the simulator through a running policy server")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--connect", default="127.0.0.1:9750")
    sp.add_argument("--pool", help="replay one scenario from this pool instead of the three-onset schedule")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--horizon", type=int, default=300)
    sp.add_argument("--timeout", type=float, default=0.1)
    sp.add_argument("--abort-after", type=int, default=None)
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FEDGRID_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
