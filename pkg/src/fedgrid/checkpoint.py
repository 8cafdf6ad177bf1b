"""JSON checkpoints with lossless parameter encoding (base64 of little-endian float64)."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig
from .fedsac import AgentBundle, FedConfig, ReplayBuffer
from .nn import AdamState, Mlp, n_params

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s: str, expected_len: int | None = None) -> np.ndarray:
    try:
        raw = base64.b64decode(s.encode("ascii"), validate=True)
    except (ValueError, UnicodeError) as exc:
        raise CheckpointError(f"corrupt array payload: {exc}") from exc
    if len(raw) % 8:
        raise CheckpointError("array payload is not a whole number of float64 values")
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if expected_len is not None and a.shape[0] != expected_len:
        raise CheckpointError(f"array has {a.shape[0]} values, expected {expected_len}")
    return a


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    agents: list[AgentBundle]
    v_ss: list[list[float]]
    env_config: dict
    fed_config: dict
    env_steps: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def fed(self) -> FedConfig:
        return FedConfig.from_dict(self.fed_config)

    def env_cfg(self) -> EnvConfig:
        return EnvConfig(**self.env_config)

    def to_dict(self) -> dict:
        agents = []
        for a in self.agents:
            nets = {name: {"layer_sizes": list(getattr(a, name).layer_sizes),
                           "params": encode_array(getattr(a, name).flat)} for name in AgentBundle.NETS}
            agents.append({"nets": nets, "action_bound": a.action_bound,
                           "obs_shift": a.obs_shift, "obs_scale": a.obs_scale})
        return {
            "format_version": FORMAT_VERSION,
            "config_hash": config_hash(self.env_config, self.fed_config),
            "seed": int(self.seed), "env_steps": int(self.env_steps),
            "env_config": self.env_config, "fed_config": self.fed_config,
            "v_ss": self.v_ss, "agents": agents, "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if not isinstance(d, dict) or "format_version" not in d:
            raise CheckpointError("not a checkpoint document")
        if d["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d['format_version']}")
        try:
            fed = FedConfig.from_dict(d["fed_config"])
            agents = []
            for ad in d["agents"]:
                nets = {}
                for name in AgentBundle.NETS:
                    nd = ad["nets"][name]
                    sizes = [int(s) for s in nd["layer_sizes"]]
                    nets[name] = Mlp(sizes, decode_array(nd["params"], n_params(sizes)))
                obs_dim = nets["actor"].layer_sizes[0]
                for name in ("critic1", "critic2", "target1", "target2"):
                    if nets[name].layer_sizes[0] != obs_dim + 1 or nets[name].layer_sizes[-1] != 1:
                        raise CheckpointError(f"{name} layout {nets[name].layer_sizes} does not fit obs dim {obs_dim}")
                if nets["actor"].layer_sizes[-1] != 2:
                    raise CheckpointError("actor must output mean and log-std")
                opt = {n: AdamState.zeros_like(nets[n]) for n in ("actor", "critic1", "critic2")}
                agents.append(AgentBundle(**nets, opt=opt, buffer=ReplayBuffer(1, obs_dim),
                                          action_bound=float(ad["action_bound"]),
                                          obs_shift=float(ad["obs_shift"]), obs_scale=float(ad["obs_scale"])))
            v_ss = [[float(v) for v in row] for row in d["v_ss"]]
            if len(v_ss) != len(agents):
                raise CheckpointError("one steady-state vector per agent is required")
            return cls(agents, v_ss, dict(d["env_config"]), fed.to_dict(), int(d["env_steps"]),
                       int(d["seed"]), dict(d.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc!r}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def check_env(self, env) -> None:
        """Raise unless agent count and observation width match ``env``."""
        if self.n_agents != env.n_agents:
            raise CheckpointError(f"checkpoint has {self.n_agents} agents, environment has {env.n_agents}")
        for a in self.agents:
            if a.actor.layer_sizes[0] != env.obs_dim:
                raise CheckpointError(f"checkpoint obs dim {a.actor.layer_sizes[0]} != environment {env.obs_dim}")


def from_training(result, env, fed_cfg: FedConfig, seed: int, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(result.agents, [[float(v) for v in vs] for vs in env.v_ss], asdict(env.cfg),
                      fed_cfg.to_dict(), result.env_steps, seed, dict(meta or {}))
