"""Multi-agent reset/step environment over the grid simulator.

Agent ``k`` controls the voltage set-point correction of the GFM in
microgrid ``k`` and observes the voltage magnitudes of its GFM and GFL buses,
each replicated over three phases and divided by the pre-attack steady state.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grid
from .scenario import AttackScenario, attack_vector

log = logging.getLogger(__name__)

INCREMENTAL, ABSOLUTE = "incremental", "absolute"


@dataclass
class EnvConfig:
    episode_length: int = 40
    dt: float = 0.5
    reward_weights: float | dict = 1.0     # scalar or {bus id: weight}
    invalid_penalty: float = 1.0
    action_bound: float = 0.1
    gate_threshold: float = 0.02
    instability_penalty: float = 50.0
    action_mode: str = INCREMENTAL
    res_limit: float = 0.2                 # bound on the accumulated correction
    phases: int = 3
    obs_scale: float = 0.05                # network input scaling hint for agents

    def validate(self) -> None:
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        weights = self.reward_weights.values() if isinstance(self.reward_weights, dict) else [self.reward_weights]
        if any(w < 0 for w in weights) or self.invalid_penalty < 0 or self.instability_penalty < 0:
            raise ValueError("reward weights and penalties must be non-negative")
        if self.action_mode not in (INCREMENTAL, ABSOLUTE):
            raise ValueError(f"unknown action_mode {self.action_mode!r}")
        if self.action_bound <= 0 or self.res_limit <= 0:
            raise ValueError("action_bound and res_limit must be positive")

    def weight(self, bus: int) -> float:
        if isinstance(self.reward_weights, dict):
            return float(self.reward_weights.get(bus, self.reward_weights.get(str(bus), 1.0)))
        return float(self.reward_weights)


@dataclass
class StepResult:
    next_obs: list[np.ndarray]
    rewards: np.ndarray
    done: list[bool]
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- #
# pure pieces
# --------------------------------------------------------------------------- #
def normalize_observation(raw, v_ss) -> np.ndarray:
    v_ss = np.asarray(v_ss, dtype=np.float64)
    if np.any(v_ss <= 0):
        raise ValueError("steady-state voltages must be positive")
    return np.asarray(raw, dtype=np.float64) / v_ss


def action_gate(raw_action: float, obs, eps_gate: float, bound: float) -> float:
    """Zero unless some observation deviates from 1 by at least ``eps_gate``; else clamp."""
    if np.max(np.abs(np.asarray(obs) - 1.0)) < eps_gate:
        return 0.0
    return float(np.clip(raw_action, -bound, bound))


def compute_reward(t: int, t_a: int, V, V_ss, action: float, cfg: EnvConfig, buses=None) -> float:
    """Reward of one agent.

    Up to and including the attack step the agent pays ``c`` for acting while
    the grid is healthy (t < t_a); afterwards it pays the weighted 2-norm of
    each monitored bus' per-phase deviation from steady state.
    ``V``/``V_ss`` are (n_bus, phases) or (n_bus,).
    """
    V = np.asarray(V, dtype=np.float64)
    V_ss = np.asarray(V_ss, dtype=np.float64)
    if V.shape != V_ss.shape:
        raise ValueError(f"V {V.shape} and V_ss {V_ss.shape} differ in shape")
    if t <= t_a:
        invalid = 1.0 if (t < t_a and abs(action) > 1e-9) else 0.0
        return -cfg.invalid_penalty * invalid + 0.0
    dev = (V - V_ss).reshape(V.shape[0], -1)
    w = np.ones(V.shape[0]) if buses is None else np.array([cfg.weight(b) for b in buses])
    return -float(np.sum(w * np.sqrt(np.sum(dev * dev, axis=1)))) + 0.0


# --------------------------------------------------------------------------- #
# environment
# --------------------------------------------------------------------------- #
class MicrogridEnv:
    obs_dim = 6
    act_dim = 1

    def __init__(self, model: grid.NetworkModel, cfg: EnvConfig | None = None, record: bool = False):
        self.model = model
        self.cfg = cfg or EnvConfig()
        self.cfg.validate()
        self.agents = model.microgrids()
        self.gfm_ids = [model.gfm_of(k).bus for k in self.agents]
        self.monitored = [model.monitored_buses(k) for k in self.agents]
        self.obs_dim = sum(len(b) for b in self.monitored[:1]) * self.cfg.phases
        self._ss = grid.steady_state(model, self.cfg.dt)
        self.v_ss = [self._ss.magnitudes(model, b) for b in self.monitored]
        self.obs_shift = 1.0
        self.obs_scale = self.cfg.obs_scale
        self.record = record
        self.rows: list[dict] = []
        self.scenario: AttackScenario | None = None
        self.state: grid.GridState | None = None
        self.t = 0
        self.done = True

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def steady(self) -> grid.GridState:
        return self._ss.copy()

    def _gfm_order(self) -> np.ndarray:
        # env agent order -> model.gfms order
        order = [g.bus for g in self.model.gfms]
        return np.array([order.index(b) for b in self.gfm_ids])

    def raw_voltages(self, state: grid.GridState | None = None) -> list[np.ndarray]:
        st = self.state if state is None else state
        return [st.magnitudes(self.model, b) for b in self.monitored]

    def observe(self, raw: list[np.ndarray]) -> list[np.ndarray]:
        p = self.cfg.phases
        return [np.repeat(normalize_observation(r, vss), p) for r, vss in zip(raw, self.v_ss)]

    def reset(self, scenario: AttackScenario) -> list[np.ndarray]:
        unknown = set(scenario.targets) - set(self.gfm_ids)
        if unknown:
            raise ValueError(f"scenario {scenario.id} targets unknown GFM ids {sorted(unknown)}")
        self.scenario = scenario
        self.state = self._ss.copy()
        self.t = 0
        self.done = False
        self.v_res = np.zeros(self.n_agents)
        self.rows = []
        self.obs = self.observe(self.raw_voltages())
        return [o.copy() for o in self.obs]

    def attack_now(self) -> np.ndarray:
        return attack_vector(self.scenario, self.t, self.gfm_ids)

    def step(self, joint_action, privileged_res=None) -> StepResult:
        """Apply one joint action.

        ``privileged_res`` sets the accumulated corrections directly, bypassing
        gate and action bound (used by the attack-aware oracle only).
        """
        if self.done:
            raise RuntimeError("episode is over; call reset() first")
        cfg = self.cfg
        raw = np.asarray(joint_action, dtype=np.float64).reshape(self.n_agents)
        t = self.t
        attack = self.attack_now()
        if privileged_res is not None:
            gated = np.zeros(self.n_agents)
            new_res = np.clip(np.asarray(privileged_res, dtype=np.float64), -cfg.res_limit, cfg.res_limit)
            applied = new_res - self.v_res
        else:
            gated = np.array([action_gate(a, o, cfg.gate_threshold, cfg.action_bound)
                              for a, o in zip(raw, self.obs)])
            base = self.v_res if cfg.action_mode == INCREMENTAL else 0.0
            new_res = np.clip(base + gated, -cfg.res_limit, cfg.res_limit)
            applied = gated
        self.v_res = new_res

        inputs = grid.SetpointInputs.zeros(len(self.model.gfms))
        order = self._gfm_order()
        inputs.v_attack[order] = attack
        inputs.v_res[order] = self.v_res
        unstable = False
        try:
            self.state = grid.step_dynamics(self.model, self.state, inputs, cfg.dt)
        except grid.PowerFlowDivergence as exc:
            log.debug("instability at step %d of %s: %s", t, self.scenario.id, exc)
            unstable = True

        self.t += 1
        if unstable:
            rewards = np.full(self.n_agents, -cfg.instability_penalty)
            next_obs = [o.copy() for o in self.obs]
            raw_v = [np.full(len(b), np.nan) for b in self.monitored]
        else:
            raw_v = self.raw_voltages()
            next_obs = self.observe(raw_v)
            p = cfg.phases
            rewards = np.array([
                compute_reward(t, self.scenario.t_a, np.repeat(rv[:, None], p, axis=1),
                               np.repeat(vss[:, None], p, axis=1), applied[k], cfg, self.monitored[k])
                for k, (rv, vss) in enumerate(zip(raw_v, self.v_ss))
            ])
        truncated = self.t >= cfg.episode_length
        self.done = unstable or truncated
        info = {
            "t": t, "attacked_now": bool(np.any(attack != 0.0)), "unstable": unstable,
            "terminated": unstable, "truncated": truncated and not unstable,
            "raw_voltages": raw_v, "raw_actions": raw, "gated_actions": gated, "v_res": self.v_res.copy(),
            "attack": attack,
        }
        if self.record:
            self._record(t, raw_v, next_obs, raw, gated, rewards, info["attacked_now"])
        self.obs = next_obs
        return StepResult([o.copy() for o in next_obs], rewards, [self.done] * self.n_agents, info)

    # -- trajectory export --------------------------------------------------
    def _record(self, t, raw_v, obs, raw, gated, rewards, attacked):
        p = self.cfg.phases
        for k, buses in enumerate(self.monitored):
            for j, b in enumerate(buses):
                self.rows.append({
                    "time": (t + 1) * self.cfg.dt, "bus": b, "agent": self.agents[k],
                    "v_raw": raw_v[k][j], "v_norm": obs[k][j * p],
                    "action_raw": raw[k], "action_gated": gated[k], "v_res": self.v_res[k],
                    "reward": rewards[k], "attacked": int(attacked),
                })


TRAJECTORY_COLUMNS = ["time", "bus", "agent", "v_raw", "v_norm", "action_raw", "action_gated", "v_res",
                      "reward", "attacked", "timeout"]


def write_trajectory(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in {**{"timeout": 0}, **r}.items()})
