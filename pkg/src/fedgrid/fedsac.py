"""Multi-agent soft actor-critic with federated averaging of the critics.

Each agent keeps a local actor, two critics, two target critics and a replay
buffer. Only critic/target parameter vectors ever reach the coordinator;
actors and transitions stay with their agent.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .nn import AdamState, Mlp, adam_step, forward_cache, mlp_backward, mlp_forward, mlp_init, \
    sample_squashed, squashed_backward

log = logging.getLogger(__name__)

CLIPPED = "clipped"
STOCHASTIC, DETERMINISTIC = "stochastic", "deterministic"


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #
@dataclass
class FedConfig:
    gamma: float = 0.99
    rho_mix: float = 0.005
    zeta: float = 0.2
    lr: float = 3e-4
    batch: int = 256
    buffer_capacity: int = 1_000_000
    fed_start: int = 100
    fed_interval: int = 10
    warmup_steps: int = 200
    total_steps: int = 20_000
    half_switch_step: int | None = None    # None: total_steps // 2
    retained_pair: int = 1
    hidden: tuple[int, ...] = (64, 64)
    federated: bool = True
    literal_polyak: bool = False           # target <- rho*target + (1-rho)*online
    updates_per_step: int = 1

    def validate(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 < self.rho_mix < 1:
            raise ValueError(f"rho_mix must lie in (0, 1), got {self.rho_mix}")
        if self.fed_interval < 1:
            raise ValueError("fed_interval must be >= 1")
        if self.zeta < 0 or self.lr <= 0 or self.batch < 1 or self.buffer_capacity < 1:
            raise ValueError("zeta >= 0, lr > 0, batch >= 1 and buffer_capacity >= 1 are required")
        if self.retained_pair not in (1, 2):
            raise ValueError("retained_pair must be 1 or 2")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")

    @property
    def switch_step(self) -> int:
        return self.total_steps // 2 if self.half_switch_step is None else self.half_switch_step

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)


def paper_profile(**overrides) -> FedConfig:
    return replace(FedConfig(), **overrides)


def desk_profile(**overrides) -> FedConfig:
    """Smaller buffer and batch so a 20k-step run fits a desktop budget."""
    base = FedConfig(buffer_capacity=50_000, batch=64, total_steps=20_000, zeta=0.01, lr=1e-3)
    return replace(base, **overrides)


PROFILES = {"paper": paper_profile, "desk": desk_profile}


def double_q_mode(env_step: int, cfg: FedConfig):
    """``"clipped"`` before the half switch, the retained pair index (1 or 2) after."""
    return CLIPPED if env_step < cfg.switch_step else cfg.retained_pair


# --------------------------------------------------------------------------- #
# replay buffer
# --------------------------------------------------------------------------- #
class ReplayBuffer:
    """Ring buffer of (o, u, r, o', d) with uniform sampling without replacement."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, o, u, r, o2, d) -> None:
        i = self.inserted % self.capacity
        self.obs[i] = o
        self.act[i] = u
        self.rew[i] = r
        self.next_obs[i] = o2
        self.done[i] = float(d)
        self.inserted += 1

    def sample(self, rng: np.random.Generator, batch: int) -> dict:
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(n, size=min(batch, n), replace=False)
        return {"obs": self.obs[idx], "act": self.act[idx], "rew": self.rew[idx],
                "next_obs": self.next_obs[idx], "done": self.done[idx]}


# --------------------------------------------------------------------------- #
# agent
# --------------------------------------------------------------------------- #
@dataclass
class AgentBundle:
    actor: Mlp
    critic1: Mlp
    critic2: Mlp
    target1: Mlp
    target2: Mlp
    opt: dict
    buffer: ReplayBuffer
    action_bound: float = 0.1
    obs_shift: float = 1.0
    obs_scale: float = 0.05
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    NETS = ("actor", "critic1", "critic2", "target1", "target2")

    @classmethod
    def create(cls, obs_dim: int, cfg: FedConfig, actor_seed: int, critic_seed: int, action_bound: float,
               obs_shift: float = 1.0, obs_scale: float = 0.05, rng=None) -> "AgentBundle":
        actor = mlp_init([obs_dim, *cfg.hidden, 2], actor_seed)
        c1 = mlp_init([obs_dim + 1, *cfg.hidden, 1], critic_seed)
        c2 = mlp_init([obs_dim + 1, *cfg.hidden, 1], critic_seed + 1)
        opt = {name: AdamState.zeros_like(net) for name, net in (("actor", actor), ("critic1", c1), ("critic2", c2))}
        return cls(actor, c1, c2, c1.copy(), c2.copy(), opt, ReplayBuffer(cfg.buffer_capacity, obs_dim),
                   action_bound, obs_shift, obs_scale, rng if rng is not None else np.random.default_rng(actor_seed))

    def preprocess(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_shift) / self.obs_scale

    def critics(self, mode) -> list[tuple[str, str]]:
        """Active (critic, target) attribute pairs for a double-Q mode."""
        if mode == CLIPPED:
            return [("critic1", "target1"), ("critic2", "target2")]
        return [(f"critic{mode}", f"target{mode}")]


def _policy_head(agent: AgentBundle, X: np.ndarray):
    out, cache = forward_cache(agent.actor, X)
    return out[:, :1], out[:, 1:], cache


def select_action(agent: AgentBundle, obs, mode: str = DETERMINISTIC, rng=None) -> float:
    """Action in [-bound, bound] for one raw observation vector."""
    X = agent.preprocess(obs)[None, :]
    mean, log_std, _ = _policy_head(agent, X)
    if mode == DETERMINISTIC:
        return float(np.tanh(mean[0, 0]) * agent.action_bound)
    rng = agent.rng if rng is None else rng
    s = sample_squashed(mean, log_std, rng.standard_normal(mean.shape))
    return float(s.action[0, 0] * agent.action_bound)


def soft_target(rew, done, q1, q2, zeta_logp, gamma: float, mode=CLIPPED):
    """r + gamma (1 - d) (Q_next - zeta log pi); Q_next = min(q1, q2) or the retained one."""
    if mode == CLIPPED:
        q = np.minimum(q1, q2)
    else:
        q = q1 if mode == 1 else q2
    return np.asarray(rew) + gamma * (1.0 - np.asarray(done)) * (q - zeta_logp)


def _critic_input(O: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.concatenate([O, A.reshape(-1, 1)], axis=1)


def compute_targets(batch: dict, agent: AgentBundle, cfg: FedConfig, mode, rng=None) -> np.ndarray:
    if len(batch["rew"]) == 0:
        raise ValueError("empty batch")
    rng = agent.rng if rng is None else rng
    O2 = agent.preprocess(batch["next_obs"])
    mean, log_std, _ = _policy_head(agent, O2)
    s = sample_squashed(mean, log_std, rng.standard_normal(mean.shape))
    X2 = _critic_input(O2, s.action)
    q1 = mlp_forward(agent.target1, X2)[:, 0]
    q2 = mlp_forward(agent.target2, X2)[:, 0]
    return soft_target(batch["rew"], batch["done"], q1, q2, cfg.zeta * s.log_prob, cfg.gamma, mode)


def critic_update(agent: AgentBundle, batch: dict, y: np.ndarray, cfg: FedConfig, mode=CLIPPED) -> float:
    """One Adam step per active critic on the mean squared TD error; returns the mean loss."""
    X = _critic_input(agent.preprocess(batch["obs"]), batch["act"])
    y = np.asarray(y, dtype=np.float64)
    losses = []
    for name, _ in agent.critics(mode):
        net = getattr(agent, name)
        q, cache = forward_cache(net, X)
        err = q[:, 0] - y
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite {name} loss")
        grads, _ = mlp_backward(net, X, (2.0 / len(y)) * err[:, None], cache)
        adam_step(net, grads, agent.opt[name], cfg.lr)
        losses.append(loss)
    return float(np.mean(losses))


def actor_loss_and_grad(agent: AgentBundle, obs, noise, cfg: FedConfig, mode=CLIPPED):
    """Surrogate mean(zeta log pi - Q_active) at fixed noise and its actor gradient."""
    O = agent.preprocess(obs)
    mean, log_std, cache = _policy_head(agent, O)
    s = sample_squashed(mean, log_std, np.asarray(noise).reshape(mean.shape))
    X = _critic_input(O, s.action)
    names = [c for c, _ in agent.critics(mode)]
    qs = [forward_cache(getattr(agent, n), X) for n in names]
    if len(qs) == 2:
        pick = qs[0][0][:, 0] <= qs[1][0][:, 0]
        q = np.where(pick, qs[0][0][:, 0], qs[1][0][:, 0])
        masks = [pick, ~pick]
    else:
        q = qs[0][0][:, 0]
        masks = [np.ones(len(q), dtype=bool)]
    B = len(q)
    loss = float(np.mean(cfg.zeta * s.log_prob - q))
    grad_a = np.zeros_like(s.action)
    for n, (_, c_cache), m in zip(names, qs, masks):
        _, gin = mlp_backward(getattr(agent, n), X, (-m.astype(np.float64) / B)[:, None], c_cache)
        grad_a += gin[:, -1:]
    g_mean, g_ls = squashed_backward(s, grad_a, np.full(B, cfg.zeta / B))
    grads, _ = mlp_backward(agent.actor, O, np.concatenate([g_mean, g_ls], axis=1), cache)
    return loss, grads


def actor_update(agent: AgentBundle, batch: dict, cfg: FedConfig, mode=CLIPPED, rng=None) -> float:
    rng = agent.rng if rng is None else rng
    noise = rng.standard_normal((len(batch["rew"]), 1))
    loss, grads = actor_loss_and_grad(agent, batch["obs"], noise, cfg, mode)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite actor loss")
    adam_step(agent.actor, grads, agent.opt["actor"], cfg.lr)
    return loss


def polyak_update(target: Mlp, online: Mlp, rho_mix: float, literal: bool = False) -> Mlp:
    if target.flat.shape != online.flat.shape:
        raise ValueError("target and online layouts differ")
    kernels.polyak_mix(target.flat, online.flat, (1.0 - rho_mix) if literal else rho_mix)
    return target


def gradient_round(agent: AgentBundle, cfg: FedConfig, mode) -> tuple[float, float]:
    batch = agent.buffer.sample(agent.rng, cfg.batch)
    y = compute_targets(batch, agent, cfg, mode)
    c_loss = critic_update(agent, batch, y, cfg, mode)
    a_loss = actor_update(agent, batch, cfg, mode)
    for c, t in agent.critics(mode):
        polyak_update(getattr(agent, t), getattr(agent, c), cfg.rho_mix, cfg.literal_polyak)
    return c_loss, a_loss


# --------------------------------------------------------------------------- #
# federation
# --------------------------------------------------------------------------- #
def federated_average(param_sets) -> np.ndarray:
    """Uniform elementwise mean, written as first + mean offset so identical inputs come back bit-exact."""
    arrays = [np.asarray(p, dtype=np.float64) for p in param_sets]
    if not arrays:
        raise ValueError("nothing to average")
    ref = arrays[0]
    for a in arrays[1:]:
        if a.shape != ref.shape:
            raise ValueError(f"parameter shapes differ: {ref.shape} vs {a.shape}")
    if len(arrays) == 1:
        return ref.copy()
    offset = np.zeros_like(ref)
    for a in arrays[1:]:
        offset += a - ref
    return ref + offset / len(arrays)


class Coordinator:
    """Receives parameter vectors only (never transitions) and returns their averages."""

    def __init__(self):
        self.rounds = 0

    def aggregate(self, uploads: dict[str, list[np.ndarray]]) -> dict[str, np.ndarray]:
        for name, vecs in uploads.items():
            if not all(isinstance(v, np.ndarray) and v.ndim == 1 for v in vecs):
                raise TypeError(f"coordinator accepts flat parameter arrays only (got other data for {name})")
        self.rounds += 1
        return {name: federated_average(vecs) for name, vecs in uploads.items()}


def fed_networks(mode) -> list[str]:
    if mode == CLIPPED:
        return ["critic1", "critic2", "target1", "target2"]
    return [f"critic{mode}", f"target{mode}"]


def broadcast_fed(agents: list[AgentBundle], averaged: dict[str, np.ndarray]) -> None:
    for agent in agents:
        for name, vec in averaged.items():
            getattr(agent, name).flat[:] = vec


def federated_round(agents: list[AgentBundle], coordinator: Coordinator, mode) -> None:
    names = fed_networks(mode)
    uploads = {n: [getattr(a, n).flat.copy() for a in agents] for n in names}
    broadcast_fed(agents, coordinator.aggregate(uploads))


def is_fed_step(env_step: int, cfg: FedConfig) -> bool:
    return cfg.federated and env_step >= cfg.fed_start and env_step % cfg.fed_interval == 0


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #
@dataclass
class TrainResult:
    agents: list[AgentBundle]
    metrics: list[dict]
    env_steps: int
    gradient_rounds: int
    fed_rounds: int


METRIC_COLUMNS = ["episode", "agent", "reward", "critic_loss", "actor_loss", "fed_round_flag"]


def make_agents(env, cfg: FedConfig, seed: int) -> tuple[list[AgentBundle], np.random.Generator]:
    """Agents with per-agent random streams; critics of all agents start from one shared draw."""
    ss = np.random.SeedSequence(seed)
    env_ss, init_ss, *agent_ss = ss.spawn(2 + env.n_agents)
    init_seeds = init_ss.generate_state(env.n_agents + 1)
    critic_seed = int(init_seeds[-1]) & 0x7FFFFFFF
    agents = [
        AgentBundle.create(env.obs_dim, cfg, int(init_seeds[k]), critic_seed, env.cfg.action_bound,
                           env.obs_shift, env.obs_scale, rng=np.random.default_rng(agent_ss[k]))
        for k in range(env.n_agents)
    ]
    return agents, np.random.default_rng(env_ss)


def train(env, scenarios, cfg: FedConfig, seed: int, on_episode=None) -> TrainResult:
    """Run ``cfg.total_steps`` environment steps of multi-agent SAC.

    ``scenarios`` is any sequence accepted by ``env.reset``; one is drawn
    uniformly per episode. Metrics hold one row per completed episode and agent.
    """
    cfg.validate()
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("no training scenarios")
    agents, env_rng = make_agents(env, cfg, seed)
    coordinator = Coordinator()
    m = len(agents)
    metrics: list[dict] = []
    step = 0
    rounds = 0
    episode = 0
    try:
        while step < cfg.total_steps:
            sc = scenarios[int(env_rng.integers(len(scenarios)))]
            try:
                obs = env.reset(sc)
            except Exception as exc:
                raise RuntimeError(f"environment reset failed at env step {step} (episode {episode})") from exc
            ep_reward = np.zeros(m)
            c_losses = [[] for _ in range(m)]
            a_losses = [[] for _ in range(m)]
            fed_flag = 0
            while not env.done and step < cfg.total_steps:
                if step < cfg.warmup_steps:
                    norm_act = np.array([a.rng.uniform(-1.0, 1.0) for a in agents])
                else:
                    norm_act = np.array([select_action(a, o, STOCHASTIC) for a, o in zip(agents, obs)])
                    norm_act /= np.array([a.action_bound for a in agents])
                try:
                    res = env.step(norm_act * np.array([a.action_bound for a in agents]))
                except Exception as exc:
                    raise RuntimeError(f"environment failure at env step {step} (episode {episode})") from exc
                terminal = bool(res.info.get("terminated", False))
                for k, a in enumerate(agents):
                    a.buffer.add(obs[k], norm_act[k], res.rewards[k], res.next_obs[k], terminal)
                ep_reward += res.rewards
                obs = res.next_obs
                if step >= cfg.warmup_steps:
                    mode = double_q_mode(step, cfg)
                    for k, a in enumerate(agents):
                        for _ in range(cfg.updates_per_step):
                            try:
                                cl, al = gradient_round(a, cfg, mode)
                            except FloatingPointError as exc:
                                raise FloatingPointError(f"agent {k} at env step {step}: {exc}") from exc
                            c_losses[k].append(cl)
                            a_losses[k].append(al)
                    rounds += 1
                if is_fed_step(step, cfg):
                    federated_round(agents, coordinator, double_q_mode(step, cfg))
                    fed_flag = 1
                step += 1
            if not env.done:
                break  # budget exhausted mid-episode; only complete episodes are logged
            for k in range(m):
                metrics.append({
                    "episode": episode, "agent": k, "reward": float(ep_reward[k]),
                    "critic_loss": float(np.mean(c_losses[k])) if c_losses[k] else float("nan"),
                    "actor_loss": float(np.mean(a_losses[k])) if a_losses[k] else float("nan"),
                    "fed_round_flag": fed_flag,
                })
            if on_episode is not None:
                on_episode(episode, step, ep_reward)
            episode += 1
    except (RuntimeError, FloatingPointError) as exc:
        exc.partial_metrics = metrics  # completed episodes survive a failure
        raise
    log.info("trained %d env steps, %d episodes, %d gradient rounds, %d federated rounds",
             step, episode, rounds, coordinator.rounds)
    return TrainResult(agents, metrics, step, rounds, coordinator.rounds)


def episode_rewards(metrics: list[dict], n_agents: int) -> np.ndarray:
    """(episodes, agents) matrix of episode rewards from metric rows."""
    n_ep = max((r["episode"] for r in metrics), default=-1) + 1
    out = np.zeros((n_ep, n_agents))
    for r in metrics:
        out[r["episode"], r["agent"]] = r["reward"]
    return out


# --------------------------------------------------------------------------- #
# policies and evaluation
# --------------------------------------------------------------------------- #
class AgentPolicy:
    """Deterministic trained actors."""
    name = "fedsac"

    def __init__(self, agents: list[AgentBundle]):
        self.agents = agents

    def act(self, env, obs):
        return np.array([select_action(a, o, DETERMINISTIC) for a, o in zip(self.agents, obs)]), None


class ZeroPolicy:
    name = "no_control"

    def act(self, env, obs):
        return np.zeros(env.n_agents), None


class OraclePolicy:
    """Attack-aware reference: sets the correction to exactly minus the current attack."""
    name = "oracle"

    def act(self, env, obs):
        return np.zeros(env.n_agents), -env.attack_now()


DEFAULT_BIN_EDGES = tuple(np.round(np.linspace(-10.0, 0.0, 21), 10))


def recovery_success(obs_history: np.ndarray, t_a: int, threshold: float = 0.02, window: int = 10) -> bool:
    """True when every observation from step ``t_a + window`` on stays within ``threshold`` of 1.

    ``obs_history[s]`` is the observation after ``s`` steps.
    """
    tail = obs_history[t_a + window:]
    return bool(tail.size == 0 or np.max(np.abs(tail - 1.0)) < threshold)


@dataclass
class EvalReport:
    policy: str
    mean_reward: list[float]
    success_rate: list[float]
    overall_success_rate: float
    histogram: list[list[int]]
    bin_edges: list[float]
    episodes: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def run_episode(env, scenario, policy) -> dict:
    obs = env.reset(scenario)
    hist = [np.stack(obs)]
    rewards = np.zeros(env.n_agents)
    actions, gated = [], []
    unstable = False
    while not env.done:
        act, priv = policy.act(env, obs)
        res = env.step(act, privileged_res=priv)
        actions.append(np.asarray(act, dtype=np.float64))
        gated.append(np.asarray(res.info.get("gated_actions", act), dtype=np.float64))
        rewards += res.rewards
        obs = res.next_obs
        unstable = unstable or res.info.get("unstable", False)
        hist.append(np.stack(obs))
    return {"rewards": rewards, "obs": np.stack(hist), "actions": np.stack(actions), "gated": np.stack(gated),
            "unstable": unstable}


def evaluate(policy, pool, env, episodes: int | None = None, threshold: float = 0.02, window: int = 10,
             bin_edges=DEFAULT_BIN_EDGES) -> EvalReport:
    """Roll out ``policy`` once per scenario (the first ``episodes`` of them if given)."""
    scenarios = list(pool)[: episodes if episodes is not None else None]
    edges = np.asarray(bin_edges, dtype=np.float64)
    m = env.n_agents
    per_ep = []
    R = np.zeros((len(scenarios), m))
    S = np.zeros((len(scenarios), m), dtype=bool)
    for i, sc in enumerate(scenarios):
        out = run_episode(env, sc, policy)
        last_onset = max(sc.target_onsets())
        ok = [not out["unstable"] and recovery_success(out["obs"][:, k], last_onset, threshold, window)
              for k in range(m)]
        R[i] = out["rewards"]
        S[i] = ok
        per_ep.append({"scenario": sc.id, "rewards": [float(r) for r in out["rewards"]],
                       "success": [bool(s) for s in ok], "unstable": bool(out["unstable"])})
    hist = [np.histogram(np.clip(R[:, k], edges[0], edges[-1]), bins=edges)[0].astype(int).tolist()
            for k in range(m)]
    n = max(len(scenarios), 1)
    return EvalReport(
        policy=getattr(policy, "name", type(policy).__name__),
        mean_reward=[float(x) for x in (R.mean(axis=0) if len(scenarios) else np.zeros(m))],
        success_rate=[float(x) for x in S.sum(axis=0) / n],
        overall_success_rate=float(np.all(S, axis=1).sum() / n),
        histogram=hist, bin_edges=[float(e) for e in edges], episodes=per_ep,
    )
