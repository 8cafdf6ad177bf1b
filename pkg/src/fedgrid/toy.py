"""One-dimensional set-point tracking task used as a single-agent SAC regression check.

The state is an offset x in [-1, 1]; the action moves it, x' = clip(x + u), and
each step pays 1 - |x'|. Any start can be driven to 0 in one step, so the best
episode return equals the episode length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import StepResult


@dataclass
class ToyConfig:
    episode_length: int = 10
    action_bound: float = 1.0


class SetpointToyEnv:
    n_agents = 1
    obs_dim = 1
    obs_shift = 0.0
    obs_scale = 1.0

    def __init__(self, cfg: ToyConfig | None = None):
        self.cfg = cfg or ToyConfig()
        self.done = True
        self.x = 0.0
        self.t = 0

    @property
    def optimum(self) -> float:
        return float(self.cfg.episode_length)

    def reset(self, start: float) -> list[np.ndarray]:
        self.x = float(np.clip(start, -1.0, 1.0))
        self.t = 0
        self.done = False
        return [np.array([self.x])]

    def attack_now(self) -> np.ndarray:
        return np.zeros(1)

    def step(self, joint_action, privileged_res=None) -> StepResult:
        if self.done:
            raise RuntimeError("episode is over; call reset() first")
        u = float(np.clip(np.asarray(joint_action, dtype=np.float64).reshape(1)[0],
                          -self.cfg.action_bound, self.cfg.action_bound))
        self.x = float(np.clip(self.x + u, -1.0, 1.0))
        self.t += 1
        self.done = self.t >= self.cfg.episode_length
        return StepResult([np.array([self.x])], np.array([1.0 - abs(self.x)]), [self.done],
                          {"terminated": False, "unstable": False})


def start_pool(n: int = 41) -> list[float]:
    return [float(x) for x in np.linspace(-1.0, 1.0, n)]
