"""Adversarial set-point attack scenarios (step-shaped offsets on GFM voltage references)."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TRAIN, TEST = "train", "test"
DEFAULT_SIZES = {TRAIN: 7, TEST: 300}


@dataclass(frozen=True)
class AttackScenario:
    id: str
    targets: tuple[int, ...]            # GFM bus ids
    v_attack_magnitude: tuple[float, ...]  # signed p.u. offset per target
    t_a: int                            # first attacked step
    duration: int | None = None         # None: until the episode ends
    onsets: tuple[int, ...] | None = None  # per-target onsets; default all t_a
    seed_tag: str = ""
    shape: str = "step"

    def __post_init__(self):
        if not self.targets:
            raise ValueError("an attack scenario needs at least one target")
        if len(self.targets) != len(self.v_attack_magnitude):
            raise ValueError("one magnitude per target is required")
        if self.onsets is not None and len(self.onsets) != len(self.targets):
            raise ValueError("one onset per target is required")
        if self.shape != "step":
            raise ValueError(f"attack shape {self.shape!r} is reserved but not enabled")

    def target_onsets(self) -> tuple[int, ...]:
        return self.onsets if self.onsets is not None else (self.t_a,) * len(self.targets)

    def key(self) -> tuple:
        return (self.targets, self.v_attack_magnitude, self.t_a, self.duration, self.onsets)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        d["v_attack_magnitude"] = list(self.v_attack_magnitude)
        d["onsets"] = None if self.onsets is None else list(self.onsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackScenario":
        return cls(
            id=str(d["id"]), targets=tuple(int(t) for t in d["targets"]),
            v_attack_magnitude=tuple(float(m) for m in d["v_attack_magnitude"]),
            t_a=int(d["t_a"]), duration=None if d.get("duration") is None else int(d["duration"]),
            onsets=None if d.get("onsets") is None else tuple(int(o) for o in d["onsets"]),
            seed_tag=str(d.get("seed_tag", "")), shape=d.get("shape", "step"),
        )


@dataclass
class ScenarioConfig:
    gfm_ids: tuple[int, ...] = (51, 105, 80)
    mag_min: float = 0.05
    mag_max: float = 0.15
    mag_step: float = 0.01
    signs: tuple[int, ...] = (-1, 1)
    t_a_min: int = 5
    t_a_max: int = 15
    duration: int | None = None
    sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))

    def validate(self) -> None:
        if not self.gfm_ids:
            raise ValueError("no GFM ids to attack")
        if not 0 < self.mag_min <= self.mag_max <= 0.15:
            raise ValueError(f"magnitude bounds must satisfy 0 < min <= max <= 0.15, got [{self.mag_min}, {self.mag_max}]")
        if self.mag_step <= 0:
            raise ValueError("mag_step must be positive")
        if not 0 <= self.t_a_min <= self.t_a_max:
            raise ValueError(f"invalid onset window [{self.t_a_min}, {self.t_a_max}]")
        if not self.signs or any(s not in (-1, 1) for s in self.signs):
            raise ValueError("signs must be a non-empty subset of {-1, 1}")

    def magnitude_grid(self) -> np.ndarray:
        n = int(np.floor((self.mag_max - self.mag_min) / self.mag_step + 1e-9)) + 1
        return np.round(self.mag_min + self.mag_step * np.arange(n), 10)

    def subsets(self) -> list[tuple[int, ...]]:
        ids = tuple(self.gfm_ids)
        return [c for r in range(1, len(ids) + 1) for c in itertools.combinations(ids, r)]

    def capacity(self) -> int:
        levels = len(self.magnitude_grid()) * len(self.signs)
        onsets = self.t_a_max - self.t_a_min + 1
        return sum(levels ** len(s) for s in self.subsets()) * onsets


@dataclass
class ScenarioPool:
    scenarios: list[AttackScenario]
    kind: str

    def __post_init__(self):
        ids = [s.id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ValueError("scenario ids must be unique")

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scenarios": [s.to_dict() for s in self.scenarios]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioPool":
        return cls([AttackScenario.from_dict(s) for s in d["scenarios"]], d["kind"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioPool":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_pool(config: ScenarioConfig, kind: str, seed: int, size: int | None = None) -> ScenarioPool:
    """Draw ``size`` distinct scenarios.

    Target subsets cycle through every non-empty GFM subset (singles first, so
    a 7-scenario pool over 3 GFMs uses each subset once); magnitudes, signs and
    onsets are drawn from the discretized grid.
    """
    config.validate()
    size = config.sizes.get(kind, DEFAULT_SIZES.get(kind)) if size is None else size
    if size is None or size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    if size > config.capacity():
        raise ValueError(f"requested {size} scenarios but only {config.capacity()} distinct ones exist")
    rng = np.random.default_rng([seed, 0 if kind == TRAIN else 1])
    grid = config.magnitude_grid()
    subsets = config.subsets()
    seen: set = set()
    out: list[AttackScenario] = []
    order = list(range(len(subsets)))
    attempts = 0
    while len(out) < size:
        attempts += 1
        if attempts > 1000 * size:
            raise ValueError(f"could not draw {size} distinct scenarios; widen the magnitude or onset grid")
        i = len(out)
        if i % len(subsets) == 0 and i > 0:
            order = list(rng.permutation(len(subsets)))
        targets = subsets[order[i % len(subsets)]]
        mags = tuple(float(rng.choice(config.signs) * rng.choice(grid)) for _ in targets)
        t_a = int(rng.integers(config.t_a_min, config.t_a_max + 1))
        sc = AttackScenario(id=f"{kind}-{i:04d}", targets=targets, v_attack_magnitude=mags, t_a=t_a,
                            duration=config.duration, seed_tag=f"{seed}")
        if sc.key() in seen:
            continue
        seen.add(sc.key())
        out.append(sc)
    return ScenarioPool(out, kind)


def sample_scenario(pool: ScenarioPool, rng: np.random.Generator) -> AttackScenario:
    if len(pool) == 0:
        raise ValueError("cannot sample from an empty scenario pool")
    return pool.scenarios[int(rng.integers(len(pool)))]


def attack_signal(scenario: AttackScenario, t: int, gfm_ids=None) -> dict[int, float]:
    """Per-GFM voltage set-point offset at step ``t`` (zero outside the attack window)."""
    if t < 0:
        raise ValueError("step index must be non-negative")
    ids = scenario.targets if gfm_ids is None else gfm_ids
    out = {int(g): 0.0 for g in ids}
    for g, mag, onset in zip(scenario.targets, scenario.v_attack_magnitude, scenario.target_onsets()):
        active = t >= onset and (scenario.duration is None or t < onset + scenario.duration)
        if active and g in out:
            out[g] += mag
    return out


def attack_vector(scenario: AttackScenario, t: int, gfm_ids) -> np.ndarray:
    sig = attack_signal(scenario, t, gfm_ids)
    return np.array([sig[int(g)] for g in gfm_ids])


def hil_schedule(gfm_ids=(51, 105, 80), levels=(-0.08, -0.1, -0.06), onsets_s=(20.0, 70.0, 120.0),
                 dt: float = 0.5) -> AttackScenario:
    """Staggered attacks on every GFM, persisting to the end of the run (150 s horizon)."""
    onsets = tuple(int(round(s / dt)) for s in onsets_s)
    return AttackScenario(id="hil-three-onset", targets=tuple(gfm_ids), v_attack_magnitude=tuple(levels),
                          t_a=min(onsets), onsets=onsets, seed_tag="hil")
