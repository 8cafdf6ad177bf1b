"""Quasi-static phasor simulation of droop-controlled networked microgrids.

Grid-forming inverters (GFM) and synchronous machines (SYNC) are voltage
sources E∠δ behind a coupling impedance; grid-following inverters (GFL) and
loads are constant-PQ injections. Each control step advances the controller
states with backward Euler while the network equations are solved exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels

GFM, GFL, SYNC = "GFM", "GFL", "SYNC"
PF_TOL = 1e-10
PF_MAX_ITER = 50
DYN_TOL = 1e-12
DYN_MAX_ITER = 30


class PowerFlowDivergence(RuntimeError):
    """Newton iteration failed; ``mismatch`` is the last max-norm power mismatch."""

    def __init__(self, msg: str, mismatch: float):
        super().__init__(f"{msg} (last mismatch {mismatch:.3e} p.u.)")
        self.mismatch = mismatch


@dataclass(frozen=True)
class Bus:
    id: int
    microgrid: int
    nominal_voltage: float = 1.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    impedance: complex


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class DeviceParams:
    kind: str
    bus: int
    rating: float
    m_p: float = 0.0          # rad/s per p.u. W
    m_q: float = 0.0          # p.u. V per p.u. VAr
    p_set_base: float = 0.0
    v_set_base: float = 1.0   # GFM voltage set-point; fixed EMF for SYNC
    q_nom: float = 0.0        # GFM Q reference; GFL reactive injection
    omega_nom: float = 2 * math.pi * 60.0
    coupling_impedance: complex = 0j
    pi_kp: float = 0.0
    pi_ki: float = 0.0
    tau_m: float = 0.1

    @property
    def is_source(self) -> bool:
        return self.kind in (GFM, SYNC)


@dataclass
class NetworkModel:
    buses: list[Bus]
    lines: list[Line]
    loads: list[Load]
    devices: list[DeviceParams]
    base_power: float = 1e6
    base_frequency: float = 60.0
    v_set_limits: tuple[float, float] = (0.85, 1.15)
    p_set_limits: tuple[float, float] = (0.0, 1.0)
    emf_limits: tuple[float, float] = (0.5, 1.5)
    substeps: int = 1
    name: str = "network"
    _compiled: "CompiledNetwork | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    # -- structure ---------------------------------------------------------
    @property
    def microgrid_membership(self) -> dict[int, int]:
        return {b.id: b.microgrid for b in self.buses}

    @property
    def n_microgrids(self) -> int:
        return len({b.microgrid for b in self.buses})

    def microgrids(self) -> list[int]:
        return sorted({b.microgrid for b in self.buses})

    @property
    def sources(self) -> list[DeviceParams]:
        return [d for d in self.devices if d.is_source]

    @property
    def gfms(self) -> list[DeviceParams]:
        return [d for d in self.devices if d.kind == GFM]

    def gfm_buses(self) -> list[int]:
        return [d.bus for d in self.gfms]

    def gfm_of(self, k: int) -> DeviceParams:
        return next(d for d in self.gfms if self.microgrid_membership[d.bus] == k)

    def monitored_buses(self, k: int) -> list[int]:
        """GFM bus then GFL bus(es) of microgrid ``k``."""
        mem = self.microgrid_membership
        own = [d for d in self.devices if mem[d.bus] == k]
        return [d.bus for d in own if d.kind == GFM] + [d.bus for d in own if d.kind == GFL]

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        known = set(ids)
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
            if ln.impedance == 0:
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} has zero impedance")
        for ld in self.loads:
            if ld.bus not in known:
                raise ValueError(f"load references unknown bus {ld.bus}")
        for d in self.devices:
            if d.bus not in known:
                raise ValueError(f"{d.kind} references unknown bus {d.bus}")
            if d.kind not in (GFM, GFL, SYNC):
                raise ValueError(f"unknown device kind {d.kind!r}")
            if d.is_source and d.coupling_impedance == 0:
                raise ValueError(f"{d.kind} at bus {d.bus} needs a non-zero coupling impedance")
        if not self.sources:
            raise ValueError("network has no voltage source")
        # connectivity
        adj: dict[int, set[int]] = {i: set() for i in ids}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        seen, stack = {ids[0]}, [ids[0]]
        while stack:
            for nb in adj[stack.pop()] - seen:
                seen.add(nb)
                stack.append(nb)
        if seen != known:
            raise ValueError(f"network is not connected; unreachable buses {sorted(known - seen)}")
        mem = self.microgrid_membership
        for k in self.microgrids():
            n_gfm = sum(1 for d in self.gfms if mem[d.bus] == k)
            if n_gfm != 1 and len(self.gfms) > 0 and self.n_microgrids > 1:
                raise ValueError(f"microgrid {k} has {n_gfm} GFM units, expected exactly one")

    @property
    def compiled(self) -> "CompiledNetwork":
        if self._compiled is None:
            self._compiled = CompiledNetwork.build(self)
        return self._compiled


@dataclass
class CompiledNetwork:
    """Arrays consumed by the kernels; sources ordered as ``model.sources``."""
    Y: np.ndarray             # line admittances plus source Norton shunts
    Y_lines: np.ndarray
    S_inj: np.ndarray         # GFL injection minus load, per bus
    src_bus: np.ndarray       # bus index per source
    zc: np.ndarray
    is_gfm: np.ndarray
    m_p: np.ndarray
    tau: np.ndarray
    m_q: np.ndarray
    q_nom: np.ndarray
    kp: np.ndarray
    ki: np.ndarray
    p_base: np.ndarray
    v_base: np.ndarray
    gfm_src: np.ndarray       # source index of each GFM (GFM order)

    @classmethod
    def build(cls, model: NetworkModel) -> "CompiledNetwork":
        idx = model.bus_index()
        n = len(model.buses)
        Yl = np.zeros((n, n), dtype=np.complex128)
        for ln in model.lines:
            y = 1.0 / complex(ln.impedance)
            i, j = idx[ln.from_bus], idx[ln.to_bus]
            Yl[i, i] += y
            Yl[j, j] += y
            Yl[i, j] -= y
            Yl[j, i] -= y
        S = np.zeros(n, dtype=np.complex128)
        for ld in model.loads:
            S[idx[ld.bus]] -= complex(ld.p, ld.q)
        for d in model.devices:
            if d.kind == GFL:
                S[idx[d.bus]] += complex(d.p_set_base, d.q_nom)
        src = model.sources
        Y = Yl.copy()
        for d in src:
            Y[idx[d.bus], idx[d.bus]] += 1.0 / complex(d.coupling_impedance)
        arr = lambda f: np.array([f(d) for d in src], dtype=np.float64)
        return cls(
            Y=Y, Y_lines=Yl, S_inj=S,
            src_bus=np.array([idx[d.bus] for d in src], dtype=np.int64),
            zc=np.array([complex(d.coupling_impedance) for d in src], dtype=np.complex128),
            is_gfm=np.array([d.kind == GFM for d in src]),
            m_p=arr(lambda d: d.m_p), tau=arr(lambda d: d.tau_m),
            m_q=arr(lambda d: d.m_q), q_nom=arr(lambda d: d.q_nom),
            kp=arr(lambda d: d.pi_kp), ki=arr(lambda d: d.pi_ki),
            p_base=arr(lambda d: d.p_set_base), v_base=arr(lambda d: d.v_set_base),
            gfm_src=np.array([i for i, d in enumerate(src) if d.kind == GFM], dtype=np.int64),
        )


# --------------------------------------------------------------------------- #
# JSON network files
# --------------------------------------------------------------------------- #
def model_from_dict(data: dict) -> NetworkModel:
    f_nom = float(data.get("base_frequency_hz", 60.0))
    omega = 2 * math.pi * f_nom
    buses = [Bus(int(b["id"]), int(b["microgrid"]), float(b.get("nominal_voltage", 1.0))) for b in data["buses"]]
    lines = [Line(int(l["from"]), int(l["to"]), complex(l.get("r", 0.0), l["x"])) for l in data["lines"]]
    loads = [Load(int(l["bus"]), float(l["p"]), float(l["q"])) for l in data.get("loads", [])]
    devices = []
    for d in data["devices"]:
        kind = d["kind"].upper()
        rating = float(d["rating"])
        kw = dict(kind=kind, bus=int(d["bus"]), rating=rating, omega_nom=omega,
                  p_set_base=float(d.get("p_set", 0.0)))
        if kind in (GFM, SYNC):
            kw.update(
                m_p=float(d.get("freq_droop", 0.01)) * omega / rating,
                coupling_impedance=complex(d.get("r_c", 0.0), d["x_c"]),
                tau_m=float(d.get("tau_m", 0.1 if kind == GFM else 1.0)),
                v_set_base=float(d.get("v_set", 1.0)),
            )
        if kind == GFM:
            kw.update(m_q=float(d.get("volt_droop", 0.05)) / rating, q_nom=float(d.get("q_nom", 0.0)),
                      pi_kp=float(d.get("kp", 2.0)), pi_ki=float(d.get("ki", 10.0)))
        if kind == GFL:
            kw.update(q_nom=float(d.get("q_set", 0.0)))
        devices.append(DeviceParams(**kw))
    lim = data.get("setpoint_limits", {})
    return NetworkModel(
        buses=buses, lines=lines, loads=loads, devices=devices,
        base_power=float(data.get("base_power_va", 1e6)), base_frequency=f_nom,
        v_set_limits=tuple(lim.get("v", (0.85, 1.15))), p_set_limits=tuple(lim.get("p", (0.0, 1.0))),
        emf_limits=tuple(data.get("emf_limits", (0.5, 1.5))),
        substeps=int(data.get("substeps", 1)), name=data.get("name", "network"),
    )


def load_model(path: str | Path) -> NetworkModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def nm3() -> NetworkModel:
    """The bundled three-microgrid reference network."""
    text = resources.files("fedgrid.data").joinpath("nm3.json").read_text()
    return model_from_dict(json.loads(text))


# --------------------------------------------------------------------------- #
# droop laws and set-point composition
# --------------------------------------------------------------------------- #
def droop_frequency_ref(p_filtered: float, params: DeviceParams, p_set_effective: float) -> float:
    if params.kind not in (GFM, SYNC):
        raise ValueError("frequency droop applies to GFM and SYNC units only")
    return params.omega_nom - params.m_p * (p_filtered - p_set_effective)


def droop_voltage_ref(q_filtered: float, params: DeviceParams, v_set_effective: float) -> float:
    if params.kind != GFM:
        raise ValueError("voltage droop applies to GFM units only")
    return v_set_effective - params.m_q * (q_filtered - params.q_nom)


def compose_setpoint(base, attack, res, limits):
    """clamp(base + attack + res) with the correction added to the attack first.

    Summing ``attack + res`` first makes res = -attack cancel exactly.
    """
    lo, hi = limits
    if lo > hi:
        raise ValueError(f"empty limit interval {limits}")
    return np.clip(np.add(base, np.add(attack, res)), lo, hi)


@dataclass
class SetpointInputs:
    """Per-GFM set-point offsets, ordered as ``model.gfms``."""
    p_attack: np.ndarray
    v_attack: np.ndarray
    p_res: np.ndarray
    v_res: np.ndarray

    @classmethod
    def zeros(cls, n_gfm: int) -> "SetpointInputs":
        z = lambda: np.zeros(n_gfm)
        return cls(z(), z(), z(), z())


# --------------------------------------------------------------------------- #
# state
# --------------------------------------------------------------------------- #
@dataclass
class GridState:
    time: float
    bus_voltages: np.ndarray     # complex, per bus
    delta: np.ndarray            # per source, rad (centre-of-inertia frame)
    emf: np.ndarray              # per source
    p_filtered: np.ndarray       # per source
    q_filtered: np.ndarray       # per source
    pi_integrator: np.ndarray    # per GFM
    freq_deviation: float = 0.0  # rad/s, system frequency minus nominal

    def copy(self) -> "GridState":
        return replace(self, bus_voltages=self.bus_voltages.copy(), delta=self.delta.copy(),
                       emf=self.emf.copy(), p_filtered=self.p_filtered.copy(),
                       q_filtered=self.q_filtered.copy(), pi_integrator=self.pi_integrator.copy())

    def vector(self) -> np.ndarray:
        """All real state quantities concatenated (for change/finiteness checks)."""
        return np.concatenate([self.bus_voltages.real, self.bus_voltages.imag, self.delta, self.emf,
                               self.p_filtered, self.q_filtered, self.pi_integrator])

    def magnitudes(self, model: NetworkModel, bus_ids) -> np.ndarray:
        idx = model.bus_index()
        return np.abs(self.bus_voltages[[idx[b] for b in bus_ids]])


def _pack(cn: CompiledNetwork, st: GridState) -> np.ndarray:
    x_src = np.zeros(len(cn.src_bus))
    x_src[cn.gfm_src] = st.pi_integrator
    return np.concatenate([st.bus_voltages.real, st.bus_voltages.imag, st.delta,
                           st.p_filtered, st.q_filtered, x_src])


def solve_power_flow(model: NetworkModel, sources, pq_injections=None, v0=None, tol: float = PF_TOL,
                     max_iter: int = PF_MAX_ITER) -> np.ndarray:
    """Bus voltages for source EMFs ``sources`` (complex, ``model.sources`` order).

    ``pq_injections`` overrides the per-bus constant-power injection (positive =
    generation); by default loads and GFL units of the model are used.
    """
    cn = model.compiled
    n = len(model.buses)
    e = np.asarray(sources, dtype=np.complex128)
    if e.shape != (len(cn.src_bus),):
        raise ValueError(f"expected {len(cn.src_bus)} source phasors, got shape {e.shape}")
    I_src = np.zeros(n, dtype=np.complex128)
    np.add.at(I_src, cn.src_bus, e / cn.zc)
    S = cn.S_inj if pq_injections is None else np.asarray(pq_injections, dtype=np.complex128)
    V0 = np.ones(n, dtype=np.complex128) if v0 is None else np.asarray(v0, dtype=np.complex128)
    try:
        V, _, norm, status = kernels.newton_pf(cn.Y, I_src, S, V0, tol, max_iter)
    except np.linalg.LinAlgError:
        raise PowerFlowDivergence("singular power-flow Jacobian", float("inf")) from None
    if status != kernels.CONVERGED:
        raise PowerFlowDivergence("power flow did not converge", float(norm))
    return V


def source_powers(model: NetworkModel, state: GridState) -> tuple[np.ndarray, np.ndarray]:
    """Terminal (P, Q) delivered by each source into its bus."""
    cn = model.compiled
    vb = state.bus_voltages[cn.src_bus]
    s = vb * np.conj((state.emf * np.exp(1j * state.delta) - vb) / cn.zc)
    return s.real, s.imag


def line_losses(model: NetworkModel, V: np.ndarray) -> float:
    idx = model.bus_index()
    total = 0.0
    for ln in model.lines:
        i = (V[idx[ln.from_bus]] - V[idx[ln.to_bus]]) / complex(ln.impedance)
        total += (abs(i) ** 2 * complex(ln.impedance)).real
    return total


def _effective_setpoints(model: NetworkModel, inputs: SetpointInputs) -> tuple[np.ndarray, np.ndarray]:
    cn = model.compiled
    p_set = cn.p_base.copy()
    v_set = cn.v_base.copy()
    g = cn.gfm_src
    p_set[g] = compose_setpoint(cn.p_base[g], inputs.p_attack, inputs.p_res, model.p_set_limits)
    v_set[g] = compose_setpoint(cn.v_base[g], inputs.v_attack, inputs.v_res, model.v_set_limits)
    return p_set, v_set


def step_dynamics(model: NetworkModel, state: GridState, inputs: SetpointInputs, dt: float) -> GridState:
    """Advance controllers by one control interval and re-solve the network."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    cn = model.compiled
    p_set, v_set = _effective_setpoints(model, inputs)
    emf_fixed = np.where(cn.is_gfm, 0.0, state.emf)
    lo, hi = model.emf_limits
    e_min = np.full(len(cn.src_bus), lo)
    e_max = np.full(len(cn.src_bus), hi)
    z0 = _pack(cn, state)
    try:
        z, status, norm = kernels.implicit_step(
            z0, float(dt), int(model.substeps), cn.Y, cn.S_inj, cn.src_bus, cn.zc, cn.is_gfm, emf_fixed,
            cn.m_p, p_set, cn.tau, v_set, cn.m_q, cn.q_nom, cn.kp, cn.ki, e_min, e_max,
            DYN_TOL, DYN_MAX_ITER)
    except np.linalg.LinAlgError:
        raise PowerFlowDivergence("singular Jacobian in dynamics step", float("inf")) from None
    if status != kernels.CONVERGED:
        raise PowerFlowDivergence("dynamics/power-flow solve did not converge", float(norm))
    n, s = len(model.buses), len(cn.src_bus)
    V = z[:n] + 1j * z[n:2 * n]
    delta = z[2 * n:2 * n + s]
    pf = z[2 * n + s:2 * n + 2 * s]
    qf = z[2 * n + 2 * s:2 * n + 3 * s]
    x = z[2 * n + 3 * s:]
    emf, _, _ = kernels.source_emf(x, np.abs(V[cn.src_bus]), qf, cn.is_gfm, emf_fixed,
                                   v_set, cn.m_q, cn.q_nom, cn.kp, e_min, e_max)
    V = solve_power_flow(model, emf * np.exp(1j * delta), v0=V)
    dev = -cn.m_p * (pf - p_set)
    freq = float(np.sum(dev / cn.m_p) / np.sum(1.0 / cn.m_p))
    new = GridState(state.time + dt, V, delta, emf, pf, qf, x[cn.gfm_src].copy(), freq)
    if not np.all(np.isfinite(new.vector())):
        raise PowerFlowDivergence("non-finite state after dynamics step", float(norm))
    return new


def initial_guess(model: NetworkModel) -> GridState:
    cn = model.compiled
    s = len(cn.src_bus)
    emf = cn.v_base.copy()
    delta = np.zeros(s)
    V = solve_power_flow(model, emf.astype(np.complex128))
    st = GridState(0.0, V, delta, emf, np.zeros(s), np.zeros(s), emf[cn.gfm_src].copy())
    p, q = source_powers(model, st)
    st.p_filtered, st.q_filtered = p, q
    return st


def steady_state(model: NetworkModel, dt: float = 0.5, tol: float = 1e-12, max_steps: int = 5000) -> GridState:
    """Settle the unattacked grid; the returned state is a fixed point of ``step_dynamics``."""
    st = initial_guess(model)
    zero = SetpointInputs.zeros(len(model.gfms))
    for _ in range(max_steps):
        nxt = step_dynamics(model, st, zero, dt)
        change = float(np.max(np.abs(nxt.vector() - st.vector())))
        st = nxt
        if change < tol:
            st.time = 0.0
            return st
    raise RuntimeError(f"grid did not settle within {max_steps} steps (last change {change:.3e})")
