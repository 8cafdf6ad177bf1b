"""Small hand-built networks with closed-form answers."""
from __future__ import annotations

import math

from fedgrid import grid


def source_load_model(x_coupling: float, line_x: float | None, p: float, q: float = 0.0) -> grid.NetworkModel:
    """Fixed-EMF source behind ``x_coupling``; the load sits at the source bus or behind ``line_x``."""
    buses = [grid.Bus(1, 1)]
    lines = []
    load_bus = 1
    if line_x is not None:
        buses.append(grid.Bus(2, 1))
        lines.append(grid.Line(1, 2, complex(0.0, line_x)))
        load_bus = 2
    src = grid.DeviceParams(kind=grid.SYNC, bus=1, rating=1.0, m_p=1.0, v_set_base=1.0,
                            coupling_impedance=complex(0.0, x_coupling), tau_m=1.0)
    return grid.NetworkModel(buses, lines, [grid.Load(load_bus, p, q)], [src])


def two_bus_voltage(p: float, x: float, e: float = 1.0) -> float:
    """Load-bus |V| for a unity power-factor load fed through reactance x (high-voltage root)."""
    disc = e**4 - 4.0 * p * p * x * x
    return math.sqrt((e * e + math.sqrt(disc)) / 2.0)


def symmetric_gfm_model(load_p: float = 0.8, load_q: float = 0.2) -> grid.NetworkModel:
    """Two identical GFMs feeding one load bus over identical lines."""
    buses = [grid.Bus(1, 1), grid.Bus(2, 1), grid.Bus(3, 1)]
    lines = [grid.Line(1, 3, 0.02 + 0.1j), grid.Line(2, 3, 0.02 + 0.1j)]
    omega = 2 * math.pi * 60.0
    gfm = lambda b: grid.DeviceParams(kind=grid.GFM, bus=b, rating=0.6, m_p=0.01 * omega / 0.6, m_q=0.05 / 0.6,
                                      p_set_base=0.3, v_set_base=1.02, coupling_impedance=0.05j,
                                      pi_kp=2.0, pi_ki=10.0, tau_m=0.1)
    return grid.NetworkModel(buses, lines, [grid.Load(3, load_p, load_q)], [gfm(1), gfm(2)])
