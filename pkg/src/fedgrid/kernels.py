"""Hot numeric kernels (numba-compiled unless ``FEDGRID_JIT=0``).

Everything here takes and returns plain arrays so the same source runs under
numba's nopython mode and under CPython/numpy.

Status codes returned by the solvers:
    0  converged
    1  iteration limit reached
    2  non-finite iterate or runaway mismatch
"""
from __future__ import annotations

import numpy as np

from ._jit import kernel

CONVERGED = 0
MAX_ITER = 1
BLOWUP = 2


# --------------------------------------------------------------------------- #
# power flow
# --------------------------------------------------------------------------- #
@kernel
def pf_mismatch(Y, I_src, S_inj, V):
    """Complex nodal power mismatch V * conj(Y V - I) - S."""
    return V * np.conj(np.dot(Y, V) - I_src) - S_inj


@kernel
def pf_jacobian(Y, I_src, V):
    """Real Jacobian of the mismatch w.r.t. rectangular coordinates [Re V, Im V]."""
    n = V.shape[0]
    i_net = np.dot(Y, V) - I_src
    # dF/de = diag(conj(i_net)) + diag(V) conj(Y);  dF/df = j diag(conj(i_net)) - j diag(V) conj(Y)
    a = V.reshape((n, 1)) * np.conj(Y)
    d = np.diag(np.conj(i_net))
    de = a + d
    df = 1j * (d - a)
    J = np.empty((2 * n, 2 * n))
    J[:n, :n] = de.real
    J[:n, n:] = df.real
    J[n:, :n] = de.imag
    J[n:, n:] = df.imag
    return J


@kernel
def newton_pf(Y, I_src, S_inj, V0, tol, max_iter):
    """Newton-Raphson on the complex nodal balance.

    Returns (V, iterations, max |mismatch|, status).
    """
    n = V0.shape[0]
    V = V0.copy()
    F = pf_mismatch(Y, I_src, S_inj, V)
    norm = np.max(np.abs(F))
    it = 0
    while it < max_iter:
        if not np.isfinite(norm) or norm > 1e8:
            return V, it, norm, BLOWUP
        if norm < tol:
            return V, it, norm, CONVERGED
        J = pf_jacobian(Y, I_src, V)
        rhs = np.empty(2 * n)
        rhs[:n] = -F.real
        rhs[n:] = -F.imag
        dx = np.linalg.solve(J, rhs)
        V = V + (dx[:n] + 1j * dx[n:])
        F = pf_mismatch(Y, I_src, S_inj, V)
        norm = np.max(np.abs(F))
        it += 1
    if np.isfinite(norm) and norm < tol:
        return V, it, norm, CONVERGED
    if not np.isfinite(norm):
        return V, it, norm, BLOWUP
    return V, it, norm, MAX_ITER


# --------------------------------------------------------------------------- #
# implicit (backward Euler) control-step dynamics
# --------------------------------------------------------------------------- #
@kernel
def source_emf(x, V_bus_abs, qf, is_gfm, emf_fixed, v_set, m_q, q_nom, kp, e_min, e_max):
    """Internal EMF of each source: PI output for GFM units, fixed value otherwise.

    Also returns the voltage error and the integrator rate gate (1 integrating,
    0 frozen by anti-windup).
    """
    s = x.shape[0]
    emf = np.empty(s)
    err = np.zeros(s)
    gate = np.zeros(s)
    for k in range(s):
        if is_gfm[k]:
            v_ref = v_set[k] - m_q[k] * (qf[k] - q_nom[k])
            e = v_ref - V_bus_abs[k]
            u = x[k] + kp[k] * e
            err[k] = e
            if u > e_max[k]:
                emf[k] = e_max[k]
                gate[k] = 0.0 if e > 0.0 else 1.0
            elif u < e_min[k]:
                emf[k] = e_min[k]
                gate[k] = 0.0 if e < 0.0 else 1.0
            else:
                emf[k] = u
                gate[k] = 1.0
        else:
            emf[k] = emf_fixed[k]
    return emf, err, gate


@kernel
def dyn_residual(z, old, h, Y, S_inj, src_bus, zc, is_gfm, emf_fixed,
                 m_p, p_set, tau, v_set, m_q, q_nom, kp, ki, e_min, e_max):
    """Backward-Euler residual for z = [Re V, Im V, delta, p_f, q_f, x]."""
    n = Y.shape[0]
    s = src_bus.shape[0]
    V = z[:n] + 1j * z[n:2 * n]
    delta = z[2 * n:2 * n + s]
    pf = z[2 * n + s:2 * n + 2 * s]
    qf = z[2 * n + 2 * s:2 * n + 3 * s]
    x = z[2 * n + 3 * s:2 * n + 4 * s]
    d0 = old[2 * n:2 * n + s]
    pf0 = old[2 * n + s:2 * n + 2 * s]
    qf0 = old[2 * n + 2 * s:2 * n + 3 * s]
    x0 = old[2 * n + 3 * s:2 * n + 4 * s]

    v_bus = np.empty(s, dtype=np.complex128)
    for k in range(s):
        v_bus[k] = V[src_bus[k]]
    emf, err, gate = source_emf(x, np.abs(v_bus), qf, is_gfm, emf_fixed,
                                v_set, m_q, q_nom, kp, e_min, e_max)
    e_src = emf * np.exp(1j * delta)
    I_src = np.zeros(n, dtype=np.complex128)
    for k in range(s):
        I_src[src_bus[k]] += e_src[k] / zc[k]
    F = V * np.conj(np.dot(Y, V) - I_src) - S_inj
    s_term = v_bus * np.conj((e_src - v_bus) / zc)

    r = np.empty(z.shape[0])
    r[:n] = F.real
    r[n:2 * n] = F.imag
    # frequency deviations in the centre-of-inertia frame (weights 1/m_P)
    dev = -m_p * (pf - p_set)
    coi = np.sum(dev / m_p) / np.sum(1.0 / m_p)
    r[2 * n:2 * n + s] = delta - d0 - h * (dev - coi)
    a = h / tau
    r[2 * n + s:2 * n + 2 * s] = pf * (1.0 + a) - pf0 - a * s_term.real
    r[2 * n + 2 * s:2 * n + 3 * s] = qf * (1.0 + a) - qf0 - a * s_term.imag
    r[2 * n + 3 * s:2 * n + 4 * s] = x - x0 - h * ki * err * gate
    return r


@kernel
def implicit_step(old, dt, n_sub, Y, S_inj, src_bus, zc, is_gfm, emf_fixed,
                  m_p, p_set, tau, v_set, m_q, q_nom, kp, ki, e_min, e_max,
                  tol, max_iter):
    """Advance the packed state by ``dt`` with ``n_sub`` backward-Euler substeps.

    Newton with a forward-difference Jacobian; the iterate starts at the old
    state, so a fixed point is returned unchanged. Returns (z, status, norm).
    """
    m = old.shape[0]
    h = dt / n_sub
    z = old.copy()
    norm = 0.0
    for _ in range(n_sub):
        base = z.copy()
        r = dyn_residual(z, base, h, Y, S_inj, src_bus, zc, is_gfm, emf_fixed,
                         m_p, p_set, tau, v_set, m_q, q_nom, kp, ki, e_min, e_max)
        norm = np.max(np.abs(r))
        it = 0
        while norm >= tol:
            if it >= max_iter:
                return z, MAX_ITER, norm
            if not np.isfinite(norm) or norm > 1e8:
                return z, BLOWUP, norm
            J = np.empty((m, m))
            for j in range(m):
                step = 1e-7 * max(1.0, abs(z[j]))
                zp = z.copy()
                zp[j] += step
                rp = dyn_residual(zp, base, h, Y, S_inj, src_bus, zc, is_gfm, emf_fixed,
                                  m_p, p_set, tau, v_set, m_q, q_nom, kp, ki, e_min, e_max)
                J[:, j] = (rp - r) / step
            dz = np.linalg.solve(J, -r)
            z = z + dz
            r = dyn_residual(z, base, h, Y, S_inj, src_bus, zc, is_gfm, emf_fixed,
                             m_p, p_set, tau, v_set, m_q, q_nom, kp, ki, e_min, e_max)
            norm = np.max(np.abs(r))
            it += 1
            if np.max(np.abs(dz)) < 1e-15:
                break
        if not np.isfinite(norm):
            return z, BLOWUP, norm
    return z, CONVERGED, norm


# --------------------------------------------------------------------------- #
# optimizer / parameter-mixing kernels
# --------------------------------------------------------------------------- #
@kernel
def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place bias-corrected Adam step (t is the already-incremented step count)."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@kernel
def polyak_mix(target, online, rho):
    """In-place target <- (1 - rho) * target + rho * online."""
    target *= 1.0 - rho
    target += rho * online
