"""Time the hot kernels with numba on and off.

Each mode runs in its own interpreter (``FEDGRID_JIT`` is read at import),
reports per-call timings plus result fingerprints, and the parent prints a
comparison table. JIT compile time is measured separately from steady-state
call time.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def worker(repeat: int) -> dict:
    t0 = time.perf_counter()
    from fedgrid import _jit, grid, kernels, nn

    model = grid.nm3()
    t_import = time.perf_counter() - t0

    t0 = time.perf_counter()
    ss = grid.steady_state(model)
    t_first = time.perf_counter() - t0

    inputs = grid.SetpointInputs.zeros(len(model.gfms))
    inputs.v_attack[:] = -0.1

    def dyn():
        st = ss
        for _ in range(20):
            st = grid.step_dynamics(model, st, inputs, 0.5)
        return st

    end = dyn()
    sources = ss.emf * np.exp(1j * ss.delta)

    def pf():
        return grid.solve_power_flow(model, sources)

    rng = np.random.default_rng(0)
    p = rng.standard_normal(4673)
    g = rng.standard_normal(4673)
    m = np.zeros(4673)
    v = np.zeros(4673)

    def adam():
        for t in range(1, 101):
            kernels.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, float(t))

    net = nn.mlp_init([7, 64, 64, 1], 0)
    X = rng.standard_normal((64, 7))

    def backprop():
        for _ in range(20):
            nn.mlp_backward(net, X, np.ones((64, 1)))

    timings = {
        "step_dynamics x20": _best(dyn, repeat),
        "solve_power_flow": _best(pf, repeat),
        "adam_update x100": _best(adam, repeat),
        "mlp_backward x20 (numpy in both, control)": _best(backprop, repeat),
    }
    return {
        "jit": _jit.USE_JIT,
        "import_s": t_import,
        "first_steady_state_s": t_first,
        "timings_s": timings,
        "fingerprint": {
            "steady_state_V": [float(x) for x in np.abs(ss.bus_voltages)],
            "attacked_V": [float(x) for x in np.abs(end.bus_voltages)],
        },
    }


def run_mode(flag: str, repeat: int) -> dict:
    env = {**os.environ, "FEDGRID_JIT": flag}
    out = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    ap.add_argument("--json", help="also write the raw results here")
    args = ap.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return 0
    jit = run_mode("1", args.repeat)
    ref = run_mode("0", args.repeat)
    print(f"{'kernel':40s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speedup':>9s}")
    for name, t_ref in ref["timings_s"].items():
        t_jit = jit["timings_s"][name]
        print(f"{name:40s} {t_jit * 1e3:12.3f} {t_ref * 1e3:12.3f} {t_ref / t_jit:9.1f}x")
    print(f"first steady state (includes compile/cache load): numba {jit['first_steady_state_s']:.2f} s, "
          f"numpy {ref['first_steady_state_s']:.2f} s")
    diffs = [max(abs(a - b) for a, b in zip(jit["fingerprint"][k], ref["fingerprint"][k]))
             for k in jit["fingerprint"]]
    print(f"max |V| difference between modes: {max(diffs):.3e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": jit, "numpy": ref}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
