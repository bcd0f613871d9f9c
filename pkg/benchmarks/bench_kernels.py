"""Benchmark the compiled kernels against the numpy fallback.

Two views: raw per-call kernel timings across vehicle counts, and an
end-to-end scenario run under each backend (the backend is selected at
import time, so the whole-run comparison uses subprocesses with
COMAL_PURE_PYTHON toggled).

Run:  python benchmarks/bench_kernels.py
"""
import os
import subprocess
import sys
import time

import numpy as np

from comal.kernels import _numpy as kp

try:
    from comal.kernels import _native as kn
except ImportError:
    kn = None


def time_call(fn, *args, repeat=2000):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def bench_kernels():
    print(f"{'n':>6} {'kernel':<16} {'numpy':>12} {'native':>12} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for n in (22, 200, 2000):
        v = rng.uniform(0, 30, n)
        dv = rng.uniform(-5, 5, n)
        gap = rng.uniform(0.5, 200, n)
        pars = [np.full(n, x) for x in (30.0, 1.0, 1.0, 1.5, 4.0, 2.0)]
        rows = [
            ("idm_acceleration",
             lambda impl: impl.idm_acceleration(v, dv, gap, *pars)),
            ("safe_speed",
             lambda impl: impl.safe_speed(gap, v - dv, 0.1, 4.5)),
        ]
        for name, call in rows:
            t_py = time_call(lambda: call(kp))
            if kn is not None:
                t_na = time_call(lambda: call(kn))
                print(f"{n:>6} {name:<16} {t_py * 1e6:>10.2f}us {t_na * 1e6:>10.2f}us "
                      f"{t_py / t_na:>7.1f}x")
            else:
                print(f"{n:>6} {name:<16} {t_py * 1e6:>10.2f}us {'n/a':>12} {'':>8}")


SCENARIO_SNIPPET = r"""
import time
from comal import harness, scenario
from comal import kernels
cfg = scenario.find("Ring 0").replace(seed=0)
t0 = time.perf_counter()
result = harness.run(cfg, keep_samples=False)
print(f"{kernels.BACKEND}: {time.perf_counter() - t0:.3f}s "
      f"(avg {result.avg_speed:.3f} m/s)")
"""


def bench_scenario():
    print("\nRing 0 (150 s, 22 vehicles) end to end:")
    for pure in ("0", "1"):
        env = dict(os.environ, COMAL_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", SCENARIO_SNIPPET], env=env,
                             capture_output=True, text=True)
        print("  " + (out.stdout.strip() or out.stderr.strip()))


if __name__ == "__main__":
    if kn is None:
        print("native kernels not built; showing the numpy fallback only\n")
    bench_kernels()
    bench_scenario()
