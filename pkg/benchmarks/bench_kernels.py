"""Time each hot kernel on its numba path and its numpy path.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Compilation happens once before timing (and is cached on disk afterwards).
Reports the median wall time per call and the numpy/numba ratio.
"""

from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np

from hflab import _accel
from hflab.features import N_FEATURES
from hflab.kernels import lstm_backward, lstm_forward, normalize_windows, scan_entries


def _cases(rng):
    rows = rng.standard_normal((20_000, N_FEATURES))
    ends = np.arange(99, 20_000, 4)
    xw = rng.standard_normal((64, 100, 64)).astype(np.float32)
    wh = (rng.standard_normal((16, 64)) * 0.25).astype(np.float32)
    _accel.use_numba(False)
    _, cs, acts = lstm_forward(xw, wh)
    dhs = rng.standard_normal((64, 100, 16)).astype(np.float32)
    side = rng.choice(np.array([-1, 0, 0, 0, 1], dtype=np.int8), size=200_000)
    return {
        "normalize_windows 5k x 100 x 38": lambda: normalize_windows(rows, ends, 100),
        "lstm_forward B64 L100 H16": lambda: lstm_forward(xw, wh),
        "lstm_backward B64 L100 H16": lambda: lstm_backward(dhs, cs, acts, wh),
        "scan_entries 200k ticks": lambda: scan_entries(side, 30),
    }


def _median_time(fn, repeat: int) -> float:
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run(repeat: int = 5) -> list[dict]:
    prev = _accel.numba_enabled()
    cases = _cases(np.random.default_rng(0))
    out = []
    try:
        for name, fn in cases.items():
            row = {"kernel": name}
            for label, flag in (("numba_s", True), ("numpy_s", False)):
                _accel.use_numba(flag)
                row[label] = _median_time(fn, repeat)
            row["speedup"] = row["numpy_s"] / row["numba_s"]
            out.append(row)
    finally:
        _accel.use_numba(prev)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = run(args.repeat)
    print(f"{'kernel':34s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'numpy/numba':>12s}")
    for r in rows:
        print(f"{r['kernel']:34s} {1e3 * r['numba_s']:11.2f} {1e3 * r['numpy_s']:11.2f} {r['speedup']:12.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
