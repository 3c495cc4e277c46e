"""Timing harness for series multiplication, map composition and indexing.

Prints wall times across orders and parameter counts.  Numbers here are
machine-local; they are not acceptance targets.
"""

import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from beamkit import DaMap, Tpsa, descriptor

rng = np.random.default_rng(1)


def bench_mul(nv, mo, npar=0, po=0, reps=20):
    d = descriptor(nv, mo, npar, po)
    a, b = Tpsa(d), Tpsa(d)
    a.coef[:] = rng.normal(size=d.size)
    b.coef[:] = rng.normal(size=d.size)
    t0 = time.perf_counter()
    for _ in range(reps):
        a * b
    return (time.perf_counter() - t0) / reps, d.size


def bench_compose(nv, mo, reps=3):
    f = DaMap.identity(nv, mo)
    g = DaMap.identity(nv, mo)
    for m in (f, g):
        for row in m.rows:
            row.coef += rng.normal(scale=0.1, size=row.coef.size)
            row.coef[0] = 0.0
    t0 = time.perf_counter()
    for _ in range(reps):
        f.compose(g)
    return (time.perf_counter() - t0) / reps


def bench_index(nv, mo, npar, po, reps=20000):
    d = descriptor(nv, mo, npar, po)
    monos = [d.index_mono(i) for i in
             rng.integers(0, d.size, size=min(reps, d.size))]
    t0 = time.perf_counter()
    for m in monos:
        d.mono_index(m)
    return (time.perf_counter() - t0) / len(monos)


print(f"{'case':34s} {'size':>7s} {'time':>12s}")
for nv, mo in [(6, 2), (6, 4), (6, 5)]:
    dt, size = bench_mul(nv, mo)
    print(f"mul    nv={nv} mo={mo:<14d} {size:7d} {dt * 1e3:9.3f} ms")
for npar, po in [(8, 1), (32, 1), (32, 2)]:
    dt, size = bench_mul(6, 4, npar, po)
    print(f"mul    nv=6 mo=4 np={npar:<3d} po={po:<4d} {size:7d} {dt * 1e3:9.3f} ms")
for nv, mo in [(6, 2), (6, 4)]:
    dt = bench_compose(nv, mo)
    d = descriptor(nv, mo)
    print(f"compose nv={nv} mo={mo:<13d} {d.size:7d} {dt * 1e3:9.3f} ms")
for npar in (0, 32, 200):
    dt = bench_index(6, 2, npar, 1 if npar else 0)
    d = descriptor(6, 2, npar, 1 if npar else 0)
    print(f"index   nv=6 mo=2 np={npar:<9d} {d.size:7d} {dt * 1e6:9.3f} us")
