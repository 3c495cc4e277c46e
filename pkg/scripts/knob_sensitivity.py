"""Parametric knob workflow: link knobs, read exact derivatives, restore.

Binds quadrupole and sextupole strengths to map parameters, computes the
tune and f3000 sensitivities from a single parametric normal form, and
cross-checks one of them against scalar finite differences.
"""

import math
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from beamkit import (Beam, BLine, DaMap, Element, Env, Repeat, cofind,
                     env_bind_knobs, env_restore_knobs, normal, seq_from_line)
from beamkit.lattice import Deferred

env = Env()
env["kqf"] = 0.29601
env["kqd"] = -0.30242
env["ksx"] = 0.25

nc = 4
qf = Element("qf", "quadrupole", l=1.0, at=0.0)
qf.attrs["k1"] = Deferred(lambda: env["kqf"], "kqf")
mb1 = Element("mb1", "sbend", l=2.0, angle=math.pi / nc, at=2.0)
qd = Element("qd", "quadrupole", l=1.0, at=5.0)
qd.attrs["k1"] = Deferred(lambda: env["kqd"], "kqd")
mb2 = Element("mb2", "sbend", l=2.0, angle=math.pi / nc, at=7.0)
sx = Element("sx", "multipole", at=1.5)
sx.attrs["knl"] = Deferred(lambda: [0.0, 0.0, env["ksx"]], "{0,0,ksx}")
cell = BLine([qf, sx, mb1, qd, mb2], "cell")
ring = seq_from_line("ring", [Repeat(nc, cell)], refer="entry",
                     beam=Beam.make("proton", energy=450.0))

prms = ["kqf", "kqd", "ksx"]


def get_nf(X0=None, order=3):
    co = cofind(ring, X0=X0, order=order)
    m0 = co.map.copy()
    for i in range(6):
        m0.rows[i].coef[0] -= co.orbit[i]
    return normal(m0)


t0 = time.time()
X0 = DaMap.identity(6, 4, len(prms), 1, prms)
env_bind_knobs(env, prms, X0)
nf = get_nf(X0=X0)
env_restore_knobs(env, prms)
print(f"parametric normal form in {time.time() - t0:.1f} s; "
      f"tunes q1={nf.q1(1):.6f} q2={nf.q2(1):.6f}")

print(f"{'knob':8s} {'dq1/dk':>12s} {'dq2/dk':>12s} {'d f3000/dk':>24s}")
for k, name in enumerate(prms, 1):
    g = nf.gnfu("3000", k)
    print(f"{name:8s} {nf.q1(1, k):12.6f} {nf.q2(1, k):12.6f} "
          f"{g.real:12.6f}{g.imag:+12.6f}i")

h = 1e-6
env["kqf"] = env["kqf"] + h
qp = get_nf().tunes[0]
env["kqf"] = env["kqf"] - 2 * h
qm = get_nf().tunes[0]
env["kqf"] = env["kqf"] + h
print(f"\ncheck dq1/dkqf: exact {nf.q1(1, 1):.8f} "
      f"vs finite difference {(qp - qm) / (2 * h):.8f}")
