"""Acceptance suite: one test per criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
pass/fail lines.
"""

import glob
import math
import os
import time

import numpy as np
import pytest

from beamkit.damap import DaMap
from beamkit.engine import MFlow, TrackState, track, track_element, survey
from beamkit.geom import patch_restore, rot_from_angles
from beamkit.lattice import (Element, Env, build_sequence, env_bind_knobs,
                             env_restore_knobs)
from beamkit.latparse import load_file, parse, unparse
from beamkit.matching import Equality, Variable, match
from beamkit.mtable import MTable
from beamkit.optics import cofind, normal, twiss
from beamkit.protocol import (FrameDecoder, encode_done, encode_num,
                              encode_str, encode_tbl, encode_vec)
from beamkit.tpsa import Tpsa, analytic, descriptor
from lattices import BEAM, fodo_knob_env, fodo_ring, knob_ring, nonlinear_ring
from oracles import cs_from_matrix, mul_convolution, symplectic_error

import test_engine


def report(name: str, ok: bool = True, detail: str = ""):
    tag = "PASS" if ok else "FAIL"
    print(f"[{tag}] {name}" + (f"  ({detail})" if detail else ""))


def rand_descriptor(rng):
    nv = int(rng.integers(1, 7))
    mo = int(rng.integers(1, 6))
    npar = int(rng.choice([0, 0, 1, 2, 3, 8, 32]))
    po = int(rng.integers(1, min(mo, 2) + 1)) if npar else 0
    return descriptor(nv, mo, npar, po)


def sparse_tpsa(d, rng, nterms=15, scale=0.5):
    t = Tpsa(d)
    idx = rng.integers(0, d.size, size=min(nterms, d.size))
    t.coef[idx] = rng.normal(scale=scale, size=len(idx))
    return t


def as_dict(t):
    d = t.desc
    return {tuple(int(x) for x in d.exps[i]): t.coef[i]
            for i in np.nonzero(t.coef)[0]}


def test_acceptance_gtpsa_oracle_equivalence():
    """mul/compose/analytic vs brute-force oracles, 200 cases, < 60 s."""
    rng = np.random.default_rng(2024)
    t0 = time.time()
    cases = 0

    # 100 multiplications vs direct convolution
    for _ in range(100):
        d = rand_descriptor(rng)
        a, b = sparse_tpsa(d, rng), sparse_tpsa(d, rng)
        got = as_dict(a * b)
        ref = mul_convolution(d.nv, d.mo, d.np, d.po, as_dict(a), as_dict(b))
        for k in set(got) | set(ref):
            assert abs(got.get(k, 0.0) - ref.get(k, 0.0)) < 1e-10
        cases += 1

    # 50 compositions vs pointwise evaluation at small amplitudes
    for _ in range(50):
        nv = int(rng.integers(2, 7))
        mo = int(rng.integers(1, 5))
        d = descriptor(nv, mo)
        f = DaMap.identity(nv, mo)
        g = DaMap.identity(nv, mo)
        for m_ in (f, g):
            for row in m_.rows:
                extra = rng.normal(scale=0.3, size=d.size)
                extra[0] = 0.0
                row.coef += extra
        fg = f.compose(g)
        # amplitude scaled so dropped beyond-truncation cross terms stay
        # below the 1e-10 comparison tolerance
        amp = min(1e-3, 0.05 * (1e-10) ** (1.0 / (mo + 1)))
        for _ in range(3):
            p = rng.normal(scale=amp, size=nv)
            assert np.abs(fg.eval(p) - f.eval(g.eval(p))).max() < 1e-10
        cases += 1

    # 50 analytic applications vs pointwise evaluation
    tags = ["inv", "sqrt", "exp", "log", "sin", "cos"]
    import math as _m
    fns = {"inv": lambda x: 1 / x, "sqrt": _m.sqrt, "exp": _m.exp,
           "log": _m.log, "sin": _m.sin, "cos": _m.cos}
    for i in range(50):
        nv = int(rng.integers(1, 5))
        mo = int(rng.integers(1, 6))
        d = descriptor(nv, mo)
        tag = tags[i % len(tags)]
        a = sparse_tpsa(d, rng, nterms=6, scale=0.2)
        a.coef[0] = 1.2 + 0.3 * rng.random()
        fa = analytic(tag, a)
        amp = min(3e-3, 0.25 * (1e-11) ** (1.0 / (mo + 1)))
        for _ in range(3):
            p = rng.normal(scale=amp, size=nv)
            assert abs(fa.eval(p) - fns[tag](a.eval(p))) < 1e-10
        cases += 1

    dt = time.time() - t0
    assert cases == 200
    assert dt < 60.0
    report("GTPSA oracle equivalence (200 cases)", detail=f"{dt:.1f}s")


def test_acceptance_size_combinatorics_operands():
    """Coefficient counts entering the FD-vs-parametric cost comparison."""
    assert descriptor(6, 4).size == 210
    assert descriptor(6, 5).size == 462
    assert descriptor(6, 4).size * 6 == 1260
    assert descriptor(6, 5).size * 6 == 2772
    report("size combinatorics operands 1260 / 2772")


@pytest.mark.xfail(strict=True, reason=(
    "1260*33/(2772+1260*32) = 0.964912 differs from the rounded target "
    "0.97 by 0.005088, just outside the 0.005 tolerance"))
def test_acceptance_size_ratio_against_rounded_value():
    fd_cost = 1260 * 33
    par_cost = 2772 + 1260 * 32
    ratio = fd_cost / par_cost
    report("cost ratio vs rounded 0.97", ok=False,
           detail=f"ratio={ratio:.6f}, |diff|={abs(ratio - 0.97):.6f}")
    assert abs(ratio - 0.97) <= 0.005


def test_acceptance_patch_formulas():
    """1000 randomized frame-chain restorations within 1e-10."""
    rng = np.random.default_rng(7)
    for _ in range(1000):
        W = rot_from_angles(*rng.normal(scale=0.5, size=3))
        R = rot_from_angles(*rng.normal(scale=0.4, size=3))
        V = rng.normal(size=3)
        T = rng.normal(size=3)
        Tb, Rb = patch_restore(W, R, V, T)
        V_mis = R @ V + T
        W_mis = R @ W
        assert np.abs(V + W @ Tb - V_mis).max() < 1e-10
        assert np.abs(W @ Rb - W_mis).max() < 1e-10
        assert np.abs(V_mis + W_mis @ (-Rb.T @ Tb) - V).max() < 1e-10
        assert np.abs(W_mis @ Rb.T - W).max() < 1e-10
    report("patch restoration formulas (1000 random chains)")


def test_acceptance_symplecticity_suite():
    """J^T S J = S within 1e-8 for every element kind x 20 parameter sets."""
    rng = np.random.default_rng(11)
    beams = [test_engine.Beam.make("proton", pc=1e5),
             test_engine.Beam.make("proton", energy=2.0)]
    worst = 0.0
    for maker in _element_makers():
        for _ in range(20):
            e = maker(rng)
            for beam in beams:
                m = test_engine.element_map(
                    e, beam=beam,
                    orbit=np.array([1e-3, 2e-4, -1e-3, 1e-4, 0.0, 1e-3]))
                _, R = m.extract()
                worst = max(worst, symplectic_error(R))
                assert symplectic_error(R) < 1e-8
    report("symplecticity, all element kinds x 20 random sets",
           detail=f"worst {worst:.2e}")


def _element_makers():
    def r(rng, lo, hi):
        return float(rng.uniform(lo, hi))

    return [
        lambda rng: Element("mk", "marker"),
        lambda rng: Element("d", "drift", l=r(rng, 0.1, 3)),
        lambda rng: Element("sb", "sbend", l=r(rng, 0.5, 3),
                            angle=r(rng, -0.3, 0.3) or 0.1),
        lambda rng: Element("sbk", "sbend", l=r(rng, 0.5, 3),
                            angle=r(rng, 0.05, 0.3), k1=r(rng, -0.3, 0.3),
                            k2=r(rng, -0.5, 0.5), nst=4),
        lambda rng: Element("rb", "rbend", l=r(rng, 0.5, 3),
                            angle=r(rng, 0.05, 0.3)),
        lambda rng: Element("q", "quadrupole", l=r(rng, 0.2, 2),
                            k1=r(rng, -0.5, 0.5)),
        lambda rng: Element("sx", "sextupole", l=r(rng, 0.1, 1),
                            k2=r(rng, -2, 2)),
        lambda rng: Element("oc", "octupole", l=r(rng, 0.1, 1),
                            k3=r(rng, -20, 20)),
        lambda rng: Element("mp", "multipole",
                            knl=[r(rng, -1e-4, 1e-4), r(rng, -0.3, 0.3),
                                 r(rng, -1, 1)],
                            ksl=[0.0, r(rng, -0.1, 0.1)]),
        lambda rng: Element("hk", "hkicker", kick=r(rng, -1e-3, 1e-3)),
        lambda rng: Element("vk", "vkicker", kick=r(rng, -1e-3, 1e-3),
                            l=r(rng, 0, 0.5)),
        lambda rng: Element("mo", "monitor", l=r(rng, 0, 0.3)),
        lambda rng: Element("cv", "rfcavity", volt=r(rng, 0.1, 5),
                            freq=r(rng, 100, 800), lag=r(rng, 0, 1)),
        lambda rng: Element("tr", "translation", dx=r(rng, -5e-3, 5e-3),
                            dy=r(rng, -5e-3, 5e-3), ds=r(rng, -5e-3, 5e-3)),
        lambda rng: Element("ro", "rotation", dtheta=r(rng, -5e-3, 5e-3),
                            dphi=r(rng, -5e-3, 5e-3), dpsi=r(rng, -0.2, 0.2)),
        lambda rng: Element("mis", "quadrupole", l=1.0, k1=r(rng, -0.4, 0.4),
                            tilt=r(rng, -0.2, 0.2), dx=r(rng, -2e-3, 2e-3),
                            dy=r(rng, -2e-3, 2e-3), dpsi=r(rng, -0.1, 0.1)),
    ]


def test_acceptance_survey_closure():
    """25-cell FODO ring closure: 1e-8 m in position, 1e-10 rad."""
    sv = survey(fodo_ring())
    dpos = float(np.abs([sv.x[-1], sv.y[-1], sv.z[-1]]).max())
    th = sv.theta[-1]
    th = th - 2 * math.pi * round(th / (2 * math.pi))
    dang = float(np.abs([th, sv.phi[-1], sv.psi[-1]]).max())
    assert dpos < 1e-8
    assert dang < 1e-10
    report("survey closure of the 25-cell FODO ring",
           detail=f"pos {dpos:.1e} m, ang {dang:.1e} rad")


def test_acceptance_twiss_correctness():
    """beta/mu/tunes vs eigen-analysis within 1e-8 rel; dq vs FD within 1e-4."""
    ring = fodo_ring()
    tw = twiss(ring, mapdef=2)
    _, R = cofind(ring).map.extract()
    bx, ax, qx = cs_from_matrix(R[:2, :2])
    by, ay, qy = cs_from_matrix(R[2:4, 2:4])
    assert tw.beta11[0] == pytest.approx(bx, rel=1e-8)
    assert tw.beta22[0] == pytest.approx(by, rel=1e-8)
    assert tw.alfa11[0] == pytest.approx(ax, rel=1e-8)
    assert tw.alfa22[0] == pytest.approx(ay, rel=1e-8)
    assert (tw.header["q1"] % 1) == pytest.approx(qx, rel=1e-8)
    assert (tw.header["q2"] % 1) == pytest.approx(qy, rel=1e-8)
    # mu advances by the cell phase every 9 m cell
    ncells = 25
    assert tw.mu1[-1] == pytest.approx(tw.header["q1"], rel=1e-12)

    def q_at(dpt):
        t = twiss(ring, guess=[0, 0, 0, 0, 0, dpt])
        return t.header["q1"], t.header["q2"]

    h = 1e-6
    (q1p, q2p), (q1m, q2m) = q_at(h), q_at(-h)
    fd1 = (q1p - q1m) / (2 * h)
    fd2 = (q2p - q2m) / (2 * h)
    assert tw.header["dq1"] == pytest.approx(fd1, abs=1e-4)
    assert tw.header["dq2"] == pytest.approx(fd2, abs=1e-4)
    report("twiss vs eigen-analysis and chromaticity FD",
           detail=f"dq1 {tw.header['dq1']:.4f} (fd {fd1:.4f})")


def test_acceptance_normal_form_self_consistency():
    """a.r.a^-1 vs m within 1e-9; detuning vs 512-turn tracking within 5%."""
    ring = nonlinear_ring()
    co = cofind(ring, order=4)
    m0 = co.map.copy()
    for i in range(6):
        m0.rows[i].coef[0] -= co.orbit[i]
    nf = normal(m0)
    resid = nf.check_factorization()
    assert resid < 1e-9

    anhx = nf.anhx(1, 0)
    _, A = nf.a.extract()
    Ainv = np.linalg.inv(A)

    def tracked_q_and_j(xhat, nturn=512):
        z0 = co.orbit + A @ np.array([xhat, 0.0, 1e-9, 0.0, 0.0, 0.0])
        tbl, _ = track(ring, [z0], nturn=nturn, observe="end")
        dz = np.vstack([tbl.x - co.orbit[0], tbl.px - co.orbit[1],
                        tbl.y - co.orbit[2], tbl.py - co.orbit[3],
                        tbl.t - co.orbit[4], tbl.pt - co.orbit[5]])
        zn = Ainv @ dz
        h = zn[0] - 1j * zn[1]
        ph = np.unwrap(np.angle(h))
        # least-squares phase slope averages out the nonlinear wobble of
        # the phasor signal (endpoint differences bias the tiny shifts)
        q = (np.polyfit(np.arange(len(ph)), ph, 1)[0] / (2 * math.pi)) % 1.0
        J = float(np.mean((zn[0] ** 2 + zn[1] ** 2) / 2))
        return q, J

    qs, js = zip(*[tracked_q_and_j(x) for x in (0.5e-3, 1.0e-3, 1.5e-3)])
    slope = np.polyfit(js, qs, 1)[0]
    rel = abs(slope - anhx) / abs(slope)
    assert rel < 0.05
    report("normal-form factorization + amplitude detuning vs tracking",
           detail=f"resid {resid:.1e}, anhx {anhx:.3f} vs slope {slope:.3f} "
                  f"({100 * rel:.2f}%)")


def test_acceptance_parametric_exactness():
    """q1{1,k}, gnfu{label,k} vs knob FD within 1e-5 rel; call accounting."""
    env, ring = knob_ring()
    prms = ["kqf", "kqd", "ksx"]
    X0 = DaMap.identity(6, 4, 3, 1, prms)
    env_bind_knobs(env, prms, X0)
    co = cofind(ring, X0=X0)
    m0 = co.map.copy()
    for i in range(6):
        m0.rows[i].coef[0] -= co.orbit[i]
    nf = normal(m0)
    dq1 = [nf.q1(1, k) for k in (1, 2, 3)]
    gk = [nf.gnfu("3000", k) for k in (1, 2, 3)]
    env_restore_knobs(env, prms)

    def scalar_nf(which, dk):
        env[which] = env[which] + dk
        try:
            co2 = cofind(ring, order=3)
            mm = co2.map.copy()
            for i in range(6):
                mm.rows[i].coef[0] -= co2.orbit[i]
            return normal(mm)
        finally:
            env[which] = env[which] - dk

    h = 1e-6
    for k, name in enumerate(prms, 1):
        np_, nm_ = scalar_nf(name, h), scalar_nf(name, -h)
        fdq = (np_.tunes[0] - nm_.tunes[0]) / (2 * h)
        fdg = (np_.gnfu("3000") - nm_.gnfu("3000")) / (2 * h)
        if abs(fdq) > 1e-9:
            assert abs(dq1[k - 1] - fdq) / abs(fdq) < 1e-5
        else:
            assert abs(dq1[k - 1]) < 1e-8
        assert abs(gk[k - 1] - fdg) / abs(fdg) < 1e-5

    # call accounting: jacobian callback = 1 command call per iteration,
    # finite differences = 1 + nvars
    A = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.2, 1.5]])
    b = np.array([1.0, 2.0, -1.0])
    x = np.zeros(3)
    mk_vars = lambda: [Variable(f"x{i}", get=(lambda i=i: x[i]),
                                set=(lambda v, i=i: x.__setitem__(i, v)))
                       for i in range(3)]
    eqs = [Equality(f"c{i}", (lambda c, i=i: c[i])) for i in range(3)]
    x[:] = 0
    res = match(lambda: A @ x - b, mk_vars(), eqs, jacobian=lambda ctx: A,
                fmin=1e-12)
    assert res.calls == 1 + res.iterations
    x[:] = 0
    res_fd = match(lambda: A @ x - b, mk_vars(), eqs, fmin=1e-9)
    assert res_fd.calls == 1 + res_fd.iterations * (1 + 3)
    report("parametric exactness + call accounting",
           detail=f"jacobian {res.calls} calls/{res.iterations} iters, "
                  f"fd {res_fd.calls} calls/{res_fd.iterations} iters")


def test_acceptance_match_tunes():
    """Tune matching converges to |dq| < 2.5e-3 within 100 calls; verbatim
    summary table headers."""
    env, ring = fodo_knob_env()
    base = twiss(ring)
    t1 = round(base.header["q1"]) + 0.31
    t2 = round(base.header["q2"]) + 0.32

    res = match(lambda: twiss(ring),
                [dict(name="kqf", env=env, key="kqf", rtol=1e-6),
                 dict(name="kqd", env=env, key="kqd", rtol=1e-6)],
                [dict(name="q1", expr=lambda t: t.header["q1"] - t1),
                 dict(name="q2", expr=lambda t: t.header["q2"] - t2)],
                tol=2.5e-3, fmin=2e-3, maxcall=100)
    assert res.status == "converged"
    assert res.calls <= 100
    final = twiss(ring)
    assert abs(final.header["q1"] - t1) < 2.5e-3
    assert abs(final.header["q2"] - t2) < 2.5e-3
    lines = res.summary.split("\n")
    assert lines[0] == "Constraints  Type         Kind         Weight     Penalty Value"
    assert "Variables    Final Value  Init. Value  Lower Limit  Upper Limit" in lines
    report("tune matching", detail=f"{res.calls} calls, |dq| < 2.5e-3")


def test_acceptance_parser_corpus():
    """20 fixtures parse, execute and round-trip; deferred semantics hold."""
    fixtures = sorted(glob.glob(os.path.join(os.path.dirname(__file__),
                                             "fixtures", "*.seq")))
    assert len(fixtures) == 20
    for path in fixtures:
        src = open(path).read()
        stmts = parse(src)
        assert parse(unparse(stmts)) == stmts
        load_file(path, Env())
    from beamkit.latparse import execute
    env = Env()
    execute(parse("a = 1; b := a + 1; a = 2;"), env)
    assert env["b"] == 3.0
    env2 = Env()
    execute(parse("z = ghost + 1;"), env2)
    assert env2["z"] == 1.0 and "ghost" in env2
    report("parser corpus (20 files) + deferred semantics")


def test_acceptance_protocol_fuzz():
    """1e5 random chunk splits of a frame stream decode identically."""
    t = MTable("t")
    t.add_col("name", ["a", "b"])
    t.add_col("v", np.array([1.0, -2.5]))
    rng = np.random.default_rng(3)
    payload = rng.normal(size=32)
    stream = b"".join([
        encode_num(math.pi),
        encode_vec(payload),
        encode_str("chunk me"),
        encode_tbl(t),
        encode_done(),
    ])
    ref_dec = FrameDecoder()
    ref = ref_dec.feed(stream)
    n = len(stream)
    trials = 100_000
    t0 = time.time()
    for _ in range(trials):
        ncuts = int(rng.integers(1, 6))
        cuts = np.sort(rng.integers(1, n, size=ncuts))
        dec = FrameDecoder()
        frames = []
        prev = 0
        for c in list(cuts) + [n]:
            frames.extend(dec.feed(stream[prev:c]))
            prev = c
        assert len(frames) == len(ref)
        assert frames[1][1].tobytes() == payload.astype("<f8").tobytes()
    report("protocol fuzz (1e5 chunk splits)",
           detail=f"{time.time() - t0:.1f}s, stream {n} bytes")
