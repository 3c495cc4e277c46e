"""Polymorphic tracking engines: survey (global frame) and track (local frame).

The track engine advances either scalar particle coordinates or DA-map rows
through the same map code; every map below is an exact canonical transform
(or a symplectic split thereof), so order-1 Jacobians stay symplectic to
roundoff and forward/backward tracking invert each other.

Coordinates are (x, px, y, py, t, pt): transverse positions [m], momenta
normalized to the reference momentum, a time-like coordinate [m] with
t > 0 meaning late arrival, and the energy deviation pt.  The drift kernel
is pz = sqrt(1 + 2 pt/beta0 + pt^2 - px^2 - py^2).

Tracking is embarrassingly parallel over tracked objects; the engines hold
no global mutable state.
"""

from __future__ import annotations

import math

import numpy as np

from . import tpsa as tp
from .damap import DaMap
from .geom import (Frame, angles_from_rot, body_frame, patch_restore,
                   rot_from_angles, rot_s, rot_y)
from .lattice import Element, LatticeError, Sequence
from .mtable import MTable
from .tpsa import Tpsa

__all__ = ["track", "survey", "MFlow", "TrackState", "ParticleLost",
           "track_element", "VARS"]

CLIGHT = 299792458.0
VARS = ("x", "px", "y", "py", "t", "pt")
_range = range  # `range=` is part of the command vocabulary below

DEFAULT_NST = {"sbend": 8, "rbend": 8, "quadrupole": 8, "sextupole": 8,
               "octupole": 8}
_YOSH_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSH_W0 = 1.0 - 2.0 * _YOSH_W1


class ParticleLost(Exception):
    """Raised inside maps when the drift kernel leaves its domain."""


class TrackState:
    """One tracked object: six coordinates, scalar or series valued."""

    __slots__ = ("x", "px", "y", "py", "t", "pt", "status", "where")

    def __init__(self, x=0.0, px=0.0, y=0.0, py=0.0, t=0.0, pt=0.0):
        self.x, self.px, self.y, self.py, self.t, self.pt = x, px, y, py, t, pt
        self.status = "alive"
        self.where = None  # (element name, s, turn) at loss

    @property
    def is_map(self) -> bool:
        return isinstance(self.x, Tpsa)

    def coords(self):
        return (self.x, self.px, self.y, self.py, self.t, self.pt)

    def set_coords(self, c):
        self.x, self.px, self.y, self.py, self.t, self.pt = c

    def orbit(self) -> np.ndarray:
        if self.is_map:
            return np.array([v.get0() for v in self.coords()], dtype=float)
        return np.array(self.coords(), dtype=float)

    @classmethod
    def from_damap(cls, m: DaMap) -> "TrackState":
        if m.desc.nv != 6:
            raise ValueError("tracking requires 6-variable maps")
        return cls(*[r.copy() for r in m.rows])

    def to_damap(self, desc) -> DaMap:
        return DaMap(desc, [v.copy() for v in self.coords()])

    def copy(self) -> "TrackState":
        st = TrackState(*[v.copy() if isinstance(v, Tpsa) else v for v in self.coords()])
        st.status = self.status
        st.where = self.where
        return st


class MFlow:
    """Shared per-run context: beam, direction, position, hooks."""

    def __init__(self, seq: Sequence, beam, sdir: int = 1):
        self.seq = seq
        self.beam = beam
        self.sdir = sdir
        self.s = 0.0
        self.turn = 0
        self.atentry: list = []
        self.atexit: list = []
        self.atslice: list = []


def _val(st, v):
    """Domain guard: series need a valid constant part, scalars a valid value."""
    c = v.get0() if isinstance(v, Tpsa) else v
    if not (c > 0.0):
        raise ParticleLost()
    return v


def _pz(st: TrackState, beta0: float, px=None, py=None):
    px = st.px if px is None else px
    py = st.py if py is None else py
    arg = 1.0 + (2.0 / beta0) * st.pt + st.pt * st.pt - px * px - py * py
    _val(st, arg)
    return tp.sqrt(arg)


# -- exact canonical maps ---------------------------------------------------

def m_drift(st: TrackState, L, beta0: float, lref=None) -> None:
    """Exact 6D drift over z-length L; lref subtracts the reference time."""
    if lref is None:
        lref = L
    pz = _pz(st, beta0)
    ipz = 1.0 / pz if not isinstance(pz, Tpsa) else pz.inv()
    st.x = st.x + L * st.px * ipz
    st.y = st.y + L * st.py * ipz
    st.t = st.t + L * (1.0 / beta0 + st.pt) * ipz - lref / beta0


def m_kick(st: TrackState, knl, ksl, factor) -> None:
    """Integrated multipole kick: dpx - i dpy = -sum (knl_n + i ksl_n) (x+iy)^n / n!.

    `factor` carries slice weight, tapering scale and tracking direction.
    """
    n = max(len(knl), len(ksl))
    if n == 0:
        return
    bre, bim = 0.0, 0.0
    for k in range(n - 1, -1, -1):
        an_re = (knl[k] if k < len(knl) else 0.0) / math.factorial(k)
        an_im = (ksl[k] if k < len(ksl) else 0.0) / math.factorial(k)
        if k < n - 1:
            nre = bre * st.x - bim * st.y
            nim = bre * st.y + bim * st.x
            bre, bim = nre + an_re, nim + an_im
        else:
            bre, bim = an_re, an_im
    st.px = st.px - factor * bre
    st.py = st.py + factor * bim


def m_cavity(st: TrackState, volt, freq, lag, beam, factor) -> None:
    """Thin RF kick: dpt = q V[MV] 1e-3 / pc[GeV] * sin(2 pi (lag - f t / c))."""
    phase = 2.0 * math.pi * (lag - (freq * 1e6 / CLIGHT) * st.t)
    st.pt = st.pt + factor * (beam.charge * volt * 1e-3 / beam.pc) * tp.sin(phase)


def m_frame(st: TrackState, T, R, beta0: float) -> None:
    """Exact change of coordinates into a frame posed at (T, R).

    Rotates momenta, translates positions, then drifts the particle onto
    the new transverse plane.  Composition of canonical pieces, hence
    canonical; no reference time is subtracted (patches have zero length).
    """
    pz = _pz(st, beta0)
    px = R[0][0] * st.px + R[1][0] * st.py + R[2][0] * pz
    py = R[0][1] * st.px + R[1][1] * st.py + R[2][1] * pz
    pzn = R[0][2] * st.px + R[1][2] * st.py + R[2][2] * pz
    _val(st, pzn)
    rx = st.x - T[0]
    ry = st.y - T[1]
    rz = -T[2]
    nx = R[0][0] * rx + R[1][0] * ry + R[2][0] * rz
    ny = R[0][1] * rx + R[1][1] * ry + R[2][1] * rz
    nz = R[0][2] * rx + R[1][2] * ry + R[2][2] * rz
    zeta = -nz * (1.0 / pzn if not isinstance(pzn, Tpsa) else pzn.inv())
    st.x = nx + zeta * px
    st.y = ny + zeta * py
    st.t = st.t + zeta * (1.0 / beta0 + st.pt)
    st.px = px
    st.py = py


def _inv_pose(T, R):
    Rt = np.asarray(R).T
    return (-(Rt @ np.asarray(T)), Rt)


def m_tilt(st: TrackState, psi: float, dirn: int) -> None:
    """Roll of the transverse plane; dirn=+1 enters the tilted frame."""
    c, s = math.cos(psi), math.sin(psi)
    if dirn < 0:
        s = -s
    x = c * st.x + s * st.y
    y = c * st.y - s * st.x
    px = c * st.px + s * st.py
    py = c * st.py - s * st.px
    st.x, st.y, st.px, st.py = x, y, px, py


def m_bend_chord(st: TrackState, Lc, k0, lref, beta0: float) -> None:
    """Exact uniform-field bend over a straight chord of z-length Lc.

    Closed-form flow of H = -sqrt(...) + k0 x: px falls linearly with z and
    the remaining integrals have exact primitives.  lref is the reference
    arc length whose time is subtracted.  Cancellation-free forms keep the
    map stable for small k0 and small angles.
    """
    A = 1.0 + (2.0 / beta0) * st.pt + st.pt * st.pt - st.py * st.py
    _val(st, A)
    pz0sq = A - st.px * st.px
    _val(st, pz0sq)
    pz0 = tp.sqrt(pz0sq)
    px1 = st.px - k0 * Lc
    pz1sq = A - px1 * px1
    _val(st, pz1sq)
    pz1 = tp.sqrt(pz1sq)
    ipzs = 1.0 / (pz0 + pz1) if not isinstance(pz0, Tpsa) and not isinstance(pz1, Tpsa) \
        else (pz0 + pz1).inv()
    st.x = st.x + Lc * (st.px + px1) * ipzs
    # rotation angle of the momentum in the bend plane, cancellation-free
    iA = 1.0 / A if not isinstance(A, Tpsa) else A.inv()
    w = (k0 * Lc) * (pz0 + st.px * (st.px + px1) * ipzs) * iA
    if isinstance(w, Tpsa) or k0 != 0.0:
        psi = tp.asin(w) * (1.0 / k0 if not isinstance(k0, Tpsa) else k0.inv())
    else:
        psi = 0.0
    st.y = st.y + st.py * psi
    st.t = st.t + (1.0 / beta0 + st.pt) * psi - lref / beta0
    st.px = px1


def m_yrot(st: TrackState, angle: float, beta0: float) -> None:
    """Wedge rotation of the frame about y (entry into a rotated plane)."""
    m_frame(st, (0.0, 0.0, 0.0), rot_y(angle), beta0)


# -- element body maps --------------------------------------------------------

def _strengths(elm: Element, nmax: int = 4):
    """Integrated multipole strengths knl/ksl including k1..k3 and tapering."""
    knl = [float(v) if not isinstance(v, Tpsa) else v for v in elm.get("knl", [])]
    ksl = [float(v) if not isinstance(v, Tpsa) else v for v in elm.get("ksl", [])]
    l = elm.l
    for n, key in ((1, "k1"), (2, "k2"), (3, "k3")):
        v = elm.get(key, 0.0)
        if isinstance(v, Tpsa) or v != 0.0:
            while len(knl) <= n:
                knl.append(0.0)
            knl[n] = knl[n] + v * (l if l > 0 else 1.0)
    for n, key in ((1, "k1s"), (2, "k2s"), (3, "k3s")):
        v = elm.get(key, 0.0)
        if isinstance(v, Tpsa) or v != 0.0:
            while len(ksl) <= n:
                ksl.append(0.0)
            ksl[n] = ksl[n] + v * (l if l > 0 else 1.0)
    return knl, ksl


def _ktap_scale(elm: Element):
    kt = elm.get("ktap", 0.0)
    return 1.0 + kt


def _nst(elm: Element) -> int:
    n = int(elm.get("nst", 0) or 0)
    if n >= 1:
        return n
    return DEFAULT_NST.get(elm.kind, 1)


def _method(elm: Element) -> int:
    m = int(elm.get("method", 0) or 0)
    if m in (2, 4):
        return m
    return 4 if elm.kind in DEFAULT_NST else 2


def integrate(st: TrackState, thick, kick, nst: int, sdir: int, method: int = 2,
              hooks=None, elm=None, flw=None) -> None:
    """Symplectic drift-kick-drift integration.

    One order-2 slice over weight h is thick(h/2) kick(h) thick(h/2); the
    order-4 scheme is the triple-jump composition of order-2 slices.  With
    sdir = -1 every weight flips sign, which is the exact inverse because
    the compositions are palindromic.
    """
    h = sdir / nst

    def s2(w):
        thick(st, 0.5 * w)
        kick(st, w)
        thick(st, 0.5 * w)

    for i in range(nst):
        if method == 4:
            s2(_YOSH_W1 * h)
            s2(_YOSH_W0 * h)
            s2(_YOSH_W1 * h)
        else:
            s2(h)
        if hooks:
            for fn in hooks:
                fn(elm, flw, i)


def _body(elm: Element, flw: MFlow, st: TrackState, sdir: int) -> None:
    """Element body between the tilt steps (frame-exact, slice-integrated)."""
    kind = elm.kind
    beam = flw.beam
    beta0 = beam.beta0
    l = elm.l

    if kind == "marker":
        return

    if kind == "translation":
        T = (elm.get("dx", 0.0), elm.get("dy", 0.0), elm.get("ds", 0.0))
        if sdir > 0:
            m_frame(st, T, np.eye(3), beta0)
        else:
            Ti, Ri = _inv_pose(T, np.eye(3))
            m_frame(st, Ti, Ri, beta0)
        return

    if kind == "rotation":
        R = rot_from_angles(elm.get("dtheta", 0.0), elm.get("dphi", 0.0),
                            elm.get("dpsi", 0.0))
        if sdir > 0:
            m_frame(st, (0.0, 0.0, 0.0), R, beta0)
        else:
            m_frame(st, (0.0, 0.0, 0.0), R.T, beta0)
        return

    if kind == "rfcavity":
        volt = elm.get("volt", 0.0)
        freq = elm.get("freq", 0.0)
        lag = elm.get("lag", 0.0)
        if l > 0:
            m_drift(st, sdir * l / 2, beta0)
        m_cavity(st, volt, freq, lag, beam, sdir * _ktap_scale(elm))
        if l > 0:
            m_drift(st, sdir * l / 2, beta0)
        return

    knl, ksl = _strengths(elm)
    scale = _ktap_scale(elm)

    if kind in ("hkicker", "vkicker"):
        kick = elm.get("kick", 0.0)
        knl = list(knl) or [0.0]
        ksl = list(ksl) or [0.0]
        if kind == "hkicker":
            knl[0] = knl[0] - kick
        else:
            ksl[0] = ksl[0] + kick
        if l > 0:
            m_drift(st, sdir * l / 2, beta0)
        m_kick(st, knl, ksl, sdir * scale)
        if l > 0:
            m_drift(st, sdir * l / 2, beta0)
        return

    if kind == "multipole":
        m_kick(st, knl, ksl, sdir * scale)
        return

    if kind in ("drift", "monitor"):
        if l != 0:
            m_drift(st, sdir * l, beta0)
        return

    if kind in ("sbend", "rbend"):
        _body_bend(elm, flw, st, sdir, knl, ksl, scale)
        return

    # straight thick magnets: quadrupole, sextupole, octupole
    nst = _nst(elm)
    haskick = any(isinstance(v, Tpsa) or v != 0.0 for v in knl + ksl)

    def thick(s_, w):
        m_drift(s_, w * l, beta0)

    def kick(s_, w):
        m_kick(s_, knl, ksl, w * scale)

    if not haskick:
        m_drift(st, sdir * l, beta0)
        return
    integrate(st, thick, kick, nst, sdir, _method(elm),
              hooks=flw.atslice, elm=elm, flw=flw)


def _body_bend(elm: Element, flw: MFlow, st: TrackState, sdir: int,
               knl, ksl, scale) -> None:
    """Curved (sbend) or chord-framed (rbend) body with exact dipole slices.

    sbend: per slice, wedge rotations of half the slice angle sandwich the
    exact uniform-field chord map, which keeps the design orbit exact for a
    pure bend at any slice count.  rbend: straight chord body; the +-angle/2
    frame patches live at the element boundary (computed patches).
    """
    beta0 = flw.beam.beta0
    l = elm.l
    angle = elm.angle
    rbend = elm.kind == "rbend"

    k0 = elm.get("k0", None)
    if k0 is None or (not isinstance(k0, Tpsa) and k0 == 0.0 and angle != 0.0):
        if rbend:
            k0 = 2.0 * math.sin(angle / 2.0) / l if l != 0 else 0.0
        else:
            k0 = angle / l if l != 0 else 0.0
    k0 = k0 * scale

    haskick = any(isinstance(v, Tpsa) or v != 0.0 for v in knl + ksl)
    # keep the per-application wedge below pi/4 so asin stays in branch
    nst = max(_nst(elm) if haskick else 1,
              math.ceil(abs(angle) / (math.pi / 4)) or 1)

    if rbend:
        phis = 0.0
        lc_slice = l / nst
        # l is the straight (chord) length; the reference path is the arc
        arc = l * (angle / 2.0) / math.sin(angle / 2.0) if angle != 0.0 else l
        lref_slice = arc / nst
    else:
        phis = angle / nst
        rho = l / angle if angle != 0.0 else 0.0
        lc_slice = 2.0 * rho * math.sin(phis / 2.0) if angle != 0.0 else l / nst
        lref_slice = l / nst

    k0c = k0.get0() if isinstance(k0, Tpsa) else k0

    def thick(s_, w):
        # w is the signed fraction of one slice; negative w is the inverse
        if phis != 0.0:
            m_yrot(s_, -phis * w / 2.0, beta0)
        if abs(k0c) > 1e-12:
            m_bend_chord(s_, w * lc_slice, k0, w * lref_slice, beta0)
        else:
            m_drift(s_, w * lc_slice, beta0, lref=w * lref_slice)
        if phis != 0.0:
            m_yrot(s_, -phis * w / 2.0, beta0)

    def kick(s_, w):
        m_kick(s_, knl, ksl, w * scale)

    # computed boundary patches make the rbend reference frame straight
    if rbend and angle != 0.0:
        m_yrot(st, -sdir * angle / 2.0, beta0)
    if haskick:
        integrate(st, thick, kick, nst, sdir, _method(elm),
                  hooks=flw.atslice, elm=elm, flw=flw)
    else:
        for _ in range(nst):
            thick(st, sdir)
    if rbend and angle != 0.0:
        m_yrot(st, -sdir * angle / 2.0, beta0)


def track_element(elm: Element, flw: MFlow, st: TrackState) -> None:
    """Generic element tracker.

    Pipeline (forward): atentry, misalign, tilt, fringe (hook only),
    integrate, fringe, tilt, misalign, atexit, with sign-flipped exit
    steps; backward runs the exact inverses in reverse order.
    """
    if st.status != "alive":
        return
    sdir = flw.sdir
    for fn in flw.atentry:
        fn(elm, flw, sdir)
    try:
        mis = elm.misalignment()
        tilt = elm.tilt
        beta0 = flw.beam.beta0
        if sdir > 0:
            if mis:
                m_frame(st, mis.T, mis.R, beta0)
            if tilt:
                m_tilt(st, tilt, +1)
            _body(elm, flw, st, +1)
            if tilt:
                m_tilt(st, tilt, -1)
            if mis:
                V, W = body_frame(elm.l, elm.angle, tilt)
                Tb, Rb = patch_restore(W, mis.R, V, mis.T)
                Ti, Ri = _inv_pose(Tb, Rb)
                m_frame(st, Ti, Ri, beta0)
        else:
            if mis:
                V, W = body_frame(elm.l, elm.angle, tilt)
                Tb, Rb = patch_restore(W, mis.R, V, mis.T)
                m_frame(st, Tb, Rb, beta0)
            if tilt:
                m_tilt(st, tilt, +1)
            _body(elm, flw, st, -1)
            if tilt:
                m_tilt(st, tilt, -1)
            if mis:
                Ti, Ri = _inv_pose(mis.T, mis.R)
                m_frame(st, Ti, Ri, beta0)
        if not st.is_map:
            for v in st.coords():
                if not math.isfinite(v):
                    raise ParticleLost()
    except ParticleLost:
        if st.is_map:
            raise LatticeError(
                f"DA map left the tracking domain in element {elm.name!r} "
                f"at s={flw.s:.6g}") from None
        st.status = "lost"
        st.where = (elm.name, flw.s, flw.turn)
    for fn in flw.atexit:
        fn(elm, flw, -sdir)


# -- run loops -------------------------------------------------------------------

def _coerce_states(X0, beam):
    """Normalize user input into a list of TrackStates plus rebuild info."""
    if X0 is None:
        return [TrackState()], None
    if isinstance(X0, DaMap):
        return [TrackState.from_damap(X0)], X0.desc
    if isinstance(X0, TrackState):
        return [X0.copy()], None
    states = []
    desc = None
    if isinstance(X0, (list, tuple)) and X0 and isinstance(X0[0], DaMap):
        if not all(isinstance(m, DaMap) for m in X0):
            raise ValueError("tracked objects must all be of the same kind")
        desc = X0[0].desc
        return [TrackState.from_damap(m) for m in X0], desc
    if isinstance(X0, (list, tuple)) and any(isinstance(m, DaMap) for m in X0):
        raise ValueError("tracked objects must all be of the same kind")
    arr = np.atleast_2d(np.asarray(X0, dtype=float))
    if arr.shape[1] != 6:
        raise ValueError("particle initial conditions must be rows of 6 coordinates")
    for row in arr:
        states.append(TrackState(*row))
    return states, desc


def _range_indices(seq: Sequence, range_spec) -> list[int]:
    if range_spec is None:
        return list(_range(len(seq.places)))
    if isinstance(range_spec, str):
        a, b = range_spec.split("/") if "/" in range_spec else (range_spec, range_spec)
    else:
        a, b = range_spec
    try:
        ia = seq.index(a.strip())
        ib = seq.index(b.strip())
    except LatticeError:
        return []
    if ia <= ib:
        return list(_range(ia, ib + 1))
    return list(_range(ia, len(seq.places))) + list(_range(0, ib + 1))


def track(seq: Sequence, X0=None, nturn: int = 1, observe="end",
          sdir: int = 1, range=None, save: bool = True):
    """Track particles or DA maps through a sequence.

    Returns (table, finals).  Observation rows carry name, s, turn, id and
    the six coordinates (map runs record the orbit part).  `observe` is
    "all", "end", or a collection of element names; `sdir` +1/-1 selects
    forward or backward runs, and reversed sequences (dir=-1) flip the
    iteration order once more.
    """
    if seq.beam is None:
        raise LatticeError(f"sequence {seq.name!r} has no beam attached")
    states, desc = _coerce_states(X0, seq.beam)
    total_dir = sdir * seq.dir
    flw = MFlow(seq, seq.beam, total_dir)

    idx = _range_indices(seq, range)
    order = idx if total_dir > 0 else list(reversed(idx))

    watch: set | None
    if observe == "all":
        watch = None
    elif observe == "end":
        watch = {order[-1]} if order else set()
    else:
        names = {observe} if isinstance(observe, str) else set(observe)
        watch = {j for j in order if seq.places[j].name in names}

    cols: dict[str, list] = {k: [] for k in
                             ("name", "kind", "s", "turn", "id", *VARS)}

    def record(place, turn):
        for i, st in enumerate(states):
            if st.status != "alive":
                continue
            orb = st.orbit()
            cols["name"].append(place.name)
            cols["kind"].append(place.element.kind)
            cols["s"].append(flw.s)
            cols["turn"].append(float(turn))
            cols["id"].append(float(i))
            for k, v in zip(VARS, orb):
                cols[k].append(v)

    status = "ok"
    for turn in _range(1, nturn + 1):
        flw.turn = turn
        for j in order:
            place = seq.places[j]
            flw.s = place.s0 if total_dir > 0 else place.s1
            for st in states:
                track_element(place.element, flw, st)
            flw.s = place.s1 if total_dir > 0 else place.s0
            if save and (watch is None or j in watch):
                record(place, turn)
        if all(st.status != "alive" for st in states):
            status = "all particles lost"
            break

    t = MTable(f"track.{seq.name}", header={"type": "track", "status": status,
                                            "turns": nturn})
    t.add_col("name", cols["name"])
    t.add_col("kind", cols["kind"])
    for k in ("s", "turn", "id", *VARS):
        t.add_col(k, np.asarray(cols[k], dtype=float))

    finals: list = []
    for st in states:
        if desc is not None and st.is_map:
            finals.append(st.to_damap(desc))
        else:
            finals.append(st)
    if isinstance(X0, DaMap):
        finals = finals[0:1]
    return t, finals


def survey(seq: Sequence, range=None, mapsave: bool = False,
           start: Frame | None = None) -> MTable:
    """Global-frame geometry of the sequence (design geometry: misalignment
    is deliberately excluded).  Columns: name, kind, s, l, angle, x, y, z,
    theta, phi, psi; `mapsave` adds the orientation matrix per row."""
    f = (start or Frame()).copy()
    idx = _range_indices(seq, range)
    rows: dict[str, list] = {k: [] for k in
                             ("name", "kind", "s", "l", "angle", "x", "y", "z",
                              "theta", "phi", "psi")}
    Ws: list[np.ndarray] = []
    nadv = 0
    for j in idx:
        place = seq.places[j]
        e = place.element
        if e.kind == "translation":
            T = np.array([e.get("dx", 0.0), e.get("dy", 0.0), e.get("ds", 0.0)])
            f = Frame(f.V + f.W @ T, f.W)
            ang = 0.0
        elif e.kind == "rotation":
            R = rot_from_angles(e.get("dtheta", 0.0), e.get("dphi", 0.0),
                                e.get("dpsi", 0.0))
            f = Frame(f.V, f.W @ R)
            ang = 0.0
        elif e.kind == "rbend":
            ang = e.angle
            tilt = e.tilt
            Rt = rot_s(tilt) if tilt else np.eye(3)
            Rhalf = Rt @ rot_y(-ang / 2.0) @ Rt.T
            f = Frame(f.V, f.W @ Rhalf)
            f = Frame(f.V + f.W @ np.array([0.0, 0.0, e.l]), f.W)
            f = Frame(f.V, f.W @ Rhalf)
        else:
            ang = e.angle if e.kind == "sbend" else 0.0
            from .geom import survey_advance
            f = survey_advance(f, e.l, ang, e.tilt)
        nadv += 1
        if nadv % 1024 == 0:
            f.renormalize()
        th, ph, ps = angles_from_rot(f.W)
        rows["name"].append(place.name)
        rows["kind"].append(e.kind)
        rows["s"].append(place.s1)
        rows["l"].append(e.l)
        rows["angle"].append(ang)
        rows["x"].append(f.V[0])
        rows["y"].append(f.V[1])
        rows["z"].append(f.V[2])
        rows["theta"].append(th)
        rows["phi"].append(ph)
        rows["psi"].append(ps)
        if mapsave:
            Ws.append(f.W.copy())

    t = MTable(f"survey.{seq.name}", header={"type": "survey",
                                             "length": seq.length})
    t.add_col("name", rows["name"])
    t.add_col("kind", rows["kind"])
    for k in ("s", "l", "angle", "x", "y", "z", "theta", "phi", "psi"):
        t.add_col(k, np.asarray(rows[k], dtype=float))
    if mapsave:
        t.cols["W"] = Ws
    return t
