"""Closed orbit, linear optics, and parametric nonlinear normal forms.

The one-turn map m (about the closed orbit) factorizes as m = a . r . a^-1:
a collects the parameter-dependent fixed point, the Courant-Snyder linear
normalization and the nonlinear generators removed order by order from the
homological equation; r keeps the rotation plus the structurally resonant
(tune-shift) terms.  Tunes, chromaticities, amplitude detuning and
generating-function (RDT) coefficients are read from r and from the stored
generator rows.

Phasor convention: per dynamic plane h+ = xhat - i phat, h- = xhat + i phat,
so {h+, h-} = 2i and a rotation by mu multiplies h+ by e^{i mu}.  Labels
f_jklm index exponents of (h1+, h1-, h2+, h2-).

Normal-form analysis is single-threaded per map; independent analyses can
run in parallel.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .damap import DaMap
from .engine import MFlow, TrackState, track, track_element, _range_indices
from .lattice import LatticeError, Sequence
from .mtable import MTable
from .tpsa import Descriptor, DescriptorError, Tpsa, analytic, descriptor

__all__ = ["cofind", "CofindResult", "normal", "NormalForm", "twiss",
           "OpticsError", "rdt_along"]

_range = range  # `range=` belongs to the command vocabulary

# canonical form consistent with the engine's late-arrival-positive t
_S6 = np.diag([0.0] * 6)
_S6[0, 1] = _S6[2, 3] = 1.0
_S6[1, 0] = _S6[3, 2] = -1.0
_S6[4, 5] = -1.0
_S6[5, 4] = 1.0


class OpticsError(ValueError):
    pass


# -- closed orbit ------------------------------------------------------------

@dataclass
class CofindResult:
    orbit: np.ndarray
    map: DaMap
    iterations: int
    residual: float


def _has_cavity(seq: Sequence) -> bool:
    return any(p.element.kind == "rfcavity" and
               (isinstance(p.element.get("volt", 0.0), Tpsa) or
                p.element.get("volt", 0.0) != 0.0)
               for p in seq.places)


def cofind(seq: Sequence, guess=None, codim: int | None = None,
           order: int = 1, X0: DaMap | None = None) -> CofindResult:
    """Newton search for the closed orbit using tracked order-1 map Jacobians.

    codim selects the solved coordinates: 4 (transverse, pt held fixed),
    5 (adds t) or 6 (full, needs a cavity).  Returns the orbit and the
    one-turn map expanded about it at the requested order.
    """
    if codim is None:
        codim = 6 if _has_cavity(seq) else 4
    if codim not in (4, 5, 6):
        raise OpticsError(f"codim must be 4, 5 or 6, got {codim}")
    if codim == 6 and not _has_cavity(seq):
        raise OpticsError("codim=6 closed orbit needs an active cavity")
    idx = list(range(codim))

    x = np.zeros(6) if guess is None else np.asarray(guess, dtype=float).copy()

    def one_turn(orbit: np.ndarray, full_order: int) -> DaMap:
        if X0 is not None:
            m0 = X0.copy()
            for i in range(6):
                m0.rows[i].coef[0] = orbit[i]
        else:
            m0 = DaMap.identity(6, full_order, orbit=orbit)
        _, fin = track(seq, m0, save=False)
        return fin[0]

    it = 0
    res = math.inf
    for it in range(1, 21):
        m = one_turn(x, 1 if X0 is None else X0.desc.mo)
        E, R = m.extract()
        resv = (E - x)[idx]
        res = float(np.abs(resv).max())
        if res < 1e-10:
            final = one_turn(x, order) if (X0 is not None or order != 1) else m
            return CofindResult(x, final, it, res)
        A = R[np.ix_(idx, idx)] - np.eye(codim)
        try:
            dx = np.linalg.solve(A, -resv)
        except np.linalg.LinAlgError:
            raise OpticsError("R - I is singular (integer tune?) in cofind") from None
        x[idx] += dx
    raise OpticsError(f"cofind did not converge in {it} iterations, residual {res:.3e}")


# -- linear normalization -------------------------------------------------------

def _linear_normal(R: np.ndarray, planes: list[tuple[int, int]]):
    """Normalizing matrix A with A^-1 R A = block rotations on the planes.

    Returns (A, tunes) with the Courant-Snyder phase convention (zero phase:
    the position row of each plane's second column vanishes).
    """
    n = R.shape[0]
    dyn = [i for pl in planes for i in pl]
    Rd = R[np.ix_(dyn, dyn)]
    S = _S6[np.ix_(dyn, dyn)]
    evals, evecs = np.linalg.eig(Rd)

    used = set()
    cols: dict[int, np.ndarray] = {}
    tunes = [0.0] * len(planes)
    for pi, pl in enumerate(planes):
        # pick the unused conjugate pair dominated by this plane's slots
        best, bestw = None, -1.0
        rows = [dyn.index(pl[0]), dyn.index(pl[1])]
        for k in range(len(evals)):
            if k in used or evals[k].imag >= 0.0:
                continue
            w = float(np.abs(evecs[rows, k]).sum())
            if w > bestw:
                best, bestw = k, w
        if best is None:
            raise OpticsError(f"no stable eigenmode found for plane {pi + 1}")
        lam = evals[best]
        if abs(abs(lam) - 1.0) > 1e-6:
            raise OpticsError(
                f"unstable linear motion in plane {pi + 1}: |lambda| = {abs(lam):.6f}")
        used.add(best)
        conj_k = int(np.argmin(np.abs(evals - np.conj(lam))))
        used.add(conj_k)

        w = evecs[:, best].copy()
        a = w.real.copy()
        b = -w.imag.copy()
        nrm = a @ S @ b
        if nrm < 0:
            w = np.conj(w)
            a, b = w.real.copy(), -w.imag.copy()
            nrm = a @ S @ b
        if abs(nrm) < 1e-12:
            raise OpticsError(f"degenerate eigenvector normalization in plane {pi + 1}")
        w /= math.sqrt(abs(nrm))
        # zero the phase so the plane's position row of column b vanishes
        xrow = rows[0]
        ph = cmath.phase(w[xrow]) if abs(w[xrow]) > 0 else 0.0
        w *= cmath.exp(-1j * ph)
        cols[pl[0]] = w.real
        cols[pl[1]] = -w.imag

    A = np.eye(n)
    Ad = np.zeros((len(dyn), len(dyn)))
    for j, slot in enumerate(dyn):
        Ad[:, j] = cols[slot]
    A[np.ix_(dyn, dyn)] = Ad
    # tunes from the normalized rotation blocks
    Rn = np.linalg.inv(A) @ R @ A
    for pi, pl in enumerate(planes):
        mu = math.atan2(Rn[pl[0], pl[1]], Rn[pl[0], pl[0]])
        tunes[pi] = (mu / (2 * math.pi)) % 1.0
    return A, tunes


# -- normal form ------------------------------------------------------------------

def _phasor_maps(desc: Descriptor, planes):
    """Complex linear maps Phi (phasor -> real) and Phi^-1."""
    n = desc.nv
    P = np.eye(n, dtype=complex)
    Pi = np.eye(n, dtype=complex)
    for (i, j) in planes:
        P[i, i] = 0.5
        P[i, j] = 0.5
        P[j, i] = 0.5j
        P[j, j] = -0.5j
        Pi[i, i] = 1.0
        Pi[i, j] = -1.0j
        Pi[j, i] = 1.0
        Pi[j, j] = 1.0j
    return (DaMap.from_linear(desc, P, dtype=complex),
            DaMap.from_linear(desc, Pi, dtype=complex))


def _nilpotent_inverse(T_map: DaMap, min_deg: int) -> DaMap:
    """(I + T)^-1 for T of lowest degree >= 2, via short fixed point."""
    d = T_map.desc
    ident = DaMap(d).to_complex()
    N = ident.copy()
    steps = max(1, math.ceil(d.mo / max(1, min_deg - 1)))
    for _ in range(steps):
        TN = T_map.compose(N)
        N = DaMap(d, [ident.rows[i] - TN.rows[i] for i in range(d.nv)])
    return N


def _translation(desc: Descriptor, xi_rows: dict[int, Tpsa], sign: float) -> DaMap:
    m = DaMap(desc)
    for i, xi in xi_rows.items():
        m.rows[i] = m.rows[i] + sign * xi
    return m


class NormalForm:
    """Factorization m = a . r . a^-1 with tune/RDT accessors.

    Accessors follow the one-based parameter indexing of the knob list:
    ``q1(1)`` is the fractional tune, ``q1(1, k)`` its exact derivative
    with respect to the k-th parameter, ``anhx(1, 0)`` the amplitude
    detuning dQ1/dJx, ``gnfu("4000")`` a generating-function coefficient
    and ``gnfu("4000", k)`` its parameter derivative.
    """

    def __init__(self, m: DaMap, a: DaMap, r: DaMap, planes, tunes,
                 nus, gen_rows, pt_slot: int | None):
        self.m = m
        self.a = a
        self.r = r
        self.planes = planes
        self.tunes = tunes
        self._nus = nus          # per-plane complex Tpsa of log(g)/(2 pi i)
        self._gen = gen_rows     # accumulated generator rows (phasor basis)
        self._pt_slot = pt_slot

    # ---- helpers ----

    def _nu_coef(self, plane: int, jx: int, jy: int, pt_order: int,
                 k: int | None) -> float:
        d = self.m.desc
        e = [0] * d.n
        if len(self.planes) > 0:
            e[self.planes[0][0]] = jx
            e[self.planes[0][1]] = jx
        if len(self.planes) > 1:
            e[self.planes[1][0]] = jy
            e[self.planes[1][1]] = jy
        elif jy:
            raise OpticsError("no vertical plane in this normal form")
        if pt_order:
            if self._pt_slot is None:
                raise OpticsError("pt is dynamic here; no pt-expansion available")
            e[self._pt_slot] = pt_order
        if k is not None:
            if not 1 <= k <= d.np:
                raise OpticsError(f"parameter index {k} out of range 1..{d.np}")
            e[d.nv + k - 1] += 1
        try:
            c = self._nus[plane].get(e)
        except DescriptorError:
            need = sum(e)
            raise OpticsError(
                f"normal form order insufficient for this accessor "
                f"(needs map order >= {need + 1})") from None
        return float(np.real(c))

    def q(self, plane: int, sel: int = 1, k: int | None = None) -> float:
        if sel != 1:
            raise OpticsError("tune accessor selector must be 1")
        if k is None:
            return self.tunes[plane]
        return self._nu_coef(plane, 0, 0, 0, k)

    def q1(self, sel: int = 1, k: int | None = None) -> float:
        return self.q(0, sel, k)

    def q2(self, sel: int = 1, k: int | None = None) -> float:
        return self.q(1, sel, k)

    def dq(self, plane: int, k: int | None = None) -> float:
        """Chromaticity dQ/dpt (pt treated as a parameter, 4D/5D mode)."""
        return self._nu_coef(plane, 0, 0, 1, k)

    def anh(self, plane: int, jx: int, jy: int, pt_order: int = 0,
            k: int | None = None) -> float:
        """Anharmonicity d^(jx+jy) Q / dJx^jx dJy^jy (optionally x pt^p, d/dK_k).

        Actions are J = (xhat^2 + phat^2)/2 = h+ h- / 2, hence the 2^j
        conversion from phasor-monomial coefficients.
        """
        c = self._nu_coef(plane, jx, jy, pt_order, k)
        return c * (2.0 ** (jx + jy)) * math.factorial(jx) * math.factorial(jy) \
            * math.factorial(pt_order)

    def anhx(self, jx: int, jy: int, pt_order: int = 0, k: int | None = None) -> float:
        return self.anh(0, jx, jy, pt_order, k)

    def anhy(self, jx: int, jy: int, pt_order: int = 0, k: int | None = None) -> float:
        return self.anh(1, jx, jy, pt_order, k)

    def gnfu(self, label: str, k: int | None = None) -> complex:
        """Generating-function coefficient f_jklm (complex), or d f/dK_k."""
        digits = label[1:] if label.startswith("f") else label
        if len(digits) != 4 or not digits.isdigit():
            raise OpticsError(f"malformed RDT label {label!r}; want 4 digits like '4000'")
        j, kk, l, mm = (int(c) for c in digits)
        return _gnfu_from_rows(self._gen, self.m.desc, self.planes, j, kk, l, mm,
                               self._pt_slot, 0, k)

    def check_factorization(self) -> float:
        """Max coefficient deviation of a . r . a^-1 from m."""
        rec = self.a.compose(self.r.compose(self.a.invert()))
        return max(float(np.abs(rec.rows[i].coef - self.m.rows[i].coef).max())
                   for i in range(self.m.desc.nv))


def _gnfu_from_rows(gen_rows, desc, planes, j, k, l, m, pt_slot,
                    pt_order: int = 0, kpar: int | None = None) -> complex:
    if len(planes) < 2 and (l or m):
        raise OpticsError("no vertical plane available for this RDT label")
    e = [0] * desc.n
    h1p, h1m = planes[0]
    h2p, h2m = planes[1] if len(planes) > 1 else (None, None)

    if k >= 1:
        row, fac = h1p, 1j / (2.0 * k)
        tgt = (j, k - 1, l, m)
    elif j >= 1:
        row, fac = h1m, -1j / (2.0 * j)
        tgt = (j - 1, k, l, m)
    elif m >= 1:
        row, fac = h2p, 1j / (2.0 * m)
        tgt = (j, k, l, m - 1)
    elif l >= 1:
        row, fac = h2m, -1j / (2.0 * l)
        tgt = (j, k, l - 1, m)
    else:
        return 0.0

    e[h1p], e[h1m] = tgt[0], tgt[1]
    if h2p is not None:
        e[h2p], e[h2m] = tgt[2], tgt[3]
    if pt_order and pt_slot is not None:
        e[pt_slot] = pt_order
    if kpar is not None:
        if not 1 <= kpar <= desc.np:
            raise OpticsError(f"parameter index {kpar} out of range 1..{desc.np}")
        e[desc.nv + kpar - 1] += 1
    try:
        c = gen_rows[row].get(e)
    except DescriptorError:
        raise OpticsError(
            f"RDT f{j}{k}{l}{m} needs map order >= {j + k + l + m - (0 if kpar is None else -1)}"
        ) from None
    return complex(fac * c)


def normal(m: DaMap, preserve: bool = False,
           dynamic: list[tuple[int, int]] | None = None) -> NormalForm:
    """Order-by-order nonlinear normal form of a one-turn map.

    The map should be expanded about its fixed point (constant parts at
    roundoff/residual level).  Dynamic planes default to the transverse
    ones, plus the longitudinal plane when pt actually moves.  Terms whose
    small divisor vanishes structurally (tune shifts) stay in r; a true
    resonance raises unless ``preserve`` keeps it in r instead.
    """
    d = m.desc
    if d.nv != 6:
        raise OpticsError("normal form requires 6-variable maps")
    if dynamic is None:
        ptrow = m.rows[5]
        nz = np.nonzero(ptrow.coef)[0]
        moving = not (len(nz) == 1 and nz[0] == 6)
        dynamic = [(0, 1), (2, 3)] + ([(4, 5)] if moving else [])
    planes = dynamic
    dyn = [i for pl in planes for i in pl]
    pt_slot = 5 if (4, 5) not in planes else None

    # stage 0: parameter-dependent fixed point (and residual constants)
    E, R = m.extract()
    Rd = R[np.ix_(dyn, dyn)]
    try:
        IRinv = np.linalg.inv(np.eye(len(dyn)) - Rd)
    except np.linalg.LinAlgError:
        raise OpticsError("I - R singular: integer tune, no parametric fixed point") from None

    free_slots = [i for i in range(d.n) if i not in dyn and i != 4]
    # mask: monomials using only non-dynamic slots (pt if spectator + params)
    exps = d.exps
    mask_free = np.ones(d.size, dtype=bool)
    for s in range(d.n):
        if s not in free_slots:
            mask_free &= exps[:, s] == 0

    xi = {i: Tpsa(d) for i in dyn}
    cur = m
    for _ in range(d.mo + 2):
        c_rows = {}
        worst = 0.0
        for i in dyn:
            ci = Tpsa(d)
            ci.coef[mask_free] = cur.rows[i].coef[mask_free]
            c_rows[i] = ci
            worst = max(worst, float(np.abs(ci.coef).max()) if ci.coef.size else 0.0)
        if worst < 1e-14:
            break
        cmat = np.stack([c_rows[i].coef for i in dyn])
        upd = IRinv @ cmat
        for row_i, i in enumerate(dyn):
            xi[i].coef += upd[row_i]
        T = _translation(d, xi, +1.0)
        Tinv = _translation(d, xi, -1.0)
        cur = Tinv.compose(m.compose(T))
    a0 = _translation(d, xi, +1.0)

    # stage 1: linear normalization
    E1, R1 = cur.extract()
    A1, tunes = _linear_normal(R1.real if not np.iscomplexobj(R1) else R1, planes)
    A1map = DaMap.from_linear(d, A1)
    N = DaMap.from_linear(d, np.linalg.inv(A1)).compose(cur.compose(A1map))

    # stage 2: homological removal in the phasor basis
    Phi, Phinv = _phasor_maps(d, planes)
    N = Phinv.compose(N.to_complex().compose(Phi))

    lam_slot = np.ones(d.n, dtype=complex)
    for pi, (ip, im_) in enumerate(planes):
        mu = 2 * math.pi * tunes[pi]
        lam_slot[ip] = cmath.exp(1j * mu)
        lam_slot[im_] = cmath.exp(-1j * mu)

    def lam_of_mono(e) -> complex:
        out = 1.0 + 0j
        for pi, (ip, im_) in enumerate(planes):
            k = int(e[ip]) - int(e[im_])
            if k:
                out *= cmath.exp(1j * 2 * math.pi * tunes[pi] * k)
        return out

    def structural(e, row_slot) -> bool:
        for (ip, im_) in planes:
            want = 1 if ip == row_slot else (-1 if im_ == row_slot else 0)
            if int(e[ip]) - int(e[im_]) != want:
                return False
        return True

    ident_c = DaMap(d).to_complex()
    a_nl = ident_c.copy()
    gen_rows = [Tpsa(d, dtype=complex) for _ in range(d.nv)]
    degs = d.degs

    # removal graded by phase-space degree (spectator pt/parameter powers in
    # ascending sub-passes), so each factor level matches the factorization
    # the scalar pipeline would produce at every parameter value; this makes
    # the parameter derivatives of tunes and generating-function terms exact
    vdeg = exps[:, dyn].sum(axis=1).astype(np.int64)
    sdeg = degs - vdeg

    def removal_pass(vn: int, sp: int) -> bool:
        Tn = ident_c.copy()
        any_term = False
        pick = (vdeg == vn) & (sdeg == sp)
        for slot in dyn:
            row = N.rows[slot]
            sel = np.nonzero(pick & (row.coef != 0))[0]
            lam_row = lam_slot[slot]
            for idx in sel:
                e = exps[idx]
                g = row.coef[idx] / lam_row
                lam_m = lam_of_mono(e)
                div = lam_m - lam_row
                if structural(e, slot):
                    continue
                if abs(div) < 1e-9:
                    pat = tuple(int(e[ip]) - int(e[im_]) for (ip, im_) in planes)
                    if preserve:
                        continue
                    raise OpticsError(
                        f"small divisor |1 - e^(i m.mu)| < 1e-9 for resonance "
                        f"m={pat} at order {vn + sp} (set preserve to keep it in r)")
                t = lam_row * g / div
                Tn.rows[slot].coef[idx] += t
                gen_rows[slot].coef[idx] += t
                any_term = True
        if vn == 1:
            # gauge: structural linear terms are free; pick them so the
            # parametric linear normalization keeps the Courant-Snyder
            # convention (zero phase, unit symplectic norm) at every
            # parameter/pt value: u = i Im(v), v the removed h- partner.
            for (ip, im_) in planes:
                other = [s for s in dyn if s not in (ip, im_)]
                for idx in np.nonzero(pick)[0]:
                    e = exps[idx]
                    if e[ip] != 0 or e[im_] != 1 or any(e[s] for s in other):
                        continue
                    v = Tn.rows[ip].coef[idx]
                    if v == 0:
                        continue
                    u = 1j * v.imag
                    e2 = e.copy()
                    e2[ip], e2[im_] = 1, 0
                    idx2 = int(d.lookup(e2[None, :])[0])
                    Tn.rows[ip].coef[idx2] += u
                    gen_rows[ip].coef[idx2] += u
                    Tn.rows[im_].coef[idx] += np.conj(u)
                    gen_rows[im_].coef[idx] += np.conj(u)
                    any_term = True
        if not any_term:
            return False
        Tmap = DaMap(d, [Tn.rows[i] - ident_c.rows[i] for i in range(d.nv)])
        an_inv = _nilpotent_inverse(Tmap, max(2, vn + sp))
        return Tn, an_inv

    for vn in range(1, d.mo + 1):
        sp0 = 1 if vn == 1 else 0
        for sp in range(sp0, d.mo - vn + 1):
            got = removal_pass(vn, sp)
            if not got:
                continue
            Tn, an_inv = got
            N = an_inv.compose(N.compose(Tn))
            a_nl = a_nl.compose(Tn)

    # reassemble the real normalizing map
    a_nl_real = Phi.compose(a_nl.compose(Phinv))
    rows_real = []
    for r_ in a_nl_real.rows:
        im = float(np.abs(r_.coef.imag).max())
        if im > 1e-9:
            raise OpticsError(f"phasor round trip left imaginary parts ({im:.2e})")
        rows_real.append(r_.real)
    a = a0.compose(A1map.compose(DaMap(d, rows_real)))

    # the fully normalized map IS r; realify it from the phasor basis
    # (check_factorization then validates the whole pipeline independently)
    r_real = Phi.compose(N.compose(Phinv))
    r_rows = []
    for r_ in r_real.rows:
        im = float(np.abs(r_.coef.imag).max())
        if im > 1e-9:
            raise OpticsError(f"phasor round trip left imaginary parts ({im:.2e})")
        r_rows.append(r_.real)
    r_map = DaMap(d, r_rows)

    # tune series from the structurally resonant content of r
    r_ph = N
    nus = []
    for pi, (ip, im_) in enumerate(planes):
        row = r_ph.rows[ip]
        g = Tpsa(d, dtype=complex)
        nz = np.nonzero(row.coef)[0]
        for idx in nz:
            e = exps[idx].copy()
            if not structural(e, ip):
                continue
            e[ip] -= 1
            g.coef[d.lookup(e[None, :])[0]] += row.coef[idx]
        lg = analytic("log", g)
        nu = lg * (-1j / (2 * math.pi))
        nus.append(nu)

    nf = NormalForm(m, a, r_map, planes, tunes, nus, gen_rows, pt_slot)
    return nf


# -- twiss ---------------------------------------------------------------------

def _cs_row(A: np.ndarray, planes) -> dict:
    out = {}
    labels = {0: "11", 1: "22", 2: "33"}
    for pi, (ip, im_) in enumerate(planes[:2]):
        crow = 0 if pi == 0 else 2
        b = A[crow, ip] ** 2 + A[crow, im_] ** 2
        alf = -(A[crow, ip] * A[crow + 1, ip] + A[crow, im_] * A[crow + 1, im_])
        phi = math.atan2(A[crow, im_], A[crow, ip])
        out[f"beta{labels[pi]}"] = b
        out[f"alfa{labels[pi]}"] = alf
        out[f"phi{pi + 1}"] = phi
    return out


def twiss(seq: Sequence, mapdef: int = 1, X0: DaMap | None = None,
          trkrdt=None, range=None, preserve: bool = False,
          codim: int | None = None, guess=None, init: dict | None = None) -> MTable:
    """Optical functions around a closed ring (or along an open line).

    Ring mode runs cofind, computes the normal form of the one-turn map,
    then tracks the normalizing map a element by element to fill the rows.
    Headers carry q1, q2 (full tunes from accumulated phase) plus dq1, dq2
    when the map order allows; a trkrdt list of f_jklm labels appends
    complex RDT columns extracted in the local phasor basis.

    Open-line mode: pass ``init`` with beta11/beta22 (alfa11, alfa22, dx,
    dpx, orbit optional); the given optics propagate from the start, and
    the q1/q2 headers report the line's phase advances.
    """
    if init is not None:
        nf = None
        planes = [(0, 1), (2, 3)]
        d = descriptor(6, mapdef)
        A = np.eye(6)
        for pi, (ip, im_) in enumerate(planes):
            b = float(init[f"beta{pi + 1}{pi + 1}"])
            alf = float(init.get(f"alfa{pi + 1}{pi + 1}", 0.0))
            if b <= 0:
                raise OpticsError(f"init beta{pi + 1}{pi + 1} must be positive")
            sb = math.sqrt(b)
            A[ip, ip] = sb
            A[im_, ip] = -alf / sb
            A[im_, im_] = 1.0 / sb
        A[0, 5] = float(init.get("dx", 0.0))
        A[1, 5] = float(init.get("dpx", 0.0))
        orbit = np.asarray(init.get("orbit", np.zeros(6)), dtype=float)
        a_run = DaMap.from_linear(d, A, orbit)
    else:
        co = cofind(seq, guess=guess, codim=codim,
                    order=max(mapdef, 2 if trkrdt else mapdef), X0=X0)
        m = co.map
        d = m.desc
        orbit = co.orbit

        m0 = m.copy()
        for i in _range(6):
            m0.rows[i].coef[0] -= orbit[i]
        nf = normal(m0, preserve=preserve)
        planes = nf.planes

        a_run = nf.a.copy()
        for i in _range(6):
            a_run.rows[i].coef[0] += orbit[i]

    labels = []
    if trkrdt:
        labels = [s if isinstance(s, str) else s for s in
                  (trkrdt.split(",") if isinstance(trkrdt, str) else trkrdt)]
        labels = [s.strip() for s in labels if s.strip()]

    flw = MFlow(seq, seq.beam, 1)
    st = TrackState.from_damap(a_run)

    names, kinds, svals, lvals = ["$start"], ["marker"], [0.0], [0.0]
    rows_data: list[dict] = []
    Phi, Phinv = (_phasor_maps(d, planes) if labels else (None, None))

    def snapshot():
        a_s = st.to_damap(d)
        E, A = a_s.extract()
        rec = _cs_row(A, planes)
        rec.update({k: E[i] for i, k in
                    enumerate(("x", "px", "y", "py", "t", "pt"))})
        rec["dx"] = a_s.rows[0].get(_unit_mono(d, 5))
        rec["dpx"] = a_s.rows[1].get(_unit_mono(d, 5))
        if labels:
            fvals = _local_rdts(a_s, planes, labels, Phi, Phinv)
            rec.update(fvals)
        return rec

    rows_data.append(snapshot())

    idx = _range_indices(seq, None)
    for j in idx:
        place = seq.places[j]
        flw.s = place.s0
        track_element(place.element, flw, st)
        flw.s = place.s1
        names.append(place.name)
        kinds.append(place.element.kind)
        svals.append(place.s1)
        lvals.append(place.element.l)
        rows_data.append(snapshot())

    # unwrap phases into non-decreasing mu
    mus = {1: [], 2: []}
    for pi in (1, 2):
        wind = 0
        prev = None
        for rec in rows_data:
            phi = rec.get(f"phi{pi}")
            if phi is None:
                mus[pi].append(0.0)
                continue
            if prev is not None and phi < prev - 1e-9:
                wind += 1
            mus[pi].append((phi + 2 * math.pi * wind) / (2 * math.pi))
            prev = phi
    q1_full = mus[1][-1] if mus[1] else 0.0
    q2_full = mus[2][-1] if mus[2] else 0.0

    t = MTable(f"twiss.{seq.name}")
    t.add_col("name", names)
    t.add_col("kind", kinds)
    t.add_col("s", np.asarray(svals))
    t.add_col("l", np.asarray(lvals))
    for key in ("beta11", "alfa11", "beta22", "alfa22"):
        t.add_col(key, np.asarray([rec.get(key, 0.0) for rec in rows_data]))
    t.add_col("mu1", np.asarray(mus[1]))
    t.add_col("mu2", np.asarray(mus[2]))
    for key in ("dx", "dpx", "x", "px", "y", "py", "t", "pt"):
        t.add_col(key, np.asarray([float(np.real(rec.get(key, 0.0)))
                                   for rec in rows_data]))
    for lab in labels:
        t.add_col(lab, np.asarray([rec[lab] for rec in rows_data], dtype=complex))

    t.header.update({
        "q1": q1_full, "q2": q2_full,
        "length": seq.length,
        "energy": seq.beam.energy if seq.beam else 0.0,
        "orbit": float(np.abs(orbit).max()),
    })
    if nf is not None:
        if d.mo >= 2 and nf._pt_slot is not None:
            t.header["dq1"] = nf.dq(0)
            t.header["dq2"] = nf.dq(1)
        t.header["q1_frac"] = nf.tunes[0]
        t.header["q2_frac"] = nf.tunes[1] if len(nf.tunes) > 1 else 0.0

    if range is not None:
        sub = t.select_range(range)
        sub.header.update(t.header)
        return sub
    return t


def _unit_mono(d: Descriptor, slot: int):
    e = [0] * d.n
    e[slot] = 1
    return e


def _local_rdts(a_s: DaMap, planes, labels, Phi, Phinv) -> dict:
    """Generating-function coefficients of a_s in the local phasor basis."""
    d = a_s.desc
    E, A = a_s.extract()
    L = DaMap.from_linear(d, A, E)
    anl = L.invert().compose(a_s).to_complex()
    anl = Phinv.compose(anl.compose(Phi))

    ident = DaMap(d).to_complex()
    gen = [Tpsa(d, dtype=complex) for _ in range(d.nv)]
    degs = d.degs
    for nord in range(2, d.mo + 1):
        Tn = ident.copy()
        found = False
        for i in range(d.nv):
            row = anl.rows[i]
            sel = np.nonzero((degs == nord) & (row.coef != 0))[0]
            if len(sel):
                found = True
                Tn.rows[i].coef[sel] += row.coef[sel]
                gen[i].coef[sel] += row.coef[sel]
        if not found:
            continue
        Tmap = DaMap(d, [Tn.rows[i] - ident.rows[i] for i in range(d.nv)])
        anl = _nilpotent_inverse(Tmap, nord).compose(anl)

    out = {}
    for lab in labels:
        digits = lab[1:] if lab.startswith("f") else lab
        if len(digits) != 4 or not digits.isdigit():
            raise OpticsError(f"malformed RDT label {lab!r}")
        j, k, l, m = (int(c) for c in digits)
        if j + k + l + m > d.mo:
            raise OpticsError(f"RDT {lab} order exceeds map order {d.mo}")
        out[lab] = _gnfu_from_rows(gen, d, planes, j, k, l, m, None)
    return out


def rdt_along(seq: Sequence, X0: DaMap, labels) -> MTable:
    """Twiss table extended with the requested f_jklm columns."""
    return twiss(seq, X0=X0, trkrdt=labels)
