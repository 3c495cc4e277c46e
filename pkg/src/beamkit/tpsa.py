"""Generalized truncated power series algebra (TPSA).

A :class:`Descriptor` fixes the algebra signature: ``nv`` phase-space
variables truncated at total order ``mo``, plus ``np`` named parameters
(knobs) whose combined degree inside any monomial is capped separately at
``po <= mo``.  A :class:`Tpsa` is one truncated multivariate series whose
coefficients are stored densely, indexed by the descriptor's canonical
monomial enumeration.

Canonical monomial order
------------------------
Graded by total degree; inside a degree stratum monomials are enumerated by
ascending exponent of the *last* slot, recursing towards the first slot
(variables occupy the leading slots, parameters the trailing ones).  This
puts the constant monomial at index 0 and the unit monomials at indices
``1 .. nv+np`` in declaration order.  The rank of a monomial is computed
slot by slot from small prefix-count tables, so indexing stays linear in
the number of slots and works for hundreds of parameters without any
exponential-range intermediate.

Descriptors are immutable after construction and shareable across threads;
Tpsa values are single-writer.
"""

from __future__ import annotations

import cmath
import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Descriptor",
    "Tpsa",
    "DescriptorError",
    "descriptor",
    "lincomb",
    "analytic",
    "sqrt",
    "exp",
    "log",
    "sin",
    "cos",
    "asin",
    "inv",
]

#: Canonical phase-space variable names, in slot order.
VARNAMES = ("x", "px", "y", "py", "t", "pt")

_MAX_COEFS = 8_000_000  # desk-scale guard on dense storage


class DescriptorError(ValueError):
    """Invalid descriptor construction or operand descriptor mismatch."""


def _ncomp(s: int, k: int) -> int:
    """Number of ways to write s as an ordered sum of k non-negative ints."""
    if k == 0:
        return 1 if s == 0 else 0
    return math.comb(s + k - 1, k - 1)


_DESC_CACHE: dict[tuple, "Descriptor"] = {}


def descriptor(nv: int, mo: int, np_: int = 0, po: int | None = None,
               pn: Sequence[str] | None = None) -> "Descriptor":
    """Return a (cached) descriptor; equal signatures share one instance."""
    if np_ > 0 and pn is None:
        pn = tuple(f"k{i + 1}" for i in range(np_))
    key = (nv, mo, np_, po, tuple(pn) if pn else ())
    d = _DESC_CACHE.get(key)
    if d is None:
        d = Descriptor(nv, mo, np_, po, pn)
        _DESC_CACHE[key] = d
    return d


class Descriptor:
    """Algebra signature with precomputed monomial enumeration tables.

    Parameters
    ----------
    nv : number of variables (>= 1).
    mo : maximum total order of any monomial (>= 0).
    np_ : number of parameters (>= 0).
    po : maximum degree the parameter slots may contribute (1..mo when
        parameters are present; forced to 0 otherwise).
    pn : parameter names, unique and disjoint from the variable names.
    """

    __slots__ = ("nv", "mo", "np", "po", "pn", "n", "size", "exps", "degs",
                 "pdegs", "offsets", "_comp", "_okey", "_sorted", "_order",
                 "_pslot")

    def __init__(self, nv: int, mo: int, np_: int = 0,
                 po: int | None = None, pn: Sequence[str] | None = None):
        if not isinstance(nv, int) or nv < 1:
            raise DescriptorError(f"nv must be a positive integer, got {nv!r}")
        if not isinstance(mo, int) or mo < 0:
            raise DescriptorError(f"mo must be a non-negative integer, got {mo!r}")
        if not isinstance(np_, int) or np_ < 0:
            raise DescriptorError(f"np must be a non-negative integer, got {np_!r}")
        if np_ == 0:
            po = 0
            pn = ()
        else:
            if po is None:
                po = min(1, mo)
            if not isinstance(po, int) or po < 1 or po > mo:
                raise DescriptorError(
                    f"po must satisfy 1 <= po <= mo for np={np_} parameters, got po={po!r}")
            if pn is None:
                pn = tuple(f"k{i + 1}" for i in range(np_))
            pn = tuple(str(s) for s in pn)
            if len(pn) != np_:
                raise DescriptorError(f"pn has {len(pn)} names for np={np_} parameters")
            if len(set(pn)) != len(pn):
                raise DescriptorError(f"duplicate parameter name in pn={pn}")
            clash = set(pn) & set(VARNAMES[:min(nv, len(VARNAMES))])
            if clash:
                raise DescriptorError(f"parameter names collide with variables: {sorted(clash)}")
        if mo > 63:
            raise DescriptorError(f"mo={mo} beyond supported range (<= 63)")

        self.nv = nv
        self.mo = mo
        self.np = np_
        self.po = po
        self.pn = tuple(pn)
        self.n = nv + np_
        self._pslot = {name: nv + i for i, name in enumerate(self.pn)}

        # compositions table: _comp[s, k] = #ways to write s as k parts
        self._comp = np.zeros((mo + 1, self.n + 1), dtype=np.int64)
        for s in range(mo + 1):
            for k in range(self.n + 1):
                self._comp[s, k] = _ncomp(s, k)

        counts = [self._count_exact(d) for d in range(mo + 1)]
        self.offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        self.size = int(self.offsets[-1])
        if self.size > _MAX_COEFS:
            raise DescriptorError(
                f"descriptor too large: {self.size} monomials (limit {_MAX_COEFS})")

        rows: list[tuple[int, ...]] = []
        for d in range(mo + 1):
            rows.extend(self._enumerate_degree(d))
        self.exps = np.array(rows, dtype=np.uint8).reshape(self.size, self.n)
        self.degs = self.exps.sum(axis=1).astype(np.int64)
        self.pdegs = self.exps[:, nv:].sum(axis=1).astype(np.int64) if np_ else \
            np.zeros(self.size, dtype=np.int64)

        # memcmp-ordered key view for vectorized exponent -> index lookup
        flat = np.ascontiguousarray(self.exps)
        self._okey = flat.view(np.dtype((np.void, self.n))).ravel()
        self._order = np.argsort(self._okey)
        self._sorted = self._okey[self._order]

    # -- enumeration ------------------------------------------------------

    def _count_exact(self, d: int) -> int:
        c = 0
        for p in range(min(self.po, d) + 1):
            c += _ncomp(p, self.np) * _ncomp(d - p, self.nv)
        return c

    def _enumerate_degree(self, d: int):
        n, nv, po = self.n, self.nv, self.po
        out: list[tuple[int, ...]] = []
        e = [0] * n

        def rec(j: int, r: int, pb: int):
            if j == 0:
                e[0] = r
                out.append(tuple(e))
                e[0] = 0
                return
            cap = r if j < nv else min(r, pb)
            for f in range(cap + 1):
                e[j] = f
                rec(j - 1, r - f, pb - f if j >= nv else pb)
            e[j] = 0

        rec(n - 1, d, po)
        return out

    # -- indexing ---------------------------------------------------------

    def _ways(self, j: int, s: int, pb: int) -> int:
        """Admissible fillings of slots 0..j-1 with total degree s."""
        if s < 0:
            return 0
        if j <= self.nv:
            return int(self._comp[s, j])
        npar = j - self.nv
        hi = min(pb, s)
        if hi < 0:
            return 0
        acc = 0
        for t in range(hi + 1):
            acc += int(self._comp[t, npar]) * int(self._comp[s - t, self.nv])
        return acc

    def check_mono(self, m: Sequence[int]) -> tuple[int, int]:
        """Validate a monomial, returning (total degree, parameter degree)."""
        if len(m) != self.n:
            raise DescriptorError(f"monomial length {len(m)} != nv+np = {self.n}")
        if any((not float(e).is_integer()) or e < 0 for e in m):
            raise DescriptorError(f"monomial exponents must be non-negative integers: {m}")
        d = int(sum(m))
        pd = int(sum(m[self.nv:]))
        if d > self.mo:
            raise DescriptorError(f"monomial {tuple(m)} violates total order cap mo={self.mo}")
        if pd > self.po:
            raise DescriptorError(f"monomial {tuple(m)} violates parameter order cap po={self.po}")
        return d, pd

    def mono_index(self, m: Sequence[int]) -> int:
        """Canonical index of an admissible monomial (graded order)."""
        d, _ = self.check_mono(m)
        r = d
        p_above = 0
        acc = 0
        for j in range(self.n - 1, 0, -1):
            ej = int(m[j])
            for f in range(ej):
                pb = self.po - p_above - (f if j >= self.nv else 0)
                acc += self._ways(j, r - f, pb)
            r -= ej
            if j >= self.nv:
                p_above += ej
        return int(self.offsets[d]) + acc

    def index_mono(self, i: int) -> tuple[int, ...]:
        """Inverse of :meth:`mono_index`."""
        if not 0 <= i < self.size:
            raise DescriptorError(f"index {i} out of range [0, {self.size})")
        d = int(np.searchsorted(self.offsets, i, side="right")) - 1
        rho = i - int(self.offsets[d])
        e = [0] * self.n
        r = d
        p_above = 0
        for j in range(self.n - 1, 0, -1):
            f = 0
            while True:
                if j >= self.nv and p_above + f > self.po:
                    raise AssertionError("unrank overflow")  # pragma: no cover
                pb = self.po - p_above - (f if j >= self.nv else 0)
                c = self._ways(j, r - f, pb)
                if rho < c:
                    break
                rho -= c
                f += 1
            e[j] = f
            r -= f
            if j >= self.nv:
                p_above += f
        e[0] = r
        return tuple(e)

    def size_order(self, order: int) -> int:
        """Count of admissible monomials of total degree <= order."""
        if not 0 <= order <= self.mo:
            raise DescriptorError(f"order {order} out of range [0, {self.mo}]")
        return int(self.offsets[order + 1])

    def lookup(self, rows: np.ndarray) -> np.ndarray:
        """Vectorized exponent-row -> index (rows must be admissible)."""
        rows = np.ascontiguousarray(rows, dtype=np.uint8)
        keys = rows.view(np.dtype((np.void, self.n))).ravel()
        pos = np.searchsorted(self._sorted, keys)
        return self._order[pos]

    def pslot(self, name: str) -> int:
        """Slot index of a named parameter."""
        try:
            return self._pslot[name]
        except KeyError:
            raise DescriptorError(f"unknown parameter {name!r}; have {list(self.pn)}") from None

    # -- constructors -----------------------------------------------------

    def tpsa(self, value: complex = 0.0, dtype=None) -> "Tpsa":
        t = Tpsa(self, dtype=dtype or (complex if isinstance(value, complex) else float))
        if value != 0:
            t.coef[0] = value
        return t

    def var(self, slot: int, value: float = 0.0, dtype=None) -> "Tpsa":
        """Series value + 1*slot (slot is 0-based over variables then parameters)."""
        if not 0 <= slot < self.n:
            raise DescriptorError(f"slot {slot} out of range [0, {self.n})")
        if self.mo < 1 or (slot >= self.nv and self.po < 1):
            raise DescriptorError("descriptor cannot represent a first-order term")
        t = Tpsa(self, dtype=dtype or float)
        t.coef[0] = value
        t.coef[1 + slot] = 1.0
        return t

    def param(self, name: str, value: float = 0.0) -> "Tpsa":
        return self.var(self.pslot(name), value)

    def mono(self, m: Sequence[int], coef: complex = 1.0) -> "Tpsa":
        t = Tpsa(self, dtype=complex if isinstance(coef, complex) else float)
        t.coef[self.mono_index(m)] = coef
        return t

    def __repr__(self):
        return (f"Descriptor(nv={self.nv}, mo={self.mo}, np={self.np}, "
                f"po={self.po}, size={self.size})")


def _coerce_pair(a: "Tpsa", b) -> tuple["Tpsa", "Tpsa"]:
    if isinstance(b, Tpsa):
        if a.desc is not b.desc:
            raise DescriptorError("operands built on different descriptors")
        return a, b
    raise TypeError(f"cannot combine Tpsa with {type(b).__name__}")


class Tpsa:
    """One truncated multivariate series over a shared descriptor."""

    __slots__ = ("desc", "coef")

    def __init__(self, desc: Descriptor, coef: np.ndarray | None = None, dtype=float):
        self.desc = desc
        if coef is None:
            self.coef = np.zeros(desc.size, dtype=np.complex128 if dtype is complex else np.float64)
        else:
            self.coef = coef

    # -- basic queries ----------------------------------------------------

    @property
    def iscomplex(self) -> bool:
        return self.coef.dtype.kind == "c"

    @property
    def hi(self) -> int:
        """Highest total order currently holding a nonzero coefficient."""
        nz = np.nonzero(self.coef)[0]
        return int(self.desc.degs[nz[-1]]) if len(nz) else 0

    def copy(self) -> "Tpsa":
        return Tpsa(self.desc, self.coef.copy())

    def get0(self) -> complex:
        v = self.coef[0]
        return complex(v) if self.iscomplex else float(v)

    def get(self, m: Sequence[int]) -> complex:
        v = self.coef[self.desc.mono_index(m)]
        return complex(v) if self.iscomplex else float(v)

    def set(self, m: Sequence[int], v) -> None:
        self.coef[self.desc.mono_index(m)] = v

    def getm(self, m):
        return self.get(m)

    def setm(self, m, v):
        self.set(m, v)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tpsa):
            _coerce_pair(self, other)
            return Tpsa(self.desc, self.coef + other.coef)
        c = self.coef.copy() if not np.iscomplexobj(self.coef) and not isinstance(other, complex) \
            else self.coef.astype(complex, copy=True)
        c[0] += other
        return Tpsa(self.desc, c)

    __radd__ = __add__

    def __neg__(self):
        return Tpsa(self.desc, -self.coef)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tpsa) else -other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Tpsa):
            return Tpsa(self.desc, self.coef * other)
        _coerce_pair(self, other)
        return _mul(self, other)

    def __rmul__(self, other):
        return Tpsa(self.desc, self.coef * other)

    def __truediv__(self, other):
        if isinstance(other, Tpsa):
            return self * analytic("inv", other)
        return Tpsa(self.desc, self.coef / other)

    def __rtruediv__(self, other):
        return analytic("inv", self) * other

    def __pow__(self, n):
        if not isinstance(n, int):
            raise TypeError("Tpsa power requires an integer exponent")
        if n < 0:
            return analytic("inv", self) ** (-n)
        out = self.desc.tpsa(1.0, dtype=complex if self.iscomplex else float)
        base = self
        k = n
        while k:
            if k & 1:
                out = out * base
            base = base * base if k > 1 else base
            k >>= 1
        return out

    # -- calculus / functions ---------------------------------------------

    def deriv(self, slot: int) -> "Tpsa":
        """Formal partial derivative with respect to one slot (0-based)."""
        d = self.desc
        if not 0 <= slot < d.n:
            raise DescriptorError(f"slot {slot} out of range [0, {d.n})")
        nz = np.nonzero(self.coef)[0]
        out = Tpsa(d, dtype=complex if self.iscomplex else float)
        if len(nz) == 0:
            return out
        sel = nz[d.exps[nz, slot] >= 1]
        if len(sel) == 0:
            return out
        rows = d.exps[sel].copy()
        mult = rows[:, slot].astype(out.coef.dtype)
        rows[:, slot] -= 1
        out.coef[d.lookup(rows)] = self.coef[sel] * mult
        return out

    def eval(self, vals: Sequence[float]) -> complex:
        """Evaluate as a polynomial at a full (variables + parameters) point."""
        d = self.desc
        vals = np.asarray(vals)
        if vals.shape != (d.n,):
            raise ValueError(f"expected {d.n} values, got {vals.shape}")
        nz = np.nonzero(self.coef)[0]
        if len(nz) == 0:
            return 0.0
        powers = vals[None, :] ** d.exps[nz]
        s = (self.coef[nz] * powers.prod(axis=1)).sum()
        return complex(s) if self.iscomplex else float(s)

    def sqrt(self):
        return analytic("sqrt", self)

    def exp(self):
        return analytic("exp", self)

    def log(self):
        return analytic("log", self)

    def sin(self):
        return analytic("sin", self)

    def cos(self):
        return analytic("cos", self)

    def asin(self):
        return analytic("asin", self)

    def inv(self):
        return analytic("inv", self)

    def conj(self) -> "Tpsa":
        return Tpsa(self.desc, np.conj(self.coef))

    @property
    def real(self) -> "Tpsa":
        return Tpsa(self.desc, np.real(self.coef).copy())

    @property
    def imag(self) -> "Tpsa":
        return Tpsa(self.desc, np.imag(self.coef).copy())

    def to_complex(self) -> "Tpsa":
        return Tpsa(self.desc, self.coef.astype(np.complex128))

    # -- io -----------------------------------------------------------------

    def dump(self) -> str:
        """One line per nonzero coefficient: ``<index> <exponents> <coef>``."""
        d = self.desc
        lines = []
        cast = complex if self.iscomplex else float
        for i in np.nonzero(self.coef)[0]:
            ev = " ".join(str(int(e)) for e in d.exps[i])
            lines.append(f"{int(i)} [{ev}] {cast(self.coef[i])!r}")
        return "\n".join(lines)

    def __repr__(self):
        nz = int(np.count_nonzero(self.coef))
        return f"Tpsa(nv={self.desc.nv}, np={self.desc.np}, mo={self.desc.mo}, nnz={nz}, c0={self.get0()})"


def _mul(a: Tpsa, b: Tpsa) -> Tpsa:
    d = a.desc
    dtype = complex if (a.iscomplex or b.iscomplex) else float
    out = Tpsa(d, dtype=dtype)
    ia = np.nonzero(a.coef)[0]
    ib = np.nonzero(b.coef)[0]
    if len(ia) == 0 or len(ib) == 0:
        return out
    # scalar fast paths
    if len(ia) == 1 and ia[0] == 0:
        out.coef[:] = b.coef * a.coef[0]
        return out
    if len(ib) == 1 and ib[0] == 0:
        out.coef[:] = a.coef * b.coef[0]
        return out
    ok = (d.degs[ia][:, None] + d.degs[ib][None, :]) <= d.mo
    if d.np:
        ok &= (d.pdegs[ia][:, None] + d.pdegs[ib][None, :]) <= d.po
    pi, pj = np.nonzero(ok)
    if len(pi) == 0:
        return out
    rows = d.exps[ia[pi]] + d.exps[ib[pj]]
    idx = d.lookup(rows)
    vals = a.coef[ia[pi]] * b.coef[ib[pj]]
    if dtype is complex:
        out.coef[:] = (np.bincount(idx, weights=vals.real, minlength=d.size)
                       + 1j * np.bincount(idx, weights=vals.imag, minlength=d.size))
    else:
        out.coef[:] = np.bincount(idx, weights=vals, minlength=d.size)
    return out


def lincomb(terms: Iterable[tuple[complex, Tpsa]]) -> Tpsa:
    """Coefficient-wise linear combination of series on one descriptor."""
    terms = list(terms)
    if not terms:
        raise ValueError("lincomb of no terms")
    d = terms[0][1].desc
    dtype = complex if any(t.iscomplex or isinstance(s, complex) for s, t in terms) else float
    out = Tpsa(d, dtype=dtype)
    for s, t in terms:
        if t.desc is not d:
            raise DescriptorError("operands built on different descriptors")
        out.coef += s * t.coef
    return out


# -- analytic functions ---------------------------------------------------

def _taylor_coeffs(tag: str, a0, mo: int):
    """Taylor coefficients c_k of f(a0 + u) in u, k = 0..mo."""
    iscplx = isinstance(a0, complex)
    cm = cmath if iscplx else math
    if tag == "inv":
        if a0 == 0:
            raise ZeroDivisionError("inv of series with zero constant part")
        return [(-1) ** k / a0 ** (k + 1) for k in range(mo + 1)]
    if tag == "sqrt":
        if (not iscplx and a0 <= 0) or (iscplx and a0 == 0):
            raise ValueError(f"sqrt of series with non-positive constant part a0={a0}")
        c = [cm.sqrt(a0)]
        for k in range(1, mo + 1):
            c.append(c[-1] * (1.5 - k) / (k * a0))
        return c
    if tag == "exp":
        e = cm.exp(a0)
        return [e / math.factorial(k) for k in range(mo + 1)]
    if tag == "log":
        if (not iscplx and a0 <= 0) or (iscplx and a0 == 0):
            raise ValueError(f"log of series with non-positive constant part a0={a0}")
        c = [cm.log(a0)]
        for k in range(1, mo + 1):
            c.append((-1) ** (k + 1) / (k * a0 ** k))
        return c
    if tag == "sin":
        return [cm.sin(a0 + k * math.pi / 2) / math.factorial(k) for k in range(mo + 1)]
    if tag == "cos":
        return [cm.cos(a0 + k * math.pi / 2) / math.factorial(k) for k in range(mo + 1)]
    raise ValueError(f"unknown analytic function {tag!r}")


def analytic(tag: str, a: Tpsa) -> Tpsa:
    """Apply an analytic function to a series.

    The Taylor expansion of ``f`` about the constant part ``a0`` is composed
    with the nilpotent part ``a - a0`` and truncated at the descriptor's
    maximum order.  Supported tags: inv, sqrt, exp, log, sin, cos, asin.
    """
    d = a.desc
    a0 = a.get0()
    if tag == "asin":
        return _asin(a)
    cs = _taylor_coeffs(tag, a0, d.mo)
    u = a.copy()
    u.coef[0] = 0.0
    dtype = complex if (a.iscomplex or any(isinstance(c, complex) for c in cs)) else float
    out = d.tpsa(cs[d.mo], dtype=dtype)
    for k in range(d.mo - 1, -1, -1):
        out = out * u + cs[k]
    return out


def _asin(a: Tpsa) -> Tpsa:
    """arcsine via Newton iteration on sin, seeded at the constant part."""
    a0 = a.get0()
    if not a.iscomplex and not -1.0 < a0 < 1.0:
        raise ValueError(f"asin of series with constant part a0={a0} outside (-1, 1)")
    v = a.desc.tpsa(cmath.asin(a0) if isinstance(a0, complex) else math.asin(a0),
                    dtype=complex if a.iscomplex else float)
    # quadratic convergence in nilpotent order: ceil(log2(mo+1)) rounds
    rounds = max(1, math.ceil(math.log2(a.desc.mo + 1)))
    for _ in range(rounds):
        v = v - (analytic("sin", v) - a) * analytic("inv", analytic("cos", v))
    return v


# -- scalar/series dispatch helpers ---------------------------------------

def _dispatch(tag: str, v):
    if isinstance(v, Tpsa):
        return analytic(tag, v)
    if tag == "inv":
        return 1.0 / v
    return getattr(cmath if isinstance(v, complex) else math, tag)(v)


def sqrt(v):
    return _dispatch("sqrt", v)


def exp(v):
    return _dispatch("exp", v)


def log(v):
    return _dispatch("log", v)


def sin(v):
    return _dispatch("sin", v)


def cos(v):
    return _dispatch("cos", v)


def asin(v):
    return _dispatch("asin", v)


def inv(v):
    return _dispatch("inv", v)
