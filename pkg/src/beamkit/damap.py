"""Parametric differential-algebra maps over the phase space.

A :class:`DaMap` is an ordered collection of ``nv`` truncated series, one
per phase-space variable (named from ``x, px, y, py, t, pt``), sharing one
descriptor.  Parameters never appear as rows: they live inside the row
coefficients and compose to themselves.  DaMap values are single-writer
and freely transferable between threads.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tpsa import Descriptor, DescriptorError, Tpsa, VARNAMES, descriptor

__all__ = ["DaMap"]


class DaMap:
    """Ordered list of series rows representing a Taylor transfer map."""

    __slots__ = ("desc", "rows", "names")

    def __init__(self, desc: Descriptor, rows: Sequence[Tpsa] | None = None):
        if not 1 <= desc.nv <= len(VARNAMES):
            raise DescriptorError(f"DaMap supports 1..{len(VARNAMES)} variables, got nv={desc.nv}")
        self.desc = desc
        self.names = VARNAMES[:desc.nv]
        if rows is None:
            rows = [desc.var(i) for i in range(desc.nv)]
        else:
            rows = list(rows)
            if len(rows) != desc.nv:
                raise ValueError(f"expected {desc.nv} rows, got {len(rows)}")
            for r in rows:
                if r.desc is not desc:
                    raise DescriptorError("row descriptor differs from map descriptor")
        self.rows = rows

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls, nv: int = 6, mo: int = 1, np_: int = 0,
                 po: int | None = None, pn: Sequence[str] | None = None,
                 orbit: Sequence[float] | None = None) -> "DaMap":
        """Identity map, optionally translated to an orbit point.

        Each declared parameter is retrievable as a first-order series with
        unit derivative on its own slot (see :meth:`param`).
        """
        d = descriptor(nv, mo, np_, po, pn)
        m = cls(d)
        if orbit is not None:
            orbit = np.asarray(orbit, dtype=float)
            if orbit.shape != (nv,):
                raise ValueError(f"orbit must have length {nv}")
            for i in range(nv):
                m.rows[i].coef[0] = orbit[i]
        return m

    @classmethod
    def from_linear(cls, desc: Descriptor, R: np.ndarray,
                    E: Sequence[float] | None = None, dtype=float) -> "DaMap":
        """Affine map with linear block R and constant part E."""
        nv = desc.nv
        R = np.asarray(R)
        if R.shape != (nv, nv):
            raise ValueError(f"R must be {nv}x{nv}")
        rows = []
        for i in range(nv):
            t = Tpsa(desc, dtype=complex if (dtype is complex or np.iscomplexobj(R)) else float)
            if E is not None:
                t.coef[0] = E[i]
            t.coef[1:1 + nv] = R[i, :]
            rows.append(t)
        return cls(desc, rows)

    def copy(self) -> "DaMap":
        return DaMap(self.desc, [r.copy() for r in self.rows])

    def to_complex(self) -> "DaMap":
        return DaMap(self.desc, [r.to_complex() for r in self.rows])

    @property
    def iscomplex(self) -> bool:
        return any(r.iscomplex for r in self.rows)

    # -- access -------------------------------------------------------------

    def param(self, name: str) -> Tpsa:
        """Parameter as a first-order series: value 0, unit slot derivative."""
        return self.desc.param(name)

    def __getitem__(self, key):
        if isinstance(key, int):
            return self.rows[key]
        if key in self.names:
            return self.rows[self.names.index(key)]
        return self.param(key)

    def __setitem__(self, key, row: Tpsa):
        i = key if isinstance(key, int) else self.names.index(key)
        if row.desc is not self.desc:
            raise DescriptorError("row descriptor differs from map descriptor")
        self.rows[i] = row

    def extract(self) -> tuple[np.ndarray, np.ndarray]:
        """Orbit vector E (constant parts) and Jacobian R (unit-monomial block)."""
        nv = self.desc.nv
        dtype = complex if self.iscomplex else float
        E = np.array([r.coef[0] for r in self.rows], dtype=dtype)
        R = np.array([r.coef[1:1 + nv] for r in self.rows], dtype=dtype)
        return E, R

    # -- evaluation / composition -------------------------------------------

    def eval(self, point: Sequence[float], params: Sequence[float] = ()) -> np.ndarray:
        d = self.desc
        point = np.asarray(point, dtype=float)
        params = np.asarray(params, dtype=float)
        if point.shape != (d.nv,):
            raise ValueError(f"point must have length {d.nv}")
        if params.shape != (d.np,):
            raise ValueError(f"params must have length {d.np}")
        vals = np.concatenate([point, params])
        out = [r.eval(vals) for r in self.rows]
        return np.array(out)

    def compose(self, g: "DaMap") -> "DaMap":
        """Substitute g's rows for this map's variables (truncated).

        Parameters substitute identically.  Nonzero constant parts of g are
        handled exactly: the polynomial rows of this map are effectively
        re-expanded about g's orbit.
        """
        d = self.desc
        if g.desc is not d:
            raise DescriptorError("compose requires identical descriptors")
        dtype = complex if (self.iscomplex or g.iscomplex) else float

        # union of monomials needed by any row of self
        needed: set[int] = set()
        for r in self.rows:
            needed.update(np.nonzero(r.coef)[0].tolist())
        needed.discard(0)

        # monomial products built on demand, memoized via one-exponent parents
        cache: dict[int, Tpsa] = {0: d.tpsa(1.0, dtype=dtype)}
        bases: dict[int, Tpsa] = {}

        def base(slot: int) -> Tpsa:
            b = bases.get(slot)
            if b is None:
                b = g.rows[slot] if slot < d.nv else d.var(slot)
                bases[slot] = b
            return b

        def build(i: int) -> Tpsa:
            got = cache.get(i)
            if got is not None:
                return got
            e = d.exps[i]
            slot = int(np.nonzero(e)[0][0])
            parent = e.copy()
            parent[slot] -= 1
            p = build(int(d.lookup(parent[None, :])[0]))
            val = p * base(slot)
            cache[i] = val
            return val

        rows_out = []
        for r in self.rows:
            acc = Tpsa(d, dtype=dtype)
            nz = np.nonzero(r.coef)[0]
            for i in nz:
                if i == 0:
                    acc.coef[0] += r.coef[0]
                else:
                    acc.coef += r.coef[i] * build(int(i)).coef
            rows_out.append(acc)
        return DaMap(d, rows_out)

    def invert(self) -> "DaMap":
        """Truncated inverse map via fixed-point iteration seeded with R^-1.

        Constant parts are translated away first, so the iteration runs in
        the nilpotent part of the algebra and terminates exactly after at
        most ``mo`` rounds; parameter-capped terms ride along unchanged in
        character.

        For constant-free maps the result is a two-sided inverse exact to
        the truncation order.  Nonzero constant parts E are inverted through
        the exact affine relation m^-1 = m0^-1 . T(-E); the residual of
        ``m.compose(m.invert())`` then scales with E times the dropped
        beyond-truncation terms, because truncation does not commute with
        translation.
        """
        d = self.desc
        nv = d.nv
        E, R = self.extract()
        det = np.linalg.det(R)
        if abs(det) <= 1e-12:
            raise ValueError(f"map linear part is singular: |det R| = {abs(det):.3e}")
        Rinv = np.linalg.inv(R)
        dtype = complex if self.iscomplex else float

        ainv = DaMap.from_linear(d, Rinv, dtype=dtype)
        # m = T_E . m0 with m0 constant-free; m^-1 = m0^-1 . T_(-E)
        m0 = self.copy()
        for i in range(nv):
            m0.rows[i].coef[0] = 0.0

        N = ainv
        if d.mo > 1 or self._has_param_terms():
            # remainder beyond the scalar linear block
            P = m0.copy()
            for i in range(nv):
                P.rows[i].coef[1:1 + nv] -= R[i, :]
            ident = DaMap(d)
            nontrivial = any(np.any(r.coef) for r in P.rows)
            for _ in range(d.mo if nontrivial else 0):
                PN = P.compose(N)
                inner = DaMap(d, [ident.rows[i] - PN.rows[i] for i in range(nv)])
                N = ainv.compose(inner)

        if np.any(E):
            shift = DaMap(d)
            for i in range(nv):
                shift.rows[i] = shift.rows[i] - E[i]
            N = N.compose(shift)
        return N

    def _has_param_terms(self) -> bool:
        if self.desc.np == 0:
            return False
        pd = self.desc.pdegs
        return any(np.any(pd[np.nonzero(r.coef)[0]] > 0) for r in self.rows)

    # -- io -------------------------------------------------------------------

    def dump(self) -> str:
        parts = []
        for name, r in zip(self.names, self.rows):
            parts.append(f"@ {name}")
            parts.append(r.dump())
        return "\n".join(parts)

    def __repr__(self):
        return f"DaMap(nv={self.desc.nv}, mo={self.desc.mo}, np={self.desc.np})"
