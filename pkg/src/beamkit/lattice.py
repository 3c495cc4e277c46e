"""Lattice building blocks: elements, beams, blines, sequences, environment.

The :class:`Env` mimics the lazily evaluated global workspace of MAD-X
style inputs: reading an undefined name creates it as scalar zero, deferred
expressions re-evaluate against current state on every read, and child
environments resolve through their parent before auto-creating.  Sequences
become immutable after construction and are shareable; an Env is
single-threaded mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Misalignment
from .tpsa import Tpsa

__all__ = ["Deferred", "Env", "Element", "Beam", "BLine", "Sequence", "Place",
           "LatticeError", "expand_bline", "build_sequence", "seq_from_line",
           "env_bind_knobs", "env_restore_knobs", "ELEMENT_KINDS"]


class LatticeError(ValueError):
    pass


class Deferred:
    """Lazily evaluated expression; re-evaluated on every read."""

    __slots__ = ("fn", "source")

    def __init__(self, fn, source: str = "<expr>"):
        self.fn = fn
        self.source = source

    def value(self):
        return self.fn()

    def __repr__(self):
        return f":= {self.source}"


def resolve(v):
    """Collapse deferred values (recursively for lists)."""
    while isinstance(v, Deferred):
        v = v.value()
    if isinstance(v, list):
        return [resolve(x) for x in v]
    return v


class Env:
    """Name -> value mapping with inheritance and auto-created zeros."""

    def __init__(self, parent: "Env | None" = None, name: str = ""):
        self.vars: dict[str, object] = {}
        self.parent = parent
        self.name = name

    def child(self, name: str = "") -> "Env":
        return Env(self, name)

    def defined(self, key: str) -> bool:
        return key in self.vars or (self.parent is not None and self.parent.defined(key))

    def raw(self, key: str):
        """Stored value without evaluating deferred expressions."""
        e: Env | None = self
        while e is not None:
            if key in e.vars:
                return e.vars[key]
            e = e.parent
        # auto-create on demand, like the MAD-X workspace
        self.vars[key] = 0.0
        return 0.0

    def __getitem__(self, key: str):
        return resolve(self.raw(key))

    def __setitem__(self, key: str, value):
        self.vars[key] = value

    def __contains__(self, key: str) -> bool:
        return self.defined(key)

    def __repr__(self):
        return f"Env({self.name or hex(id(self))}, {len(self.vars)} names)"


# -- elements --------------------------------------------------------------

ELEMENT_KINDS = {
    "marker", "drift", "sbend", "rbend", "quadrupole", "sextupole",
    "octupole", "multipole", "hkicker", "vkicker", "monitor", "rfcavity",
    "translation", "rotation",
}

_THIN_KINDS = {"marker", "multipole", "translation", "rotation"}


class Element:
    """One lattice element: a kind plus a bag of (possibly deferred) attributes.

    Any strength attribute may hold a scalar or a series (knob linking);
    deferred attributes re-evaluate on every read.
    """

    __slots__ = ("name", "kind", "attrs")

    def __init__(self, name: str, kind: str, **attrs):
        kind = kind.lower()
        if kind not in ELEMENT_KINDS:
            raise LatticeError(f"unknown element kind {kind!r} for {name!r}")
        self.name = name
        self.kind = kind
        self.attrs = dict(attrs)
        if kind in _THIN_KINDS and float(attrs.get("l", 0.0) or 0.0) != 0.0:
            raise LatticeError(f"{kind} {name!r} must have zero length")

    def clone(self, name: str, **overrides) -> "Element":
        merged = dict(self.attrs)
        merged.update(overrides)
        e = Element.__new__(Element)
        e.name = name
        e.kind = self.kind
        e.attrs = merged
        return e

    def get(self, key: str, default=0.0):
        v = self.attrs.get(key, default)
        return resolve(v)

    @property
    def l(self) -> float:
        return float(self.get("l", 0.0))

    @property
    def angle(self) -> float:
        return float(self.get("angle", 0.0))

    @property
    def tilt(self) -> float:
        return float(self.get("tilt", 0.0))

    def misalignment(self) -> Misalignment:
        return Misalignment(
            dx=float(self.get("dx", 0.0)), dy=float(self.get("dy", 0.0)),
            ds=float(self.get("ds", 0.0)), dtheta=float(self.get("dtheta", 0.0)),
            dphi=float(self.get("dphi", 0.0)), dpsi=float(self.get("dpsi", 0.0)))

    def __repr__(self):
        return f"Element({self.name!r}, {self.kind})"


# -- beam ---------------------------------------------------------------------

_PARTICLES = {
    # name: (mass GeV, charge e)
    "proton": (0.93827208816, 1.0),
    "electron": (0.51099895000e-3, -1.0),
    "positron": (0.51099895000e-3, 1.0),
}


@dataclass(frozen=True)
class Beam:
    """Reference particle and derived kinematic factors."""

    particle: str = "proton"
    energy: float = 0.0   # total energy [GeV]
    pc: float = 0.0       # momentum [GeV]
    mass: float = 0.0     # [GeV]
    charge: float = 1.0   # [e]
    beta0: float = 1.0
    gamma0: float = 1.0

    @staticmethod
    def make(particle: str = "proton", energy: float | None = None,
             pc: float | None = None, charge: float | None = None) -> "Beam":
        particle = particle.lower()
        if particle not in _PARTICLES:
            raise LatticeError(f"unknown particle {particle!r}; have {sorted(_PARTICLES)}")
        mass, q = _PARTICLES[particle]
        if charge is not None:
            q = float(charge)
        if energy is None and pc is None:
            raise LatticeError("beam needs energy= or pc=")
        if energy is not None:
            energy = float(energy)
            if energy <= mass:
                raise LatticeError(f"energy {energy} GeV must exceed mass {mass} GeV")
            pc = math.sqrt(energy**2 - mass**2)
        else:
            pc = float(pc)
            energy = math.sqrt(pc**2 + mass**2)
        return Beam(particle, energy, pc, mass, q,
                    beta0=pc / energy, gamma0=energy / mass)


# -- bline -----------------------------------------------------------------------

class BLine:
    """Ordered list of items: elements, nested blines, or n*(item) repeats."""

    __slots__ = ("name", "items")

    def __init__(self, items, name: str = ""):
        self.name = name
        self.items = list(items)

    def __repr__(self):
        return f"BLine({self.name!r}, {len(self.items)} items)"


def expand_bline(b) -> list[Element]:
    """Flatten a bline left-to-right; repeats share element references."""
    out: list[Element] = []

    def walk(item):
        if isinstance(item, Element):
            out.append(item)
        elif isinstance(item, BLine):
            for it in item.items:
                walk(it)
        elif isinstance(item, (list, tuple)):
            for it in item:
                walk(it)
        elif isinstance(item, Repeat):
            if item.n < 0:
                raise LatticeError(f"negative repetition {item.n}")
            for _ in range(item.n):
                walk(item.item)
        else:
            raise LatticeError(f"bad bline item {item!r}")

    walk(b)
    return out


@dataclass(frozen=True)
class Repeat:
    n: int
    item: object


# -- sequence ----------------------------------------------------------------------

@dataclass(frozen=True)
class Place:
    """One element occupying [s0, s1] within a sequence."""

    element: Element
    s0: float
    s1: float

    @property
    def name(self) -> str:
        return self.element.name


class Sequence:
    """Expanded, contiguously drift-filled element list with positions."""

    def __init__(self, name: str, places: list[Place], length: float,
                 refer: str = "centre", beam: Beam | None = None, dir: int = 1):
        self.name = name
        self.places = places
        self.length = length
        self.refer = refer
        self.beam = beam
        self.dir = dir

    def __iter__(self):
        return iter(self.places)

    def __len__(self):
        return len(self.places)

    def index(self, name: str, occurrence: int = 1) -> int:
        n = 0
        for i, p in enumerate(self.places):
            if p.name == name:
                n += 1
                if n == occurrence:
                    return i
        raise LatticeError(f"element {name!r} (occurrence {occurrence}) not in sequence {self.name!r}")

    def elements(self) -> list[Element]:
        return [p.element for p in self.places]

    def cycle(self, start: str) -> "Sequence":
        """Rotate the start point to the named element; s re-based to 0."""
        i = self.index(start)
        s0 = self.places[i].s0
        L = self.length
        places = []
        for p in self.places[i:] + self.places[:i]:
            a = p.s0 - s0
            if a < -1e-12:
                a += L
            places.append(Place(p.element, a, a + (p.s1 - p.s0)))
        seq = Sequence(self.name, places, L, self.refer, self.beam, self.dir)
        return seq

    def __repr__(self):
        return f"Sequence({self.name!r}, {len(self.places)} places, l={self.length:g})"


def _entry_position(at: float, l: float, refer: str) -> float:
    if refer == "entry":
        return at
    if refer == "centre" or refer == "center":
        return at - l / 2
    if refer == "exit":
        return at - l
    raise LatticeError(f"unknown refer convention {refer!r}")


def build_sequence(name: str, placements: list[tuple[Element, float]],
                   refer: str = "centre", l: float | None = None,
                   beam: Beam | None = None, dir: int = 1) -> Sequence:
    """Assemble a sequence from (element, at) pairs.

    Positions follow the refer convention; gaps become implicit drifts;
    overlaps beyond 1e-12 m raise naming both offenders.
    """
    pl = []
    for elem, at in placements:
        s0 = _entry_position(float(at), elem.l, refer)
        pl.append((s0, elem))
    pl.sort(key=lambda t: t[0])

    places: list[Place] = []
    cursor = 0.0
    prev_name = "(start)"
    ndrift = 0
    for s0, elem in pl:
        gap = s0 - cursor
        if gap < -1e-12:
            raise LatticeError(
                f"elements overlap in {name!r}: {elem.name!r} at s={s0:.9g} begins "
                f"{-gap:.3g} m before the exit of {prev_name!r}")
        if gap > 1e-12:
            d = Element(f"drift_{ndrift}", "drift", l=gap)
            ndrift += 1
            places.append(Place(d, cursor, s0))
        places.append(Place(elem, s0, s0 + elem.l))
        cursor = s0 + elem.l
        prev_name = elem.name
    if l is not None:
        l = float(l)
        if cursor > l + 1e-12:
            raise LatticeError(f"sequence {name!r} overflows declared length {l}")
        if l - cursor > 1e-12:
            places.append(Place(Element(f"drift_{ndrift}", "drift", l=l - cursor), cursor, l))
            cursor = l
    return Sequence(name, places, cursor, refer, beam, dir)


def seq_from_line(name: str, items, refer: str = "centre",
                  l: float | None = None, beam: Beam | None = None,
                  dir: int = 1) -> Sequence:
    """Build a sequence from bline-style items.

    Each nested bline forms a block whose origin is the running cursor;
    elements with an ``at`` attribute are placed at block origin + at
    (per the refer convention), others stack sequentially.
    """
    placements: list[tuple[Element, float]] = []

    def walk(item, cursor: float, block: float) -> float:
        """Place one item; `at` positions measure from the enclosing block
        origin, bare items stack at the cursor.  Returns the new cursor."""
        if isinstance(item, Element):
            at = item.attrs.get("at")
            if at is not None:
                s0 = block + _entry_position(float(resolve(at)), item.l, refer)
            else:
                s0 = cursor
            placements.append((item, s0))
            return max(cursor, s0 + item.l)
        if isinstance(item, Repeat):
            if item.n < 0:
                raise LatticeError(f"negative repetition {item.n}")
            for _ in range(item.n):
                cursor = walk(item.item, cursor, cursor)
            return cursor
        if isinstance(item, (BLine, list, tuple)):
            seq = item.items if isinstance(item, BLine) else item
            start = cursor
            for it in seq:
                cursor = walk(it, cursor, start)
            return cursor
        raise LatticeError(f"bad sequence item {item!r}")

    walk(list(items) if isinstance(items, (list, tuple)) else [items], 0.0, 0.0)

    # placements hold entry positions: convert back to `at` positions under
    # the refer convention and reuse the gap/overlap machinery
    back = []
    for e, s0 in sorted(placements, key=lambda t: t[1]):
        if refer == "entry":
            at = s0
        elif refer in ("centre", "center"):
            at = s0 + e.l / 2
        else:
            at = s0 + e.l
        back.append((e, at))
    return build_sequence(name, back, refer=refer, l=l, beam=beam, dir=dir)


# -- knob linking -----------------------------------------------------------------

def env_bind_knobs(env: Env, names, X0) -> None:
    """Promote named scalars to first-order parameter series of X0.

    Each env entry becomes scalar(current value) + parameter series, so
    element attributes referencing these names turn series-valued on their
    next deferred read.
    """
    for name in names:
        series = X0.param(name)  # raises for unknown parameter names
        cur = env[name]
        if isinstance(cur, Tpsa):
            cur = cur.get0()
        env[name] = series + float(cur)


def env_restore_knobs(env: Env, names) -> None:
    """Collapse bound knobs back to their scalar (order-0) values."""
    for name in names:
        v = env[name]
        if isinstance(v, Tpsa):
            env[name] = v.get0()
