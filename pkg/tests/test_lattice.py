"""Elements, beams, blines, sequence positioning, env semantics."""

import numpy as np
import pytest

from beamkit.damap import DaMap
from beamkit.lattice import (Beam, BLine, Deferred, Element, Env, LatticeError,
                             Repeat, build_sequence, env_bind_knobs,
                             env_restore_knobs, expand_bline, seq_from_line)
from beamkit.tpsa import Tpsa


def fodo_cell(k1f=0.29601, k1d=-0.30242, nc=25):
    """The 25-cell toy ring: sbends l=2 angle=pi/nc, quads l=1."""
    import math
    qf = Element("qf", "quadrupole", l=1.0, k1=k1f, at=0.0)
    mb1 = Element("mb1", "sbend", l=2.0, angle=math.pi / nc, at=2.0)
    qd = Element("qd", "quadrupole", l=1.0, k1=k1d, at=5.0)
    mb2 = Element("mb2", "sbend", l=2.0, angle=math.pi / nc, at=7.0)
    return BLine([qf, mb1, qd, mb2], "cell")


# -- elements / beam -----------------------------------------------------------

def test_element_kinds_checked():
    with pytest.raises(LatticeError):
        Element("z", "wiggler")
    with pytest.raises(LatticeError):
        Element("m", "marker", l=1.0)


def test_element_polymorphic_attr():
    e = Element("q", "quadrupole", l=1.0, k1=0.3)
    assert e.get("k1") == 0.3
    holder = {"v": 0.3}
    e.attrs["k1"] = Deferred(lambda: holder["v"], "v")
    assert e.get("k1") == 0.3
    holder["v"] = 0.4
    assert e.get("k1") == 0.4


def test_beam_proton_450():
    b = Beam.make("proton", energy=450.0)
    assert b.mass == pytest.approx(0.93827208816)
    assert 0 < b.beta0 < 1
    assert b.pc == pytest.approx(np.sqrt(450.0**2 - b.mass**2))
    assert b.beta0 == pytest.approx(b.pc / b.energy)


def test_beam_rejects_subthreshold_energy():
    with pytest.raises(LatticeError):
        Beam.make("proton", energy=0.5)
    with pytest.raises(LatticeError):
        Beam.make("unicorn", energy=1.0)


# -- bline expansion -------------------------------------------------------------

def test_expand_empty():
    assert expand_bline(BLine([])) == []


def test_expand_fodo_ring_count():
    cell = fodo_cell()
    ring = Repeat(25, cell)
    flat = expand_bline(ring)
    assert len(flat) == 100
    # repeats are by reference: same element objects reappear
    assert flat[0] is flat[4]


def test_expand_negative_repeat():
    with pytest.raises(LatticeError):
        expand_bline(Repeat(-1, Element("m", "marker")))


def sps_blines():
    """The nine-line early-SPS description."""
    qf = Element("qf", "quadrupole", l=3.0, k1=0.01)
    qd = Element("qd", "quadrupole", l=3.0, k1=-0.01)
    b1 = Element("b1", "sbend", l=6.0, angle=0.0055)
    b2 = Element("b2", "sbend", l=6.0, angle=0.0055)
    ds = Element("ds", "drift", l=1.0)
    dm = Element("dm", "drift", l=1.0)
    dl = Element("dl", "drift", l=8.0)
    pf = BLine([qf, Repeat(2, b1), Repeat(2, b2), ds], "pf")
    pd = BLine([qd, Repeat(2, b2), Repeat(2, b1), ds], "pd")
    p24 = BLine([qf, dm, Repeat(2, b2), ds, pd], "p24")
    p42 = BLine([pf, qd, Repeat(2, b2), dm, ds], "p42")
    p00 = BLine([qf, dl, qd, dl], "p00")
    p44 = BLine([pf, pd], "p44")
    insert = BLine([p24, Repeat(2, p00), p42], "insert")
    sup = BLine([Repeat(7, p44), insert, Repeat(7, p44)], "super")
    return BLine([Repeat(6, sup)], "SPS")


def count_oracle(item, counts):
    """Independent recursive element counter."""
    if isinstance(item, Element):
        return 1
    if isinstance(item, Repeat):
        return item.n * count_oracle(item.item, counts)
    return sum(count_oracle(i, counts) for i in item.items)


def test_sps_expansion_matches_enumeration_oracle():
    sps = sps_blines()
    flat = expand_bline(sps)
    assert len(flat) == count_oracle(sps, {})
    # the build-time enumeration of the nine-line listing
    assert len(flat) == 1188


# -- sequence positioning ----------------------------------------------------------

def test_fodo_cell_positions_and_drifts():
    seq = seq_from_line("cell", [fodo_cell()][0].items, refer="entry")
    names = [p.name for p in seq]
    # implicit 1 m drifts fill the gaps after qf, mb1 and qd
    assert names == ["qf", "drift_0", "mb1", "drift_1", "qd", "drift_2", "mb2"]
    for i in (1, 3, 5):
        p = seq.places[i]
        assert p.s1 - p.s0 == pytest.approx(1.0)
    assert seq.length == pytest.approx(9.0)


def test_fodo_ring_circumference():
    ring = seq_from_line("ring", [Repeat(25, fodo_cell())], refer="entry")
    assert ring.length == pytest.approx(225.0)
    assert sum(1 for p in ring if p.element.kind != "drift") == 100


def test_zero_length_sequence():
    m = Element("m0", "marker")
    seq = build_sequence("s", [(m, 0.0)], refer="entry")
    assert seq.length == 0.0
    assert len(seq) == 1


def test_overlap_detection_names_both():
    a = Element("a", "drift", l=2.0)
    b = Element("b", "drift", l=2.0)
    with pytest.raises(LatticeError, match="'b'.*'a'"):
        build_sequence("s", [(a, 0.0), (b, 1.0)], refer="entry")


def test_refer_conventions():
    q = Element("q", "quadrupole", l=2.0, k1=0.1)
    for refer, at, want_s0 in [("entry", 1.0, 1.0), ("centre", 2.0, 1.0), ("exit", 3.0, 1.0)]:
        seq = build_sequence("s", [(q, at)], refer=refer)
        p = [pl for pl in seq if pl.name == "q"][0]
        assert p.s0 == pytest.approx(want_s0)


def test_declared_length_pads_with_drift():
    q = Element("q", "quadrupole", l=1.0, k1=0.1)
    seq = build_sequence("s", [(q, 0.0)], refer="entry", l=5.0)
    assert seq.length == pytest.approx(5.0)
    assert seq.places[-1].element.kind == "drift"


# -- cycle ---------------------------------------------------------------------------

def test_cycle_to_current_start_is_identity():
    ring = seq_from_line("ring", [Repeat(2, fodo_cell())], refer="entry")
    c = ring.cycle(ring.places[0].name)
    assert [p.name for p in c] == [p.name for p in ring]
    assert [p.s0 for p in c] == pytest.approx([p.s0 for p in ring])


def test_cycle_round_trip():
    # single cell so both markers are unique
    ring = seq_from_line("ring", [fodo_cell()], refer="entry")
    back = ring.cycle("qd").cycle("qf")
    assert [p.name for p in back] == [p.name for p in ring]
    assert [p.s0 for p in back] == pytest.approx([p.s0 for p in ring])


def test_cycle_rotates_rows():
    ring = seq_from_line("ring", [Repeat(2, fodo_cell())], refer="entry")
    c = ring.cycle("qd")
    assert c.places[0].name == "qd"
    assert c.places[0].s0 == 0.0
    assert c.length == pytest.approx(ring.length)
    rotated = [p.name for p in c]
    i = ring.index("qd")
    expect = [p.name for p in ring.places[i:] + ring.places[:i]]
    assert rotated == expect


def test_cycle_unknown_name():
    ring = seq_from_line("ring", [fodo_cell()], refer="entry")
    with pytest.raises(LatticeError):
        ring.cycle("nope")


# -- env semantics ---------------------------------------------------------------------

def test_env_autocreate_zero():
    env = Env()
    assert env["fresh_name"] == 0.0
    assert "fresh_name" in env


def test_env_deferred_coherence():
    env = Env()
    env["b"] = 2.0
    env["a"] = Deferred(lambda: env["b"] + 1, "b + 1")
    assert env["a"] == 3.0
    env["b"] = 5.0
    assert env["a"] == 6.0


def test_env_child_inheritance():
    root = Env(name="root")
    root["shared"] = 7.0
    child = root.child("c")
    assert child["shared"] == 7.0
    child["own"] = 1.0
    assert "own" not in root.vars
    # auto-creation happens in the reading env, not the parent
    assert child["newname"] == 0.0
    assert "newname" not in root.vars


# -- knob linking -------------------------------------------------------------------------

def test_bind_knob_series_layout():
    env = Env()
    env["kq"] = 0.5
    X0 = DaMap.identity(2, 2, 1, 1, ["kq"])
    env_bind_knobs(env, ["kq"], X0)
    v = env["kq"]
    assert isinstance(v, Tpsa)
    assert v.get0() == 0.5
    assert v.get((0, 0, 1)) == 1.0


def test_bind_through_deferred_expression():
    env = Env()
    env["kq"] = 0.2
    env["dkq"] = 0.0
    env["k1tot"] = Deferred(lambda: env["kq"] + env["dkq"], "kq + dkq")
    X0 = DaMap.identity(2, 2, 1, 1, ["dkq"])
    env_bind_knobs(env, ["dkq"], X0)
    v = env["k1tot"]
    assert isinstance(v, Tpsa)
    assert v.get0() == pytest.approx(0.2)
    assert v.get((0, 0, 1)) == 1.0


def test_restore_knobs_as_scalars():
    env = Env()
    env["kq"] = 0.5
    X0 = DaMap.identity(2, 2, 1, 1, ["kq"])
    env_bind_knobs(env, ["kq"], X0)
    env_restore_knobs(env, ["kq"])
    assert env["kq"] == 0.5
    assert isinstance(env["kq"], float)


def test_bind_unknown_parameter():
    env = Env()
    X0 = DaMap.identity(2, 2, 1, 1, ["ka"])
    with pytest.raises(Exception):
        env_bind_knobs(env, ["kb"], X0)
