"""Command registry wiring the job language to the engines and optimizer.

Handlers receive (env, attrs) with attribute expressions already evaluated.
Table-producing commands store their result in the env under tbl= (default:
the command name) and optionally write it to file= in format= tfs|csv.
"""

from __future__ import annotations

import sys

import numpy as np

from .engine import survey as run_survey, track as run_track
from .lattice import Beam, Env, LatticeError, Sequence
from .latparse import LatError
from .matching import match as run_match
from .mtable import MTable, write_tfs
from .optics import cofind as run_cofind, twiss as run_twiss

__all__ = ["default_commands"]


def _get_sequence(env, attrs) -> Sequence:
    seq = attrs.get("sequence")
    if isinstance(seq, str):
        seq = env[seq]
    if not isinstance(seq, Sequence):
        raise LatError("command needs sequence=<defined sequence>")
    return seq


def _store_table(env, attrs, default_name: str, table: MTable) -> None:
    env[attrs.get("tbl", default_name)] = table
    path = attrs.get("file")
    if path:
        fmt = attrs.get("format", "tfs")
        if fmt == "csv":
            cols = attrs.get("plot")
            table.write_csv(path, columns=cols.split(",") if cols else None)
        else:
            write_tfs(table, path)


def _cmd_beam(env, attrs):
    b = Beam.make(particle=attrs.get("particle", "proton"),
                  energy=attrs.get("energy"), pc=attrs.get("pc"),
                  charge=attrs.get("charge"))
    seq = attrs.get("sequence")
    if isinstance(seq, str):
        seq = env[seq]
    if isinstance(seq, Sequence):
        seq.beam = b
    env[attrs.get("name", "beam")] = b


def _cmd_survey(env, attrs):
    seq = _get_sequence(env, attrs)
    t = run_survey(seq, range=attrs.get("range"),
                   mapsave=bool(attrs.get("mapsave", False)))
    _store_table(env, attrs, "survey", t)


def _cmd_track(env, attrs):
    seq = _get_sequence(env, attrs)
    x0 = [[float(attrs.get(k, 0.0)) for k in ("x", "px", "y", "py", "t", "pt")]]
    t, _ = run_track(seq, x0, nturn=int(attrs.get("turns", 1)),
                     observe=attrs.get("observe", "end"),
                     sdir=int(attrs.get("dir", 1)),
                     range=attrs.get("range"))
    _store_table(env, attrs, "track", t)


def _cmd_cofind(env, attrs):
    seq = _get_sequence(env, attrs)
    res = run_cofind(seq, codim=int(attrs["codim"]) if "codim" in attrs else None,
                     order=int(attrs.get("order", 1)))
    t = MTable("cofind", header={"iterations": res.iterations,
                                 "residual": res.residual})
    t.add_col("name", ["co"])
    for i, k in enumerate(("x", "px", "y", "py", "t", "pt")):
        t.add_col(k, np.array([res.orbit[i]]))
    _store_table(env, attrs, "cofind", t)


def _cmd_twiss(env, attrs):
    seq = _get_sequence(env, attrs)
    t = run_twiss(seq, mapdef=int(attrs.get("order", attrs.get("mapdef", 1))),
                  trkrdt=attrs.get("trkrdt"), range=attrs.get("range"))
    _store_table(env, attrs, "twiss", t)


def _cmd_cycle(env, attrs):
    seq = _get_sequence(env, attrs)
    start = attrs.get("start")
    if not isinstance(start, str):
        raise LatError("cycle needs start=<element name>")
    newseq = seq.cycle(start)
    name = attrs.get("tbl", seq.name)
    env[name] = newseq


def _cmd_match(env, attrs):
    seq = _get_sequence(env, attrs)
    vary = attrs.get("vary")
    if not isinstance(vary, str) or not vary.strip():
        raise LatError('match needs vary="name1,name2,..." of env knobs')
    names = [s.strip() for s in vary.split(",")]
    variables = [{"name": n, "env": env, "key": n,
                  "rtol": float(attrs.get("rtol", 1e-6))} for n in names]
    order = int(attrs.get("order", 1))
    targets = [(k, float(attrs[k])) for k in ("q1", "q2", "dq1", "dq2")
               if k in attrs]
    if not targets:
        raise LatError("match needs at least one of q1=, q2=, dq1=, dq2=")
    if any(k.startswith("dq") for k, _ in targets):
        order = max(order, 2)

    def command(order=order):
        return run_twiss(seq, mapdef=order)

    equalities = [{"name": k, "expr": (lambda t, k=k, tv=tv: t.header[k] - tv)}
                  for k, tv in targets]
    res = run_match(command, variables, equalities,
                    fmin=float(attrs.get("fmin", 1e-10)),
                    tol=float(attrs.get("tol", 0.0)),
                    bisec=int(attrs.get("bisec", 5)),
                    maxcall=int(attrs.get("maxcall", 100)),
                    info=int(attrs.get("info", 1)))
    env[attrs.get("tbl", "match")] = res


def _cmd_send(env, attrs):
    hook = env.raw("_send_hook")
    args = attrs.get("_args", [])
    if callable(hook):
        for v in args:
            hook(v)
    else:
        for v in args:
            print(v, file=sys.stdout)


def _cmd_print(env, attrs):
    print(*attrs.get("_args", []))


def default_commands() -> dict:
    return {
        "beam": _cmd_beam,
        "survey": _cmd_survey,
        "track": _cmd_track,
        "cofind": _cmd_cofind,
        "twiss": _cmd_twiss,
        "cycle": _cmd_cycle,
        "match": _cmd_match,
        "send": _cmd_send,
        "print": _cmd_print,
    }
