"""Command-line front end: job runner, command wrappers, pipe server.

Exit codes: 0 success, 1 command error, 2 parse error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .engine import survey as run_survey, track as run_track
from .jobs import default_commands
from .lattice import Env, LatticeError, Sequence
from .latparse import LatError, ParseError, load_file, parse, execute
from .matching import MatchError
from .mtable import MTable, write_tfs
from .optics import OpticsError, cofind as run_cofind, twiss as run_twiss
from .protocol import (FrameDecoder, ProtocolError, encode_done, encode_err,
                       encode_value)

_ERRORS = (LatError, LatticeError, OpticsError, MatchError, ValueError,
           OSError, KeyError)


def _load_env(args) -> tuple[Env, Sequence]:
    env = Env(name="job")
    load_file(args.seq, env)
    name = getattr(args, "sequence", None)
    if name:
        seq = env[name]
        if not isinstance(seq, Sequence):
            raise LatError(f"{name!r} is not a sequence")
    else:
        seqs = [v for v in env.vars.values() if isinstance(v, Sequence)]
        if len(seqs) != 1:
            raise LatError(f"found {len(seqs)} sequences; pass --sequence")
        seq = seqs[0]
    if seq.beam is None:
        raise LatError(f"sequence {seq.name!r} has no beam "
                       f"(add a beam command to the file)")
    return env, seq


def _emit(table: MTable, args) -> None:
    if getattr(args, "plot", None):
        cols = [c.strip() for c in args.plot.split(",")]
        table.write_csv(args.out or "plot.csv", columns=cols)
        return
    fmt = getattr(args, "format", "tfs")
    out = getattr(args, "out", None)
    if fmt == "csv":
        table.write_csv(out or sys.stdout)
    else:
        write_tfs(table, out or sys.stdout)


def _common(sp):
    sp.add_argument("--seq", required=True, help="lattice/job file defining the sequence")
    sp.add_argument("--sequence", help="sequence name (default: the only one)")
    sp.add_argument("--range", help="element range A/B")
    sp.add_argument("--out", help="output file path")
    sp.add_argument("--format", choices=("tfs", "csv"), default="tfs")
    sp.add_argument("--plot", help="comma-separated columns to write as CSV plot data")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="beamkit",
                                 description="desk-scale lattice modeling and optics")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="execute a job file")
    p.add_argument("job")

    p = sub.add_parser("survey", help="global-frame geometry table")
    _common(p)

    p = sub.add_parser("track", help="track particles")
    _common(p)
    p.add_argument("--turns", type=int, default=1)
    p.add_argument("--observe", default="end")
    p.add_argument("--coords", default="0,0,0,0,0,0",
                   help="initial x,px,y,py,t,pt")

    p = sub.add_parser("twiss", help="optical functions")
    _common(p)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--trkrdt", help="comma-separated RDT labels (f4000,...)")

    p = sub.add_parser("cofind", help="closed orbit search")
    _common(p)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--codim", type=int)

    p = sub.add_parser("match", help="tune/chromaticity matching")
    _common(p)
    p.add_argument("--vary", required=True, help="comma-separated env knob names")
    p.add_argument("--target", action="append", default=[],
                   help="q1=V | q2=V | dq1=V | dq2=V (repeatable)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--fmin", type=float, default=1e-10)
    p.add_argument("--maxcall", type=int, default=100)
    p.add_argument("--bisec", type=int, default=5)

    p = sub.add_parser("serve", help="framed pipe-protocol server")
    p.add_argument("--stdio", action="store_true", required=True)

    args = ap.parse_args(argv)

    try:
        if args.cmd == "run":
            env = Env(name="job")
            load_file(args.job, env)
            return 0
        if args.cmd == "serve":
            return serve_stdio()
        env, seq = _load_env(args)
        if args.cmd == "survey":
            _emit(run_survey(seq, range=args.range), args)
        elif args.cmd == "track":
            x0 = [float(v) for v in args.coords.split(",")]
            t, _ = run_track(seq, [x0], nturn=args.turns,
                             observe=args.observe, range=args.range)
            _emit(t, args)
        elif args.cmd == "twiss":
            t = run_twiss(seq, mapdef=args.order, trkrdt=args.trkrdt,
                          range=args.range)
            _emit(t, args)
        elif args.cmd == "cofind":
            res = run_cofind(seq, codim=args.codim, order=args.order)
            t = MTable("cofind", header={"iterations": res.iterations,
                                         "residual": res.residual})
            t.add_col("name", ["co"])
            for i, k in enumerate(("x", "px", "y", "py", "t", "pt")):
                t.add_col(k, np.array([res.orbit[i]]))
            _emit(t, args)
        elif args.cmd == "match":
            from .jobs import _cmd_match
            attrs = {"sequence": seq, "vary": args.vary, "tol": args.tol,
                     "fmin": args.fmin, "maxcall": args.maxcall,
                     "bisec": args.bisec, "info": 1}
            for spec in args.target:
                k, _, v = spec.partition("=")
                attrs[k.strip()] = float(v)
            _cmd_match(env, attrs)
            res = env["match"]
            if res.status != "converged":
                print(f"match: {res.status}", file=sys.stderr)
                return 1
        return 0
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return 2
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def serve_stdio() -> int:
    """One-request-at-a-time pipe server over stdin/stdout.

    The env persists across EXEC requests, so a session can load a lattice
    once and keep querying it; an ERR response leaves the stream usable.
    """
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    env = Env(name="serve")
    commands = default_commands()

    def send_hook(value):
        stdout.write(encode_value(value))
        stdout.flush()

    env["_send_hook"] = send_hook
    dec = FrameDecoder()
    while True:
        data = stdin.read1(65536) if hasattr(stdin, "read1") else stdin.read(65536)
        if not data:
            return 0
        try:
            frames = dec.feed(data)
        except ProtocolError as e:
            stdout.write(encode_err(f"protocol: {e}"))
            stdout.flush()
            dec = FrameDecoder()
            continue
        for frame in frames:
            if frame[0] != "exec":
                stdout.write(encode_err(f"unexpected frame {frame[0]!r}"))
                stdout.flush()
                continue
            try:
                stmts = parse(frame[1])
                execute(stmts, env, commands)
                stdout.write(encode_done())
            except (ParseError, *_ERRORS) as e:
                stdout.write(encode_err(str(e)))
            stdout.flush()


if __name__ == "__main__":
    sys.exit(main())
