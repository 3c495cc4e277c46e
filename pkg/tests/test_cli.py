"""CLI front end: job runner, subcommands, serve-mode pipe protocol."""

import os
import subprocess
import sys

import numpy as np
import pytest

from beamkit.cli import main
from beamkit.mtable import read_tfs
from beamkit.protocol import FrameDecoder, encode_exec

SRC = os.path.join(os.path.dirname(__file__), "..", "src")

FODO_JOB = """
kqf = 0.29601;
kqd = -0.30242;
qf: quadrupole, l = 1, k1 := kqf, at = 0;
mb1: sbend, l = 2, angle = pi / 25, at = 2;
qd: quadrupole, l = 1, k1 := kqd, at = 5;
mb2: sbend, l = 2, angle = pi / 25, at = 7;
cell: line = (qf, mb1, qd, mb2);
cells: line = (25*cell);
ring: sequence, refer = "entry", line = cells;
endsequence;
beam, sequence = ring, particle = "proton", energy = 450;
"""


@pytest.fixture()
def seq_file(tmp_path):
    p = tmp_path / "fodo.seq"
    p.write_text(FODO_JOB)
    return str(p)


def test_run_job_emits_tfs(tmp_path, seq_file):
    out = tmp_path / "tw.tfs"
    job = tmp_path / "job.seq"
    job.write_text(FODO_JOB + f'twiss, sequence = ring, file = "{out}";\n')
    assert main(["run", str(job)]) == 0
    t = read_tfs(out)
    assert "q1" in t.header
    assert t.nrows > 100


def test_run_syntax_error_exit_2(tmp_path, capsys):
    job = tmp_path / "bad.seq"
    job.write_text("x = ;\n")
    assert main(["run", str(job)]) == 2
    assert "parse error" in capsys.readouterr().err


def test_run_unknown_command_exit_1(tmp_path, capsys):
    job = tmp_path / "bad.seq"
    job.write_text("frobnicate, a=1;\n")
    assert main(["run", str(job)]) == 1


def test_twiss_subcommand_order2(tmp_path, seq_file):
    out = tmp_path / "tw.tfs"
    assert main(["twiss", "--seq", seq_file, "--order", "2",
                 "--out", str(out)]) == 0
    t = read_tfs(out)
    assert "dq1" in t.header and "dq2" in t.header


def test_survey_subcommand(tmp_path, seq_file):
    out = tmp_path / "sv.tfs"
    assert main(["survey", "--seq", seq_file, "--out", str(out)]) == 0
    t = read_tfs(out)
    assert abs(t.col("x")[-1]) < 1e-8
    assert abs(t.col("z")[-1]) < 1e-8


def test_track_row_count(tmp_path, seq_file):
    out = tmp_path / "trk.tfs"
    assert main(["track", "--seq", seq_file, "--turns", "100",
                 "--coords", "1e-5,0,0,0,0,0", "--out", str(out)]) == 0
    t = read_tfs(out)
    assert t.nrows == 100


def test_empty_range_exits_zero(tmp_path, seq_file):
    out = tmp_path / "tw.tfs"
    assert main(["twiss", "--seq", seq_file, "--range", "nope/nada",
                 "--out", str(out)]) == 0
    t = read_tfs(out)
    assert t.nrows == 0


def test_plot_csv_export(tmp_path, seq_file):
    out = tmp_path / "plot.csv"
    assert main(["survey", "--seq", seq_file, "--plot", "x,z",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "x,z"


def test_match_subcommand(tmp_path, seq_file, capsys):
    rc = main(["match", "--seq", seq_file, "--vary", "kqf,kqd",
               "--target", "q1=5.31", "--target", "q2=5.42",
               "--tol", "2.5e-3", "--maxcall", "60"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Constraints  Type         Kind         Weight     Penalty Value" in out
    assert "Variables    Final Value  Init. Value  Lower Limit  Upper Limit" in out


# -- serve mode ------------------------------------------------------------------


def spawn_server():
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.Popen(
        [sys.executable, "-m", "beamkit.cli", "serve", "--stdio"],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env)


def exchange(proc, script, expect_frames):
    """Send one EXEC and read until DONE or ERR."""
    proc.stdin.write(encode_exec(script))
    proc.stdin.flush()
    dec = FrameDecoder()
    frames = []
    while True:
        b = proc.stdout.read1(65536)
        if not b:
            raise AssertionError("server closed the pipe")
        for f in dec.feed(b):
            frames.append(f)
            if f[0] in ("done", "err"):
                return frames


@pytest.mark.parametrize("dummy", [0])
def test_serve_end_to_end(dummy, tmp_path):
    proc = spawn_server()
    try:
        # empty script: immediate DONE
        frames = exchange(proc, "", 1)
        assert frames[-1] == ("done",)

        # scalar send
        frames = exchange(proc, "x = 1.5; send(x);", 2)
        assert frames[0] == ("num", 1.5)
        assert frames[-1] == ("done",)

        # script error -> ERR, connection stays usable
        frames = exchange(proc, "y = ;", 1)
        assert frames[-1][0] == "err"
        frames = exchange(proc, "send(2);", 2)
        assert frames[0] == ("num", 2.0)

        # canonical client pattern: three columns, then the whole table
        frames = exchange(proc, FODO_JOB +
                          "twiss, sequence = ring, tbl = tw;"
                          "send(tw.s, tw.beta11, tw.beta22);"
                          "send(tw);", 5)
        tags = [f[0] for f in frames]
        assert tags == ["vec", "vec", "vec", "tbl", "done"]
        nrows = len(frames[0][1])
        assert len(frames[1][1]) == nrows and len(frames[2][1]) == nrows
        tbl = frames[3][1]
        assert tbl.nrows == nrows
        assert np.array_equal(tbl.col("beta11"), frames[1][1])
    finally:
        proc.stdin.close()
        proc.wait(timeout=10)


def test_cofind_subcommand_columns(tmp_path, seq_file):
    out = tmp_path / "co.tfs"
    assert main(["cofind", "--seq", seq_file, "--out", str(out)]) == 0
    t = read_tfs(out)
    for k in ("x", "px", "y", "py", "t", "pt"):
        assert k in t
    assert abs(t.col("x")[0]) < 1e-9


def test_serve_recovers_after_malformed_frame():
    proc = spawn_server()
    try:
        proc.stdin.write(b"BOGUS 3\nxyz")
        proc.stdin.flush()
        dec = FrameDecoder()
        got_err = False
        # the server may answer with one or two ERR frames while resyncing
        for _ in range(4):
            frames = dec.feed(proc.stdout.read1(65536))
            if any(f[0] == "err" for f in frames):
                got_err = True
                break
        assert got_err
        frames = exchange(proc, "send(7);", 2)
        assert frames[0] == ("num", 7.0)
        assert frames[-1] == ("done",)
    finally:
        proc.stdin.close()
        proc.wait(timeout=10)
