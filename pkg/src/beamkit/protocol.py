"""Framed pipe protocol shared by the serve mode and its clients.

Frames are text headers with optional binary payloads; vector payloads are
bit-exact little-endian IEEE754 doubles:

    EXEC <n>\\n<n bytes>              client request: job script to run
    NUM <ascii-double>\\n             scalar
    STR <n>\\n<bytes>                 string
    VEC <n>\\n<n*8 bytes LE doubles>  vector
    TBL <ncols> <nrows>\\n            table, then per column:
        COL <name> <type>\\n          type %le (doubles) or %s (strings)
        <payload>                     nrows*8 bytes, or nrows of <n>\\n<bytes>
    DONE\\n                           end of a successful exchange
    ERR <n>\\n<message bytes>         error; the stream stays usable

The decoder is incremental: feed() accepts arbitrary chunk boundaries and
yields complete frames in order.
"""

from __future__ import annotations

import numpy as np

from .mtable import MTable

__all__ = ["FrameDecoder", "ProtocolError", "encode_exec", "encode_num",
           "encode_str", "encode_vec", "encode_tbl", "encode_done",
           "encode_err", "encode_value"]


class ProtocolError(ValueError):
    pass


def encode_exec(script: str) -> bytes:
    b = script.encode()
    return b"EXEC %d\n" % len(b) + b


def encode_num(v: float) -> bytes:
    return b"NUM %s\n" % repr(float(v)).encode()


def encode_str(s: str) -> bytes:
    b = s.encode()
    return b"STR %d\n" % len(b) + b


def encode_vec(v) -> bytes:
    a = np.asarray(v, dtype="<f8").ravel()
    return b"VEC %d\n" % len(a) + a.tobytes()


def encode_done() -> bytes:
    return b"DONE\n"


def encode_err(msg: str) -> bytes:
    b = msg.encode()
    return b"ERR %d\n" % len(b) + b


def _table_columns(t: MTable) -> list[tuple[str, str, object]]:
    cols = []
    for name in t.colnames:
        v = t.col(name)
        if isinstance(v, list) and (not v or isinstance(v[0], str)):
            cols.append((name, "%s", [str(x) for x in v]))
        elif isinstance(v, np.ndarray) and v.dtype.kind == "c":
            cols.append((name + "_re", "%le", np.real(v).astype("<f8")))
            cols.append((name + "_im", "%le", np.imag(v).astype("<f8")))
        elif isinstance(v, np.ndarray) and v.dtype.kind in "fiu":
            cols.append((name, "%le", v.astype("<f8")))
        # object columns (orientation matrices, ...) are not wire-portable
    return cols


def encode_tbl(t: MTable) -> bytes:
    cols = _table_columns(t)
    out = bytearray(b"TBL %d %d\n" % (len(cols), t.nrows))
    for name, typ, payload in cols:
        if " " in name:
            raise ProtocolError(f"column name {name!r} contains a space")
        out += b"COL %s %s\n" % (name.encode(), typ.encode())
        if typ == "%le":
            out += payload.tobytes()
        else:
            for s in payload:
                b = s.encode()
                out += b"%d\n" % len(b) + b
    return bytes(out)


def encode_value(v) -> bytes:
    """Dispatch a python value to its frame encoding."""
    if isinstance(v, MTable):
        return encode_tbl(v)
    if isinstance(v, str):
        return encode_str(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return encode_vec(v)
    if isinstance(v, (int, float, np.floating, np.integer)):
        return encode_num(float(v))
    raise ProtocolError(f"cannot send value of type {type(v).__name__}")


class FrameDecoder:
    """Incremental decoder; chunk boundaries may fall anywhere."""

    def __init__(self):
        self._buf = bytearray()
        self._frames: list[tuple] = []

    def feed(self, data: bytes) -> list[tuple]:
        """Consume bytes, return every frame completed by them.

        Frames are tuples: ("exec", str), ("num", float), ("str", str),
        ("vec", ndarray), ("tbl", MTable), ("done",), ("err", str).
        """
        self._buf += data
        out = []
        while True:
            frame, consumed = self._try_parse()
            if frame is None:
                break
            del self._buf[:consumed]
            out.append(frame)
        return out

    # parsing helpers work on offsets; nothing is consumed until a whole
    # frame is available, which makes chunk boundaries irrelevant

    def _line(self, pos: int):
        idx = self._buf.find(b"\n", pos)
        if idx < 0:
            return None, pos
        return self._buf[pos:idx].decode("utf-8", "replace"), idx + 1

    def _try_parse(self):
        if not self._buf:
            return None, 0
        line, pos = self._line(0)
        if line is None:
            return None, 0
        parts = line.split()
        if not parts:
            raise ProtocolError("empty frame header")
        tag = parts[0]

        def need(n: int):
            return None if len(self._buf) - pos < n else True

        if tag == "DONE":
            return ("done",), pos
        if tag == "NUM":
            if len(parts) != 2:
                raise ProtocolError(f"bad NUM header {line!r}")
            return ("num", float(parts[1])), pos
        if tag in ("STR", "ERR", "EXEC"):
            if len(parts) != 2:
                raise ProtocolError(f"bad {tag} header {line!r}")
            n = int(parts[1])
            if need(n) is None:
                return None, 0
            body = bytes(self._buf[pos:pos + n]).decode()
            return (tag.lower(), body), pos + n
        if tag == "VEC":
            if len(parts) != 2:
                raise ProtocolError(f"bad VEC header {line!r}")
            n = int(parts[1])
            if need(8 * n) is None:
                return None, 0
            a = np.frombuffer(bytes(self._buf[pos:pos + 8 * n]), dtype="<f8").copy()
            return ("vec", a), pos + 8 * n
        if tag == "TBL":
            if len(parts) != 3:
                raise ProtocolError(f"bad TBL header {line!r}")
            ncols, nrows = int(parts[1]), int(parts[2])
            t = MTable("tbl")
            p = pos
            for _ in range(ncols):
                cline, p2 = self._line(p)
                if cline is None:
                    return None, 0
                cparts = cline.split()
                if len(cparts) != 3 or cparts[0] != "COL":
                    raise ProtocolError(f"bad COL header {cline!r}")
                _, cname, ctyp = cparts
                if ctyp == "%le":
                    if len(self._buf) - p2 < 8 * nrows:
                        return None, 0
                    col = np.frombuffer(bytes(self._buf[p2:p2 + 8 * nrows]),
                                        dtype="<f8").copy()
                    p = p2 + 8 * nrows
                elif ctyp == "%s":
                    vals = []
                    q = p2
                    for _ in range(nrows):
                        sline, q2 = self._line(q)
                        if sline is None:
                            return None, 0
                        ns = int(sline)
                        if len(self._buf) - q2 < ns:
                            return None, 0
                        vals.append(bytes(self._buf[q2:q2 + ns]).decode())
                        q = q2 + ns
                    col = vals
                    p = q
                else:
                    raise ProtocolError(f"unknown column type {ctyp!r}")
                t.add_col(cname, col)
            return ("tbl", t), p
        raise ProtocolError(f"unknown frame tag {tag!r}")
