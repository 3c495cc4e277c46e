"""Named-column tables with generated columns and TFS text serialization.

Numeric columns are numpy arrays, so scalar columns behave as vectors under
element-wise arithmetic.  Generated columns store a row-index function and
are recomputed on every read, which keeps them consistent with whatever
columns they reference; cyclic generators are detected.  Tables are
read-shared after construction; generators must be pure.
"""

from __future__ import annotations

import numpy as np

__all__ = ["MTable", "read_tfs", "write_tfs", "TfsError"]


class TfsError(ValueError):
    pass


class MTable:
    """Ordered named columns plus scalar headers and a row-name index."""

    def __init__(self, name: str = "", cols: dict | None = None,
                 header: dict | None = None):
        self.name = name
        self.cols: dict[str, object] = {}
        self.generators: dict[str, object] = {}
        self.header: dict[str, object] = dict(header or {})
        self._nrows = 0
        self._evaluating: set[str] = set()
        for k, v in (cols or {}).items():
            self.add_col(k, v)

    # -- columns -----------------------------------------------------------

    def add_col(self, name: str, data) -> None:
        """Add a data column (sequence) or a generator (callable of row index)."""
        if callable(data):
            self.generators[name] = data
            self.cols[name] = None
            return
        if isinstance(data, np.ndarray):
            col = data
        else:
            data = list(data)
            if data and isinstance(data[0], str):
                col = data
            else:
                col = np.asarray(data)
        n = len(col)
        if self.ncols_data() > 0 and n != self._nrows:
            raise TfsError(f"column {name!r} has {n} rows, table has {self._nrows}")
        self._nrows = n
        self.cols[name] = col

    addcol = add_col

    def ncols_data(self) -> int:
        return sum(1 for v in self.cols.values() if v is not None)

    @property
    def colnames(self) -> list[str]:
        return list(self.cols.keys())

    @property
    def nrows(self) -> int:
        return self._nrows

    def __len__(self):
        return self._nrows

    def col(self, name: str):
        """Materialized column; generated columns recompute on each call."""
        if name in self.generators:
            if name in self._evaluating:
                raise TfsError(f"generated column {name!r} depends on itself")
            self._evaluating.add(name)
            try:
                gen = self.generators[name]
                vals = [gen(i) for i in range(self._nrows)]
            finally:
                self._evaluating.discard(name)
            if vals and isinstance(vals[0], str):
                return vals
            return np.asarray(vals)
        try:
            v = self.cols[name]
        except KeyError:
            raise KeyError(f"no column {name!r} in table {self.name!r}") from None
        return v

    def __getitem__(self, name: str):
        return self.col(name)

    def __getattr__(self, name: str):
        # attribute access falls back to columns, then headers
        cols = object.__getattribute__(self, "cols")
        if name in cols:
            return self.col(name)
        header = object.__getattribute__(self, "header")
        if name in header:
            return header[name]
        raise AttributeError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.cols

    # -- rows ---------------------------------------------------------------

    def row(self, i: int) -> dict:
        return {k: self.col(k)[i] for k in self.cols}

    def row_index(self, name: str, occurrence: int = 1) -> int:
        """Index of the n-th row whose `name` column matches (1-based n)."""
        names = self.col("name")
        seen = 0
        for i, n in enumerate(names):
            if n == name:
                seen += 1
                if seen == occurrence:
                    return i
        raise KeyError(f"row {name!r} (occurrence {occurrence}) not found")

    def subset(self, idx) -> "MTable":
        out = MTable(self.name, header=dict(self.header))
        for k in self.cols:
            colv = self.col(k)
            if isinstance(colv, list):
                out.add_col(k, [colv[i] for i in idx])
            else:
                out.add_col(k, colv[list(idx)])
        return out

    def select_range(self, spec) -> "MTable":
        """Rows between two named markers, inclusive.

        `spec` is "A/B" or a pair of names, each optionally "name[n]" to
        pick an occurrence.  A range whose start lies after its end wraps
        around (rotated rows, for cycled rings).  Unknown names select
        nothing.
        """
        if isinstance(spec, str):
            parts = spec.split("/")
            if len(parts) != 2:
                raise TfsError(f"range spec {spec!r} must be 'A/B'")
            a, b = parts
        else:
            a, b = spec

        def find(tag):
            tag = tag.strip()
            occ = 1
            if tag.endswith("]") and "[" in tag:
                tag, n = tag[:-1].rsplit("[", 1)
                occ = int(n)
            try:
                return self.row_index(tag, occ)
            except KeyError:
                return None

        ia, ib = find(a), find(b)
        if ia is None or ib is None:
            return self.subset([])
        if ia <= ib:
            return self.subset(range(ia, ib + 1))
        return self.subset(list(range(ia, self._nrows)) + list(range(0, ib + 1)))

    # -- io -------------------------------------------------------------------

    def materialized(self) -> "MTable":
        out = MTable(self.name, header=dict(self.header))
        for k in self.cols:
            out.add_col(k, self.col(k))
        return out

    def write_tfs(self, path) -> None:
        write_tfs(self, path)

    def write_csv(self, path, columns=None) -> None:
        cols = columns or [k for k in self.cols if _tfs_type(self.col(k)) is not None]
        mats = {k: self.col(k) for k in cols}
        import contextlib
        ctx = contextlib.nullcontext(path) if hasattr(path, "write") else open(path, "w")
        with ctx as f:
            f.write(",".join(cols) + "\n")
            for i in range(self._nrows):
                cells = []
                for k in cols:
                    v = mats[k][i]
                    cells.append(v if isinstance(v, str) else f"{float(v):.17g}")
                f.write(",".join(cells) + "\n")

    def __repr__(self):
        return f"MTable({self.name!r}, {self._nrows} rows x {len(self.cols)} cols)"


def _tfs_type(col) -> str | None:
    if isinstance(col, list):
        return "%s"
    if isinstance(col, np.ndarray):
        if col.dtype.kind == "f":
            return "%le"
        if col.dtype.kind in "iu":
            return "%d"
        if col.dtype.kind == "c":
            return "%le"  # split by caller
        if col.dtype.kind in "US":
            return "%s"
    return None


def write_tfs(t: MTable, path) -> None:
    """Write TFS text: @ headers, * names, $ types, then rows.

    Doubles carry 17 significant digits, so read_tfs round-trips them
    bit-exactly.  Complex columns split into <name>_re / <name>_im pairs;
    non-serializable (object) columns are skipped.
    """
    cols: dict[str, object] = {}
    for k in t.cols:
        v = t.col(k)
        kind = _tfs_type(v)
        if kind is None:
            continue
        if isinstance(v, np.ndarray) and v.dtype.kind == "c":
            cols[k + "_re"] = np.real(v).copy()
            cols[k + "_im"] = np.imag(v).copy()
        elif isinstance(v, np.ndarray) and v.dtype.kind in "US":
            cols[k] = [str(x) for x in v]
        else:
            cols[k] = v

    def fmt(v) -> tuple[str, str]:
        if isinstance(v, str):
            return "%s", f'"{v}"'
        if isinstance(v, (bool, np.bool_)):
            return "%b", "true" if v else "false"
        if isinstance(v, (int, np.integer)):
            return "%d", str(int(v))
        return "%le", f"{float(v):.17g}"

    import contextlib
    ctx = contextlib.nullcontext(path) if hasattr(path, "write") else open(path, "w")
    with ctx as f:
        f.write(f'@ NAME %s "{t.name}"\n')
        for k, v in t.header.items():
            typ, sv = fmt(v)
            f.write(f"@ {k.upper()} {typ} {sv}\n")
        names = list(cols.keys())
        if names:
            f.write("* " + " ".join(names) + "\n")
            types = [_tfs_type(cols[k]) or "%s" for k in names]
            f.write("$ " + " ".join(types) + "\n")
            for i in range(t.nrows):
                cells = []
                for k in names:
                    v = cols[k][i]
                    if isinstance(v, str):
                        cells.append(f'"{v}"')
                    elif isinstance(v, (np.integer, int)) and not isinstance(cols[k], np.ndarray):
                        cells.append(str(int(v)))
                    elif isinstance(cols[k], np.ndarray) and cols[k].dtype.kind in "iu":
                        cells.append(str(int(v)))
                    else:
                        cells.append(f"{float(v):.17g}")
                f.write(" " + " ".join(cells) + "\n")


def _parse_value(tok: str, typ: str):
    if typ == "%s":
        return tok.strip('"')
    if typ == "%d":
        return int(tok)
    if typ == "%b":
        return tok == "true"
    return float(tok)


def _split_row(line: str) -> list[str]:
    """Split on whitespace, keeping quoted strings whole."""
    out, cur, inq = [], [], False
    for ch in line:
        if ch == '"':
            inq = not inq
            cur.append(ch)
        elif ch.isspace() and not inq:
            if cur:
                out.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur))
    return out


def read_tfs(path) -> MTable:
    """Parse a TFS file written by :func:`write_tfs` (or compatible)."""
    name = ""
    header: dict[str, object] = {}
    colnames: list[str] | None = None
    coltypes: list[str] | None = None
    rows: list[list] = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("@"):
                toks = _split_row(line[1:])
                if len(toks) < 3:
                    raise TfsError(f"{path}:{ln}: malformed header line")
                key, typ = toks[0], toks[1]
                val = _parse_value(" ".join(toks[2:]), typ)
                if key.upper() == "NAME":
                    name = val
                else:
                    header[key.lower()] = val
            elif line.startswith("*"):
                colnames = _split_row(line[1:])
            elif line.startswith("$"):
                coltypes = _split_row(line[1:])
            else:
                if colnames is None or coltypes is None:
                    raise TfsError(f"{path}:{ln}: data before column declarations")
                toks = _split_row(line)
                if len(toks) != len(colnames):
                    raise TfsError(
                        f"{path}:{ln}: expected {len(colnames)} cells, got {len(toks)}")
                try:
                    rows.append([_parse_value(tok, typ) for tok, typ in zip(toks, coltypes)])
                except ValueError as e:
                    raise TfsError(f"{path}:{ln}: {e}") from None
    t = MTable(name, header=header)
    if colnames:
        if coltypes is None or len(coltypes) != len(colnames):
            raise TfsError(f"{path}: column name/type declarations disagree")
        for j, (cn, ct) in enumerate(zip(colnames, coltypes)):
            colv = [r[j] for r in rows]
            if ct == "%s":
                t.add_col(cn, colv)
            elif ct == "%d":
                t.add_col(cn, np.asarray(colv, dtype=np.int64))
            else:
                t.add_col(cn, np.asarray(colv, dtype=float))
    return t
