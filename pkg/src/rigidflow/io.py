"""Plain-text output formats: time-series CSV and the ``FSIFLD 1`` field dump.

Every number is written with 17 significant digits, so a dump read back
reproduces the doubles bit for bit.

Field dump layout::

    FSIFLD 1
    dims <nr> <ntheta>
    nodes <N>
    <x> <y>                 N lines, node positions at time t
    velocity <N>
    <v1> <v2>               N lines, velocity dofs per node
    pressure <M>
    <p>                     M lines, pressure dofs per pressure node
    rigid <t> <h1> <h2> <theta> <l1> <l2> <r>
    end
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .kinematics import RigidState
from .solver import FluidField

MAGIC = "FSIFLD 1"


class NonFiniteOutputError(ValueError):
    """A value about to be written is NaN or infinite."""


class FieldDumpError(ValueError):
    """Malformed or truncated field dump."""


def _g(x) -> str:
    return format(float(x), ".17g")


def _check_finite(arr, what):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteOutputError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")


def write_timeseries(path, columns, rows) -> None:
    """CSV with a header row; an empty row list gives a header-only file."""
    rows = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    _check_finite(rows, os.fspath(path))
    lines = [",".join(columns)]
    lines.extend(",".join(_g(v) for v in row) for row in rows)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_timeseries(path):
    """Header and rows of a CSV written by :func:`write_timeseries`."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        data = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, np.array(data, dtype=float).reshape(-1, len(header))


@dataclass
class FieldDump:
    dims: tuple
    nodes: np.ndarray
    velocity: np.ndarray    # (N, 2)
    pressure: np.ndarray
    state: RigidState
    t: float

    def fluid(self) -> FluidField:
        return FluidField(t=self.t, v=self.velocity.ravel().copy(), p=self.pressure.copy(),
                          l=self.state.l.copy(), r=self.state.r)


def dump_field(path, fluid: FluidField, mesh, state: RigidState | None = None, nodes=None) -> None:
    """Write one field snapshot.

    ``nodes`` defaults to the reference velocity nodes; pass the flow-map
    positions ``X(t, y)`` to record the deformed mesh.
    """
    nodes = mesh.vnodes if nodes is None else np.asarray(nodes, dtype=float)
    v = np.asarray(fluid.v, dtype=float).reshape(-1, 2)
    p = np.asarray(fluid.p, dtype=float)
    if len(v) != len(nodes):
        raise ValueError(f"{len(v)} velocity pairs for {len(nodes)} nodes")
    if state is None:
        state = RigidState(l=fluid.l, r=fluid.r)
    rigid = [fluid.t, *state.h, state.theta, *fluid.l, fluid.r]
    for arr, what in ((nodes, "nodes"), (v, "velocity"), (p, "pressure"), (rigid, "rigid state")):
        _check_finite(arr, what)
    out = [MAGIC, f"dims {int(mesh.nr)} {int(mesh.ntheta)}", f"nodes {len(nodes)}"]
    out.extend(f"{_g(a)} {_g(b)}" for a, b in nodes)
    out.append(f"velocity {len(v)}")
    out.extend(f"{_g(a)} {_g(b)}" for a, b in v)
    out.append(f"pressure {len(p)}")
    out.extend(_g(a) for a in p)
    out.append("rigid " + " ".join(_g(a) for a in rigid))
    out.append("end")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.lineno = 0

    def line(self, what: str) -> list:
        if self.pos >= len(self.data):
            raise FieldDumpError(f"truncated dump: expected {what} at byte offset {self.pos}")
        nl = self.data.find(b"\n", self.pos)
        if nl < 0:
            raise FieldDumpError(f"truncated dump: unterminated line at byte offset {len(self.data)}")
        raw = self.data[self.pos:nl]
        self.pos = nl + 1
        self.lineno += 1
        try:
            return raw.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise FieldDumpError(f"line {self.lineno}: non-ASCII content") from exc

    def fail(self, msg):
        raise FieldDumpError(f"line {self.lineno}: {msg}")

    def numbers(self, what: str, count: int) -> list:
        tok = self.line(what)
        if len(tok) != count:
            self.fail(f"expected {count} numbers for {what}, got {len(tok)}")
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            self.fail(f"bad number in {what}: {' '.join(tok)!r}")
        if not all(math.isfinite(v) for v in vals):
            self.fail(f"non-finite number in {what}")
        return vals

    def section(self, name: str, nfields: int | None = None) -> list:
        tok = self.line(f"'{name}' header")
        if not tok or tok[0] != name:
            self.fail(f"expected '{name}', got {' '.join(tok)!r}")
        if nfields is not None and len(tok) != nfields + 1:
            self.fail(f"'{name}' takes {nfields} values")
        return tok[1:]

    def count(self, name: str) -> int:
        (c,) = self.section(name, 1)
        try:
            n = int(c)
        except ValueError:
            self.fail(f"bad count {c!r}")
        if n < 0:
            self.fail(f"negative count {n}")
        return n


def read_field_dump(path) -> FieldDump:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if " ".join(rd.line("header")) != MAGIC:
        rd.fail(f"missing '{MAGIC}' header")
    dims = rd.section("dims", 2)
    try:
        dims = (int(dims[0]), int(dims[1]))
    except ValueError:
        rd.fail("bad mesh dimensions")
    n = rd.count("nodes")
    nodes = np.array([rd.numbers("node coordinates", 2) for _ in range(n)]).reshape(n, 2)
    nv = rd.count("velocity")
    if nv != n:
        rd.fail(f"{nv} velocity pairs for {n} nodes")
    vel = np.array([rd.numbers("velocity", 2) for _ in range(nv)]).reshape(nv, 2)
    npr = rd.count("pressure")
    pres = np.array([rd.numbers("pressure", 1)[0] for _ in range(npr)])
    tok = rd.section("rigid", 7)
    try:
        t, h1, h2, th, l1, l2, r = (float(x) for x in tok)
    except ValueError:
        rd.fail("bad number in rigid state")
    if rd.line("'end'") != ["end"]:
        rd.fail("expected 'end'")
    state = RigidState(h=(h1, h2), theta=th, l=(l1, l2), r=r)
    return FieldDump(dims=dims, nodes=nodes, velocity=vel, pressure=pres, state=state, t=t)


def load_field(path):
    """``(FluidField, (nr, ntheta))`` from a field dump."""
    d = read_field_dump(path)
    return d.fluid(), d.dims
