"""Time-series CSV, legacy VTK snapshots and binary checkpoints."""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .diagnostics import DiagnosticsRecord
from .evolution import SimState
from .grid import Grid, ScalarField, VectorField

CSV_COLUMNS = ("t", "step", "E_total", "F_free", "D_diss", "phi_mean", "phi_mean_pred", "phi_mean_err",
               "sigma_mean", "sigma_drift", "separation", "grad_mu", "grad_sigchi", "v_h1", "lambda",
               "energy_residual")

_RECORD_FIELDS = ("t", "step", "E_total", "F_free", "D_diss", "phi_mean", "phi_mean_predicted",
                  "phi_mean_err", "sigma_mean", "sigma_drift", "separation", "grad_mu_norm",
                  "grad_sigchi_norm", "v_h1_norm", "Lambda", "energy_balance_residual")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_timeseries_csv(records: Iterable[DiagnosticsRecord], path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in records:
                fh.write(",".join(_fmt(getattr(r, name)) for name in _RECORD_FIELDS) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write time series to {path}: {exc}") from exc
    return path


def read_timeseries_csv(path) -> list[DiagnosticsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected CSV header")
        out = []
        for row in reader:
            vals = {name: float(v) for name, v in zip(_RECORD_FIELDS, row)}
            vals["step"] = int(row[1])
            out.append(DiagnosticsRecord(**vals))
    return out


def read_csv_columns(path) -> dict[str, np.ndarray]:
    """Any CSV with a header row, as float columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def cell_averaged_velocity(v: VectorField) -> list[np.ndarray]:
    g = v.grid
    out = []
    for d, c in enumerate(v.components):
        ax = g.axis_of(d)
        lo = [slice(None)] * g.ndim
        hi = [slice(None)] * g.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        out.append(0.5 * (c[tuple(lo)] + c[tuple(hi)]))
    return out


def write_vtk_snapshot(state: SimState, path) -> Path:
    """Legacy ASCII STRUCTURED_POINTS with cell-centred samples as points."""
    path = Path(path)
    g = state.grid
    dims = list(g.dims) + [1] * (3 - g.ndim)
    h = list(g.spacing) + [1.0] * (3 - g.ndim)
    origin = [0.5 * s for s in g.spacing] + [0.0] * (3 - g.ndim)
    lines = ["# vtk DataFile Version 3.0", "chns snapshot", "ASCII", "DATASET STRUCTURED_POINTS",
             "DIMENSIONS %d %d %d" % tuple(dims),
             "ORIGIN " + " ".join(_fmt(o) for o in origin),
             "SPACING " + " ".join(_fmt(s) for s in h),
             f"POINT_DATA {g.size}"]
    for name, field in (("phi", state.phi), ("mu", state.mu), ("sigma", state.sigma), ("p", state.p)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(x) for x in field.values.ravel()]
    vel = cell_averaged_velocity(state.v)
    while len(vel) < 3:
        vel.append(np.zeros(g.shape))
    lines.append("VECTORS v double")
    stacked = np.stack([c.ravel() for c in vel], axis=1)
    lines += [" ".join(_fmt(x) for x in row) for row in stacked]
    try:
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write snapshot {path}: {exc}") from exc
    return path


def read_vtk(path) -> dict:
    """Minimal reader for the files written above."""
    tokens = Path(path).read_text(encoding="ascii").split("\n")
    out = {"scalars": {}, "vectors": {}}
    i = 4
    n = 0
    while i < len(tokens):
        line = tokens[i].strip()
        i += 1
        if not line:
            continue
        key, *rest = line.split()
        if key == "DIMENSIONS":
            out["dims"] = tuple(int(x) for x in rest)
        elif key == "ORIGIN":
            out["origin"] = tuple(float(x) for x in rest)
        elif key == "SPACING":
            out["spacing"] = tuple(float(x) for x in rest)
        elif key == "POINT_DATA":
            n = int(rest[0])
        elif key == "SCALARS":
            i += 1  # LOOKUP_TABLE
            out["scalars"][rest[0]] = np.array([float(x) for x in tokens[i:i + n]])
            i += n
        elif key == "VECTORS":
            out["vectors"][rest[0]] = np.array([[float(x) for x in t.split()] for t in tokens[i:i + n]])
            i += n
    return out


MAGIC = b"CHNS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: SimState, path) -> Path:
    """Binary checkpoint; everything little-endian, arrays row-major float64.

    Layout: magic, u32 version, u8 ndim, u64 dims, f64 lengths, f64 time,
    u64 step, f64 phi_mean0, sigma_mean0, phi_mean_discrete, u64 clip_events,
    then v components, p, phi, mu, sigma.
    """
    path = Path(path)
    g = state.grid
    parts = [MAGIC, struct.pack("<IB", VERSION, g.ndim),
             struct.pack(f"<{g.ndim}Q", *g.dims), struct.pack(f"<{g.ndim}d", *g.lengths),
             struct.pack("<dQdddQ", state.t, state.step, state.phi_mean0, state.sigma_mean0,
                         state.phi_mean_discrete, state.clip_events)]
    arrays = list(state.v.components) + [state.p.values, state.phi.values, state.mu.values, state.sigma.values]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float).reshape(shape)


def load_checkpoint(path) -> SimState:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a CHNS checkpoint (bad magic)")
    version, ndim = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    if ndim not in (2, 3):
        raise CheckpointError(f"corrupt checkpoint: dimension {ndim}")
    dims = r.unpack(f"<{ndim}Q")
    lengths = r.unpack(f"<{ndim}d")
    t, step, m0, s0, md, clips = r.unpack("<dQdddQ")
    g = Grid(tuple(dims), tuple(lengths))
    comps = tuple(r.array(g.face_shape(d)) for d in range(ndim))
    p, phi, mu, sigma = (r.array(g.shape) for _ in range(4))
    if r.pos != len(r.data):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return SimState(v=VectorField(g, comps), p=ScalarField(g, p), phi=ScalarField(g, phi),
                    mu=ScalarField(g, mu), sigma=ScalarField(g, sigma), t=t, step=step,
                    phi_mean0=m0, sigma_mean0=s0,
                    phi_mean_discrete=md, clip_events=clips)
