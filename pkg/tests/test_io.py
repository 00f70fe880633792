import math

import numpy as np
import pytest

from chns.diagnostics import Recorder
from chns.evolution import StepperConfig, initial_state, run
from chns.grid import ScalarField, VectorField, make_grid
from chns.io import (CSV_COLUMNS, CheckpointError, cell_averaged_velocity, load_checkpoint, read_csv_columns,
                     read_timeseries_csv, read_vtk, save_checkpoint, write_timeseries_csv, write_vtk_snapshot)
from chns.operators import operators_for
from chns.potentials import PhysParams, PotentialKind, PotentialSpec

FH = PotentialSpec(PotentialKind.FLORY_HUGGINS, theta=1.0, theta0=2.0)
PARAMS = PhysParams(chi=0.3, alpha=0.5, c0=0.1, nu1=1.5, nu2=1.0)
CFG = StepperConfig(dt=0.01, params=PARAMS, potential=FH)


def _state(dims=(12, 10), lengths=(3.0, 2.5)):
    g = make_grid(dims, lengths)
    rng = np.random.default_rng(0)
    phi = ScalarField(g, 0.5 * np.tanh(rng.standard_normal(g.shape)))
    sigma = ScalarField(g, rng.standard_normal(g.shape))
    v = VectorField(g, tuple(0.1 * rng.standard_normal(g.face_shape(d)) for d in range(g.ndim)))
    return initial_state(phi, sigma, PARAMS, FH, v)


@pytest.fixture(scope="module")
def evolved():
    s = _state()
    rec = Recorder(PARAMS, FH)
    rec.record(s)
    out = run(s, CFG, n_steps=4, callbacks=[rec])
    return out, rec.records


def _same_state(a, b):
    assert a.grid == b.grid
    for x, y in ((a.phi, b.phi), (a.mu, b.mu), (a.sigma, b.sigma), (a.p, b.p)):
        assert np.array_equal(x.values, y.values)
    assert all(np.array_equal(x, y) for x, y in zip(a.v.components, b.v.components))
    for name in ("t", "step", "phi_mean0", "sigma_mean0", "phi_mean_discrete", "clip_events"):
        assert getattr(a, name) == getattr(b, name)


def test_csv_header_and_roundtrip(evolved, tmp_path):
    _, recs = evolved
    path = write_timeseries_csv(recs, tmp_path / "ts.csv")
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines()[0] == ",".join(CSV_COLUMNS)
    back = read_timeseries_csv(path)
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        for name in ("t", "step", "E_total", "D_diss", "Lambda", "phi_mean_err"):
            assert getattr(a, name) == getattr(b, name)
        assert (math.isnan(a.energy_balance_residual) and math.isnan(b.energy_balance_residual)) \
            or a.energy_balance_residual == b.energy_balance_residual
    cols = read_csv_columns(path)
    assert list(cols) == list(CSV_COLUMNS)
    assert np.array_equal(cols["step"], np.arange(5))


def test_csv_rejects_wrong_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_timeseries_csv(p)


def test_vtk_roundtrip(evolved, tmp_path):
    s, _ = evolved
    path = write_vtk_snapshot(s, tmp_path / "snap.vtk")
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0\n")
    assert "DATASET STRUCTURED_POINTS" in text and "DIMENSIONS 12 10 1" in text
    data = read_vtk(path)
    hx, hy = s.grid.spacing
    assert data["dims"] == (12, 10, 1)
    assert data["origin"] == (0.5 * hx, 0.5 * hy, 0.0)
    assert data["spacing"] == (hx, hy, 1.0)
    for name in ("phi", "mu", "sigma", "p"):
        assert np.array_equal(data["scalars"][name], getattr(s, name).values.ravel())
    vel = data["vectors"]["v"]
    assert vel.shape == (120, 3)
    avg = cell_averaged_velocity(s.v)
    assert np.array_equal(vel[:, 0], avg[0].ravel()) and np.array_equal(vel[:, 1], avg[1].ravel())
    assert np.all(vel[:, 2] == 0)


def test_cell_averaged_velocity_of_uniform_interior_flow():
    g = make_grid((4, 4), (1.0, 1.0))
    u = np.zeros(g.face_shape(0))
    u[:, 1:-1] = 1.0
    v = VectorField(g, (u, np.zeros(g.face_shape(1))))
    avg = cell_averaged_velocity(v)
    assert np.allclose(avg[0][:, 1:-1], 1.0) and np.allclose(avg[0][:, [0, -1]], 0.5)


def test_checkpoint_roundtrip(evolved, tmp_path):
    s, _ = evolved
    path = save_checkpoint(s, tmp_path / "c.chns")
    assert path.read_bytes()[:4] == b"CHNS"
    _same_state(s, load_checkpoint(path))


def test_checkpoint_roundtrip_3d(tmp_path):
    g = make_grid((4, 5, 6), (1.0, 1.0, 2.0))
    rng = np.random.default_rng(1)
    phi = ScalarField(g, 0.3 * rng.random(g.shape))
    s = initial_state(phi, ScalarField.constant(g, 0.2), PARAMS, FH)
    _same_state(s, load_checkpoint(save_checkpoint(s, tmp_path / "c3.chns")))


def test_restart_is_bit_identical(tmp_path):
    s = _state()
    straight = run(s, CFG, n_steps=6)
    half = run(s, CFG, n_steps=3)
    resumed = run(load_checkpoint(save_checkpoint(half, tmp_path / "mid.chns")), CFG, n_steps=3)
    _same_state(straight, resumed)


@pytest.mark.parametrize("cut", [0, 3, 10, 40, -8, -1])
def test_truncated_checkpoint(evolved, tmp_path, cut):
    s, _ = evolved
    data = save_checkpoint(s, tmp_path / "c.chns").read_bytes()
    bad = tmp_path / "t.chns"
    bad.write_bytes(data[:cut] if cut >= 0 else data[:len(data) + cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_corrupt_checkpoint(evolved, tmp_path):
    s, _ = evolved
    data = bytearray(save_checkpoint(s, tmp_path / "c.chns").read_bytes())
    p = tmp_path / "x.chns"
    p.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    data[4] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
    p.write_bytes(save_checkpoint(s, tmp_path / "c.chns").read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_outputs_have_no_timestamps(evolved, tmp_path):
    s, recs = evolved
    a = save_checkpoint(s, tmp_path / "a.chns").read_bytes()
    b = save_checkpoint(s, tmp_path / "b.chns").read_bytes()
    assert a == b
    assert write_vtk_snapshot(s, tmp_path / "a.vtk").read_bytes() == \
        write_vtk_snapshot(s, tmp_path / "b.vtk").read_bytes()


def test_loaded_velocity_is_divergence_free(evolved, tmp_path):
    s, _ = evolved
    back = load_checkpoint(save_checkpoint(s, tmp_path / "c.chns"))
    ops = operators_for(back.grid)
    assert np.max(np.abs(ops.divergence(back.v.components))) < 1e-10
