from importlib import resources

import numpy as np
import pytest

from chns.config import SCHEMA, ConfigError, build_initial_state, dump_config, load_config, parse_config
from chns.evolution import initial_state
from chns.grid import ScalarField, make_grid
from chns.io import save_checkpoint
from chns.operators import SolveMethod, operators_for
from chns.potentials import PotentialKind


def test_defaults():
    cfg = parse_config("")
    assert cfg["grid.dims"] == (64, 64)
    assert cfg["stepper.stabilization"] is None
    assert cfg["linear.method"] == "Spectral"
    assert cfg.potential.kind is PotentialKind.FLORY_HUGGINS
    assert cfg.linear.method is SolveMethod.SPECTRAL
    assert cfg.stepper.dt == 0.01


def test_parse_values_and_comments():
    cfg = parse_config("""
# header
grid.dims = 16, 8   # trailing comment
grid.lengths = 2.0, 1.0
potential.kind = Quartic
stepper.stabilization = 3.5
linear.method = ConjugateGradient
linear.max_iter = 500
""")
    assert cfg.grid == make_grid((16, 8), (2.0, 1.0))
    assert cfg.stepper.S == 3.5
    assert cfg.linear.max_iter == 500
    assert cfg.lines["potential.kind"] == 5


@pytest.mark.parametrize("text, line, fragment", [
    ("grid.dims = 8, 8\nbogus.key = 1\n", 2, "unknown key"),
    ("params.chi = 1\nparams.chi = 2\n", 2, "duplicate key"),
    ("\nstepper.dt = fast\n", 2, "bad value"),
    ("just some words\n", 1, "cannot parse"),
    ("potential.kind = Cubic\n", 1, "bad value"),
    ("params.theta = 3\nparams.theta0 = 2\n", 2, "requires theta < theta0"),
    ("grid.dims = 8, 8\nparams.c0 = 1.2\n", 2, "c0 must lie in (-1,1)"),
    ("grid.dims = 3, 8\n", 1, "grid too small"),
    ("stepper.dt = -0.1\n", 1, "dt must be positive"),
    ("run.csv_every = 0\n", 1, "csv_every"),
    ("initial.phi_mean = 1.0\n", 1, "phi_mean"),
    ("initial.kind = file\n", 1, "needs initial.file"),
    ("initial.kind = file\ninitial.file = missing.chns\n", 2, "does not exist"),
])
def test_errors_cite_line(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    msg = str(exc.value)
    assert msg.startswith(f"line {line}:")
    assert fragment in msg


def test_dump_is_normalised_and_idempotent():
    cfg = parse_config("params.chi = 0.50\ngrid.dims=16,16\ngrid.lengths = 4, 4\n")
    text = dump_config(cfg)
    assert "params.chi = 0.5\n" in text
    assert "grid.dims = 16, 16\n" in text
    keys = [ln.split(" = ")[0] for ln in text.splitlines() if " = " in ln]
    assert keys == list(SCHEMA)
    again = parse_config(text)
    assert again.values == cfg.values
    assert dump_config(again) == text


def test_load_config_missing(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


def test_bundled_example_loads():
    path = resources.files("chns") / "data" / "spinodal.cfg"
    cfg = load_config(path)
    assert cfg.potential.kind is PotentialKind.QUARTIC
    assert cfg["run.output_dir"] == "spinodal_output"


def test_build_uniform_and_random():
    base = "grid.dims = 12, 12\ngrid.lengths = 3, 3\ninitial.phi_mean = 0.2\ninitial.sigma_mean = 0.4\n"
    s = build_initial_state(parse_config(base + "initial.kind = uniform\n"))
    assert np.all(s.phi.values == 0.2) and np.all(s.sigma.values == 0.4)
    cfg = parse_config(base + "initial.kind = random\ninitial.amplitude = 0.1\ninitial.smoothing = 2\n"
                       "initial.velocity_amplitude = 0.05\ninitial.seed = 4\n")
    a, b = build_initial_state(cfg), build_initial_state(cfg)
    assert np.array_equal(a.phi.values, b.phi.values)
    assert a.phi.values.mean() == pytest.approx(0.2, abs=1e-14)
    assert np.max(np.abs(a.phi.values - 0.2)) <= 0.1
    ops = operators_for(a.grid)
    assert ops.face_norm(a.v.components) == pytest.approx(0.05, rel=1e-12)
    assert np.max(np.abs(ops.divergence(a.v.components))) < 1e-10


def test_build_from_file(tmp_path):
    g = make_grid((8, 8), (2.0, 2.0))
    cfg0 = parse_config("grid.dims = 8, 8\ngrid.lengths = 2, 2\n")
    x, y = g.cell_centers()
    st = initial_state(ScalarField(g, 0.3 * np.cos(np.pi * x / 2) + 0 * y), ScalarField.constant(g, 0.1),
                       cfg0.params, cfg0.potential)
    save_checkpoint(st, tmp_path / "eq.chns")
    text = "grid.dims = 8, 8\ngrid.lengths = 2, 2\ninitial.file = eq.chns\n"
    same = build_initial_state(parse_config(text + "initial.kind = file\n", tmp_path))
    assert np.array_equal(same.phi.values, st.phi.values)
    pert = build_initial_state(parse_config(text + "initial.kind = perturbed-equilibrium\n"
                                            "initial.amplitude = 0.01\ninitial.smoothing = 1\n", tmp_path))
    diff = pert.phi.values - st.phi.values
    assert 0 < np.max(np.abs(diff)) <= 0.01 and abs(diff.mean()) < 1e-14
    with pytest.raises(ConfigError, match="does not match"):
        build_initial_state(parse_config("grid.dims = 16, 16\ninitial.kind = file\ninitial.file = eq.chns\n",
                                         tmp_path))


def test_regularized_start():
    cfg = parse_config("grid.dims = 16, 16\ngrid.lengths = 1, 1\ninitial.kind = random\n"
                       "initial.amplitude = 0.9\ninitial.regularize_k = 2\n")
    s = build_initial_state(cfg)
    assert np.max(np.abs(s.phi.values)) < 1.0
