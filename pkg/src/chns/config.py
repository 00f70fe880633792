"""Run configuration: ``key = value`` text with dotted sections.

Every key has a type and a default; unknown keys, bad values and violated
constraints are reported with the offending line number.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .evolution import SimState, StepperConfig, initial_state
from .grid import Grid, GridError, ScalarField, VectorField
from .operators import LinearSolveConfig, SolveMethod, operators_for
from .potentials import (PhysParams, PotentialKind, PotentialSpec, regularize_initial_phi,
                         regularize_initial_sigma)


class ConfigError(ValueError):
    pass


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _auto_float(s: str):
    return None if s.strip().lower() == "auto" else float(s)


def _opt_int(s: str):
    return None if s.strip().lower() == "auto" else int(s)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


INITIAL_KINDS = ("uniform", "random", "file", "perturbed-equilibrium")

# key -> (parser, default as text)
SCHEMA: dict[str, tuple[Callable[[str], Any], str]] = {
    "grid.dims": (_int_list, "64, 64"),
    "grid.lengths": (_float_list, "25.6, 25.6"),
    "potential.kind": (_choice("FloryHuggins", "Quartic"), "FloryHuggins"),
    "potential.clip_delta": (float, "1e-09"),
    "params.nu1": (float, "1"),
    "params.nu2": (float, "1"),
    "params.chi": (float, "0"),
    "params.alpha": (float, "0"),
    "params.beta": (float, "0"),
    "params.c0": (float, "0"),
    "params.theta": (float, "1"),
    "params.theta0": (float, "2"),
    "params.gamma": (float, "0"),
    "stepper.dt": (float, "0.01"),
    "stepper.stabilization": (_auto_float, "auto"),
    "stepper.clip_floor": (float, "1e-06"),
    "linear.method": (_choice(*(m.value for m in SolveMethod)), "Spectral"),
    "linear.tol": (float, "1e-10"),
    "linear.max_iter": (_opt_int, "auto"),
    "initial.kind": (_choice(*INITIAL_KINDS), "random"),
    "initial.phi_mean": (float, "0"),
    "initial.sigma_mean": (float, "0"),
    "initial.amplitude": (float, "0.05"),
    "initial.sigma_amplitude": (float, "0"),
    "initial.velocity_amplitude": (float, "0"),
    "initial.seed": (int, "0"),
    "initial.smoothing": (int, "0"),
    "initial.file": (str, ""),
    "initial.regularize_k": (float, "0"),
    "run.t_end": (float, "1"),
    "run.csv_every": (int, "1"),
    "run.snapshot_every": (int, "100"),
    "run.checkpoint_every": (int, "1000"),
    "run.output_dir": (str, "output"),
    "equilibrate.method": (_choice("cho_flow", "reduced", "minimize"), "cho_flow"),
    "equilibrate.tol": (float, "1e-08"),
    "equilibrate.gamma": (float, "0.1"),
    "equilibrate.dt": (float, "0.01"),
    "equilibrate.max_steps": (int, "20000"),
    "equilibrate.n_starts": (int, "4"),
    "equilibrate.seed": (int, "0"),
}

_LINE = re.compile(r"^([A-Za-z_][\w]*(?:\.[A-Za-z_][\w]*)+)\s*=\s*(.*?)\s*$")


@dataclass(frozen=True)
class RunConfig:
    values: dict
    lines: dict
    base_dir: Path

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    @property
    def grid(self) -> Grid:
        return Grid(self["grid.dims"], self["grid.lengths"])

    @property
    def params(self) -> PhysParams:
        return PhysParams(**self.section("params"))

    @property
    def potential(self) -> PotentialSpec:
        return self.params.potential(PotentialKind(self["potential.kind"]), self["potential.clip_delta"])

    @property
    def linear(self) -> LinearSolveConfig:
        return LinearSolveConfig(SolveMethod(self["linear.method"]), self["linear.tol"], self["linear.max_iter"])

    @property
    def stepper(self) -> StepperConfig:
        return StepperConfig(dt=self["stepper.dt"], params=self.params, potential=self.potential,
                             stabilization=self["stepper.stabilization"], linear=self.linear,
                             clip_floor=self["stepper.clip_floor"])

    def path(self, key: str) -> Path:
        p = Path(self[key])
        return p if p.is_absolute() else self.base_dir / p


def _fail(msg: str, line: int | None) -> ConfigError:
    return ConfigError(f"line {line}: {msg}" if line else msg)


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    raw: dict[str, str] = {}
    lines: dict[str, int] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        m = _LINE.match(body)
        if not m:
            raise _fail(f"cannot parse '{line.strip()}' (expected 'section.key = value')", no)
        key, val = m.groups()
        if key not in SCHEMA:
            raise _fail(f"unknown key '{key}'", no)
        if key in lines:
            raise _fail(f"duplicate key '{key}' (first set on line {lines[key]})", no)
        raw[key] = val
        lines[key] = no
    values = {}
    for key, (parse, default) in SCHEMA.items():
        text_val = raw.get(key, default)
        try:
            values[key] = parse(text_val)
        except ValueError as exc:
            raise _fail(f"bad value '{text_val}' for {key}: {exc}", lines.get(key)) from None
    cfg = RunConfig(values, lines, Path(base_dir))
    _validate(cfg)
    return cfg


def _blame(cfg: RunConfig, section: str, msg: str) -> int | None:
    """Line of the first key of ``section`` mentioned in ``msg``, else of any key in the section."""
    keys = [k for k in cfg.lines if k.startswith(section + ".")]
    named = [k for k in keys if re.search(r"\b" + re.escape(k.split(".", 1)[1]) + r"\b", msg)]
    pick = sorted(named or keys, key=lambda k: cfg.lines[k])
    return cfg.lines[pick[-1]] if pick else None


def _validate(cfg: RunConfig) -> None:
    checks = [("grid", lambda: cfg.grid), ("params", lambda: cfg.params),
              ("potential", lambda: cfg.potential), ("linear", lambda: cfg.linear),
              ("stepper", lambda: cfg.stepper)]
    for section, build in checks:
        try:
            build()
        except (ValueError, GridError) as exc:
            raise _fail(str(exc), _blame(cfg, section, str(exc))) from None
    for key in ("run.csv_every", "run.snapshot_every", "run.checkpoint_every"):
        if cfg[key] < 1:
            raise _fail(f"{key} must be >= 1", cfg.lines.get(key))
    if cfg["run.t_end"] < 0:
        raise _fail("run.t_end must be nonnegative", cfg.lines.get("run.t_end"))
    if not -1.0 < cfg["initial.phi_mean"] < 1.0:
        raise _fail("initial.phi_mean must lie in (-1,1)", cfg.lines.get("initial.phi_mean"))
    if cfg["initial.kind"] in ("file", "perturbed-equilibrium"):
        if not cfg["initial.file"]:
            raise _fail(f"initial.kind = {cfg['initial.kind']} needs initial.file", cfg.lines.get("initial.kind"))
        if not cfg.path("initial.file").is_file():
            raise _fail(f"initial.file '{cfg['initial.file']}' does not exist", cfg.lines.get("initial.file"))


def _render(key: str, value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ", ".join(_render(key, v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Normalised text with every key explicit, in schema order."""
    out = []
    section = None
    for key in SCHEMA:
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                out.append("")
            out.append(f"# {sec}")
            section = sec
        out.append(f"{key} = {_render(key, cfg[key])}")
    return "\n".join(out) + "\n"


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)


def _random_field(grid: Grid, mean: float, amplitude: float, passes: int, rng) -> np.ndarray:
    ops = operators_for(grid)
    h2 = min(grid.spacing) ** 2
    x = rng.uniform(-amplitude, amplitude, grid.shape)
    for _ in range(passes):
        x = ops.solve_neumann(x, c0=1.0, c1=h2)
    return x - x.mean() + mean


def _random_velocity(grid: Grid, amplitude: float, rng) -> VectorField:
    ops = operators_for(grid)
    u = VectorField(grid, tuple(rng.standard_normal(grid.face_shape(d)) for d in range(grid.ndim)))
    u, _ = ops.leray_project(u.components)
    n = ops.face_norm(u)
    return VectorField(grid, tuple(amplitude * c / n for c in u)) if n > 0 else VectorField.zeros(grid)


def build_initial_state(cfg: RunConfig) -> SimState:
    """Initial state described by the ``initial.*`` keys."""
    from .io import load_checkpoint

    grid = cfg.grid
    params, pot = cfg.params, cfg.potential
    kind = cfg["initial.kind"]
    rng = np.random.default_rng(cfg["initial.seed"])
    passes = cfg["initial.smoothing"]
    v = None
    if kind == "uniform":
        phi = np.full(grid.shape, cfg["initial.phi_mean"])
        sigma = np.full(grid.shape, cfg["initial.sigma_mean"])
    elif kind == "random":
        phi = _random_field(grid, cfg["initial.phi_mean"], cfg["initial.amplitude"], passes, rng)
        sigma = _random_field(grid, cfg["initial.sigma_mean"], cfg["initial.sigma_amplitude"], passes, rng)
    else:
        st = load_checkpoint(cfg.path("initial.file"))
        if st.grid != grid:
            raise ConfigError(f"initial.file grid {st.grid.dims} does not match grid.dims {grid.dims}")
        if kind == "file":
            return dataclasses.replace(st, phi_mean0=float(st.phi.values.mean()),
                                       sigma_mean0=float(st.sigma.values.mean()))
        amp = cfg["initial.amplitude"]
        phi = st.phi.values + _random_field(grid, 0.0, amp, passes, rng)
        sigma = st.sigma.values + _random_field(grid, 0.0, amp, passes, rng)
    if cfg["initial.velocity_amplitude"] > 0:
        v = _random_velocity(grid, cfg["initial.velocity_amplitude"], rng)
    phi_f = ScalarField(grid, phi)
    sigma_f = ScalarField(grid, sigma)
    k = cfg["initial.regularize_k"]
    if k > 0:
        ops = operators_for(grid)
        phi_f = regularize_initial_phi(phi_f, k, ops, pot)
        sigma_f = regularize_initial_sigma(sigma_f, k, ops)
    return initial_state(phi_f, sigma_f, params, pot, v)
