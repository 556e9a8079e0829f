"""Scenario files: TOML with typed keys and a fixed catalog of closed forms.

A scenario names a grid, an operator, terminal data, a measure, an optional
driver, solver parameters and the checks to run.  Coefficients and data are
given as ``{form = "...", ...params}`` tables (see ``FORMS``).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import SpaceTimeField, SpaceTimeGrid, box_grid, interval_grid
from .measures import MeasureData
from .operators import GeneratorFamily, divergence_form_generator, fractional_generator
from .semilinear import Driver, make_driver


class ScenarioError(ValueError):
    """Input error; the message names the offending field."""


KNOWN_CHECKS = ("duality", "weak_form", "mc", "energy", "l1", "delta", "green_ratio",
                "structural", "revuz", "classify", "capacity", "semilinear", "bsde",
                "comparison", "driver_l1", "tv")


def _normalized(x: np.ndarray, bounds) -> np.ndarray:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return (x - lo) / (hi - lo)


def _form_constant(t, x, bounds, value=0.0):
    return np.full((np.shape(t)[0], x.shape[0]), float(value))


def _form_affine(t, x, bounds, value=0.0, slope=0.0, tslope=0.0):
    return value + slope * x[None, :, 0] + tslope * t


def _form_sine(t, x, bounds, amp=1.0, freq=1.0, offset=0.0, tslope=0.0):
    xi = _normalized(x, bounds)
    prod = np.prod(np.sin(np.pi * freq * xi), axis=1)
    return offset + amp * prod[None, :] * (1 + tslope * t)


def _form_bump(t, x, bounds, center=0.5, width=0.1, height=1.0):
    c = np.broadcast_to(np.asarray(center, dtype=float), (x.shape[1],))
    r2 = np.sum((x - c) ** 2, axis=1)
    return height * np.exp(-r2 / (2 * width ** 2))[None, :] * np.ones_like(t)


FORMS = {"constant": _form_constant, "affine": _form_affine, "sine": _form_sine,
         "bump": _form_bump}


def evaluate_form(spec, grid: SpaceTimeGrid, where: str) -> np.ndarray:
    """``(M+1, N)`` values of a form table (or a plain number, or ``{table = [...]}``)."""
    M1 = grid.n_steps + 1
    if isinstance(spec, (int, float)):
        return np.full((M1, grid.n_nodes), float(spec))
    if not isinstance(spec, dict):
        raise ScenarioError(f"{where}: expected a number or a form table")
    spec = dict(spec)
    if "table" in spec:
        vals = np.asarray(spec["table"], dtype=float)
        if vals.shape != (grid.n_nodes,):
            raise ScenarioError(f"{where}.table: need {grid.n_nodes} values, got {vals.size}")
        return np.tile(vals, (M1, 1))
    name = spec.pop("form", None)
    if name is None:
        raise ScenarioError(f"{where}: missing required field 'form'")
    if name not in FORMS:
        raise ScenarioError(f"{where}.form: unknown form {name!r}; choose from {sorted(FORMS)}")
    try:
        out = FORMS[name](grid.times[:, None], grid.nodes, grid.bounds, **spec)
    except TypeError as exc:
        raise ScenarioError(f"{where}: bad parameters for form {name!r} ({exc})") from None
    out = np.broadcast_to(np.asarray(out, dtype=float), (M1, grid.n_nodes)).copy()
    if not np.all(np.isfinite(out)):
        raise ScenarioError(f"{where}: form {name!r} produced non-finite values")
    return out


def _coef_fn(spec, where: str, bounds):
    """``(t, x) -> values`` for generator coefficients evaluated at arbitrary points."""
    if isinstance(spec, (int, float)):
        return float(spec)
    if not isinstance(spec, dict) or "form" not in spec:
        raise ScenarioError(f"{where}: expected a number or a form table with 'form'")
    spec = dict(spec)
    name = spec.pop("form")
    if name not in FORMS:
        raise ScenarioError(f"{where}.form: unknown form {name!r}; choose from {sorted(FORMS)}")
    fn = FORMS[name]

    def coef(t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != len(bounds):
            x = x.reshape(-1, len(bounds))
        vals = fn(np.array([[float(t)]]), x, bounds, **spec)[0]
        return float(vals[0]) if vals.size == 1 else vals

    return coef


def _req(table: dict, key: str, where: str):
    if key not in table:
        raise ScenarioError(f"missing required field '{where}.{key}'" if where else
                            f"missing required field '{key}'")
    return table[key]


def _num(table, key, where, kind=float, default=None, lo=None, hi=None):
    if key not in table:
        if default is None:
            _req(table, key, where)
        return default
    val = table[key]
    try:
        val = kind(val)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}.{key}: expected {kind.__name__}, got {val!r}") from None
    if (lo is not None and val < lo) or (hi is not None and val > hi):
        raise ScenarioError(f"{where}.{key}: value {val!r} outside [{lo}, {hi}]")
    return val


@dataclass(eq=False)
class Scenario:
    name: str
    anchor: str
    description: str
    grid: SpaceTimeGrid
    gen: GeneratorFamily
    phi: np.ndarray
    mu: MeasureData
    driver: Driver | None
    solver: dict
    checks: list[str]
    capacity: dict | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def rebuild(self, **grid_overrides) -> "Scenario":
        """Same scenario on a modified grid (used for refinement studies)."""
        raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in self.raw.items()}
        raw["grid"] = {**raw["grid"], **grid_overrides}
        return build_scenario(raw)


def build_grid(spec: dict) -> SpaceTimeGrid:
    kind = spec.get("kind", "interval")
    T = _num(spec, "T", "grid", lo=1e-12)
    steps = _num(spec, "steps", "grid", int, lo=1, hi=100000)
    if kind == "interval":
        return interval_grid(_num(spec, "lower", "grid", default=0.0),
                             _num(spec, "upper", "grid", default=1.0),
                             _num(spec, "n", "grid", int, lo=1, hi=20000), T, steps)
    if kind == "box":
        bounds = _req(spec, "bounds", "grid")
        shape = _req(spec, "shape", "grid")
        if len(bounds) != 2 or len(shape) != 2:
            raise ScenarioError("grid.bounds and grid.shape must describe a 2D box")
        return box_grid(bounds, [int(s) for s in shape], T, steps, omit=spec.get("omit"))
    raise ScenarioError(f"grid.kind: unknown grid kind {kind!r} (interval, box)")


def build_operator(spec: dict, grid: SpaceTimeGrid) -> GeneratorFamily:
    kind = _req(spec, "kind", "operator")
    if kind == "divergence_drift":
        a = _coef_fn(_req(spec, "a", "operator"), "operator.a", grid.bounds)
        b = spec.get("b", 0.0)
        if isinstance(b, list):
            b = np.asarray(b, dtype=float)
        elif isinstance(b, dict):
            b = _coef_fn(b, "operator.b", grid.bounds)
        return divergence_form_generator(grid, a, b, stage_times=spec.get("stages"))
    if kind in ("fractional_const", "fractional_variable"):
        al = _req(spec, "alpha", "operator")
        if kind == "fractional_const" and not isinstance(al, (int, float)):
            raise ScenarioError("operator.alpha: fractional_const needs a number")
        fn = _coef_fn(al, "operator.alpha", grid.bounds)
        alpha_fn = (lambda x: fn(0.0, x)) if callable(fn) else fn  # noqa: E731
        return fractional_generator(grid, alpha_fn, cutoff=spec.get("cutoff"))
    raise ScenarioError(f"operator.kind: unknown operator kind {kind!r} "
                        "(divergence_drift, fractional_const, fractional_variable)")


def _nearest_node(grid: SpaceTimeGrid, x, where) -> int:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != grid.dim:
        raise ScenarioError(f"{where}.x: need {grid.dim} coordinates")
    return int(np.argmin(np.linalg.norm(grid.nodes - x[None, :], axis=1)))


def build_measure(spec: dict, grid: SpaceTimeGrid) -> MeasureData:
    dens = None
    if "density" in spec:
        dens = SpaceTimeField(evaluate_form(spec["density"], grid, "measure.density"), grid)
    slices = []
    for k, sl in enumerate(spec.get("slices", [])):
        where = f"measure.slices[{k}]"
        t = _num(sl, "t", where)
        vec = evaluate_form(_req(sl, "g", where), grid, where + ".g")[0]
        slices.append((t, vec))
    atoms = []
    for k, at in enumerate(spec.get("atoms", [])):
        where = f"measure.atoms[{k}]"
        t = _num(at, "t", where, lo=0.0, hi=grid.T)
        cell = int(grid.cell_of(t))
        atoms.append((cell, _nearest_node(grid, _req(at, "x", where), where), _num(at, "mass", where)))
    try:
        return MeasureData(grid, dens, slices, atoms)
    except ValueError as exc:
        raise ScenarioError(f"measure: {exc}") from None


def build_scenario(raw: dict) -> Scenario:
    name = raw.get("name", "unnamed")
    grid = build_grid(_req(raw, "grid", ""))
    gen = build_operator(_req(raw, "operator", ""), grid)
    phi = evaluate_form(raw.get("terminal", 0.0), grid, "terminal")[-1]
    mu = build_measure(raw.get("measure", {}), grid)
    driver = None
    if "driver" in raw:
        d = dict(raw["driver"])
        dname = _req(d, "name", "driver")
        d.pop("name")
        try:
            driver = make_driver(dname, **d)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"driver: {exc}") from None
    solver = dict(raw.get("solver", {}))
    solver.setdefault("n_paths", 10000)
    solver.setdefault("seed", 1)
    solver.setdefault("tol", 1e-10)
    solver.setdefault("workers", 1)
    _num(solver, "n_paths", "solver", int, lo=0)
    _num(solver, "tol", "solver", lo=1e-300)
    checks = list(raw.get("checks", ["duality", "structural"]))
    for c in checks:
        if c not in KNOWN_CHECKS:
            raise ScenarioError(f"checks: unknown check {c!r}; choose from {list(KNOWN_CHECKS)}")
    cap = raw.get("capacity")
    return Scenario(name, raw.get("anchor", ""), raw.get("description", ""), grid, gen, phi, mu,
                    driver, solver, checks, cap, raw)


def load_scenario(source: str | Path) -> Scenario:
    """Load from a path or a bundled scenario name."""
    path = Path(source)
    if not path.exists():
        bundled = resources.files("fkmeasure") / "scenarios" / f"{source}.toml"
        if not bundled.is_file():
            raise ScenarioError(f"no scenario file or bundled scenario named {str(source)!r}")
        text = bundled.read_text()
    else:
        text = path.read_text()
    return parse_scenario(text)


def parse_scenario(text: str) -> Scenario:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"parse error: {exc}") from None
    return build_scenario(raw)


def catalog() -> list[dict]:
    out = []
    for entry in sorted(resources.files("fkmeasure").joinpath("scenarios").iterdir(),
                        key=lambda p: p.name):
        if entry.name.endswith(".toml"):
            raw = tomllib.loads(entry.read_text())
            out.append({"name": raw.get("name", entry.name[:-5]), "anchor": raw.get("anchor", ""),
                        "description": raw.get("description", ""), "checks": raw.get("checks", [])})
    return out
