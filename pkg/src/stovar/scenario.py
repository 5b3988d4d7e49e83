"""Scenario files: JSON schema, registries, and resolution into model objects.

A scenario is a JSON object with the following keys (see README for the full
schema):

    id, grid {a, b, steps}, paths, seed, dimension,
    model {kind, ...}, density_route, lagrangian {quadratic_form, potential},
    estimator {...}, tasks [...], variations [...], groups [...],
    coherence {x0, v0}, product_rule {times, delta},
    export_ensemble, export_binary, tolerances {...}

Names resolve against the registries below; unknown names raise a
ScenarioError that spells out the registry and the offending key. Values are
unitless (natural units; any hbar-like constant is absorbed into sigma).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from importlib import resources
from pathlib import Path

import numpy as np

from .density import (DiracDensityModel, KdeDensityModel, brownian_density,
                      ou_stationary_density)
from .diffusion import (DiffusionModel, PathEnsemble, TimeGrid, affine_model,
                        deterministic_ensemble, gaussian_start, point_start, simulate)
from .exceptions import ScenarioError
from .lagrangian import (LagrangianSpec, Potential, QuadraticForm,
                         central_power_potential, free_potential,
                         harmonic_potential, tabulated_potential)
from .nelson import EstimatorConfig
from .noether import (OneParameterGroup, affine_group, rotation_group,
                      scaling_group, translation_group)
from .variation import (VariationProcess, bump_variation, constant_variation,
                        linear_variation, sine_variation, classical_el_solve)

KNOWN_TASKS = ("simulate", "derivatives", "action", "dF", "residual", "coherence", "noether")

DEFAULT_TOLERANCES: dict[str, float] = {
    "deriv_slope_rtol": 0.10,
    "product_rule_sigmas": 3.0,
    "df_agree_sigmas": 3.0,
    "df_significant_sigmas": 5.0,
    "residual_ratio_max": 0.01,
    "coherence_match_tol": 1e-10,
    "coherence_sup_tol": 1e-3,
    "invariance_tol": 1e-9,
    "commutation_tol": 1e-6,
    "commutation_delta_s": 1e-4,
    "constancy_level": 0.99,
    "constancy_range_factor": 5.0,
    "action_mask_fraction": 0.2,
}


def _registry_error(registry: str, key, known) -> ScenarioError:
    names = ", ".join(sorted(known))
    return ScenarioError(f"unknown {registry} {key!r}; registered: {names}")


# ---------------------------------------------------------------------------
# potential registry
# ---------------------------------------------------------------------------

def _potential_free(params: dict, dim: int) -> Potential:
    return free_potential()


def _potential_harmonic(params: dict, dim: int) -> Potential:
    return harmonic_potential(omega=float(params.get("omega", 1.0)))


def _potential_central_power(params: dict, dim: int) -> Potential:
    return central_power_potential(k=float(params.get("k", 1.0)),
                                   alpha=float(params.get("alpha", 2.0)))


def _potential_tabulated(params: dict, dim: int) -> Potential:
    if "radii" not in params or "values" not in params:
        raise ScenarioError("tabulated potential needs 'radii' and 'values' tables")
    return tabulated_potential(params["radii"], params["values"])


POTENTIALS = {
    "free": _potential_free,
    "harmonic": _potential_harmonic,
    "central_power": _potential_central_power,
    "tabulated": _potential_tabulated,
}


def make_potential(desc: dict, dim: int) -> Potential:
    name = desc.get("name")
    if name not in POTENTIALS:
        raise _registry_error("potential", name, POTENTIALS)
    return POTENTIALS[name](desc, dim)


# ---------------------------------------------------------------------------
# model + density-family registry
# ---------------------------------------------------------------------------

DENSITY_FAMILIES = ("bm", "ou-stationary", "deterministic")


def make_model(desc: dict, dim: int, grid: TimeGrid,
               lagrangian: LagrangianSpec | None = None) -> DiffusionModel:
    kind = desc.get("kind")
    if kind == "bm":
        sigma = float(desc.get("sigma", 1.0))
        x0 = np.asarray(desc.get("x0", np.zeros(dim)), dtype=float).reshape(dim)
        spawn = desc.get("spawn", "time-zero")
        if spawn == "time-zero":
            if grid.a <= 0:
                raise ScenarioError("bm with spawn 'time-zero' needs a > 0")
            initial = gaussian_start(x0, sigma**2 * grid.a * np.eye(dim))
        elif spawn == "at-start":
            initial = point_start(x0)
        else:
            raise ScenarioError(f"unknown bm spawn {spawn!r}; use 'time-zero' or 'at-start'")
        return affine_model(dim, np.zeros((dim, dim)), np.zeros(dim),
                            sigma * np.eye(dim), initial,
                            description=f"bm(sigma={sigma},x0={x0.tolist()},spawn={spawn})")
    if kind == "ou-stationary":
        omega = float(desc.get("omega", 1.0))
        sigma = float(desc.get("sigma", 1.0))
        var = sigma**2 / (2.0 * omega)
        initial = gaussian_start(np.zeros(dim), var * np.eye(dim))
        return affine_model(dim, -omega * np.eye(dim), np.zeros(dim),
                            sigma * np.eye(dim), initial,
                            description=f"ou-stationary(omega={omega},sigma={sigma})")
    if kind == "constant":
        x0 = np.asarray(desc.get("x0", np.zeros(dim)), dtype=float).reshape(dim)
        return affine_model(dim, np.zeros((dim, dim)), np.zeros(dim),
                            np.zeros((dim, dim)), point_start(x0),
                            description=f"constant(x0={x0.tolist()})")
    if kind == "classical":
        # zero-noise embedding; the ensemble is produced by the classical solver
        x0 = np.asarray(desc.get("x0", np.zeros(dim)), dtype=float).reshape(dim)
        return affine_model(dim, np.zeros((dim, dim)), np.zeros(dim),
                            np.zeros((dim, dim)), point_start(x0),
                            description="classical-embedding")
    raise _registry_error("model kind", kind, ("bm", "ou-stationary", "constant", "classical"))


def make_ensemble(sc: "Scenario", model: DiffusionModel,
                  lagrangian: LagrangianSpec, threads: int = 1) -> PathEnsemble:
    desc = sc.model
    if desc.get("kind") == "classical":
        x0 = np.asarray(desc.get("x0", np.zeros(sc.dimension)), dtype=float)
        v0 = np.asarray(desc.get("v0", np.zeros(sc.dimension)), dtype=float)
        traj = classical_el_solve(lagrangian, x0, v0, sc.grid)
        return deterministic_ensemble(sc.grid, traj.positions,
                                      description="classical-solution")
    return simulate(model, sc.grid, sc.n_paths, sc.seed, threads=threads)


def make_density(sc: "Scenario", model: DiffusionModel, ens: PathEnsemble):
    route = sc.density_route
    desc = sc.model
    kind = desc.get("kind")
    if route == "dirac":
        if not model.is_deterministic:
            raise ScenarioError("density_route 'dirac' requires a zero-noise model")
        return DiracDensityModel(dim=sc.dimension)
    if route == "analytic":
        if kind == "bm":
            if desc.get("spawn", "time-zero") != "time-zero":
                raise ScenarioError(
                    "analytic bm density requires spawn 'time-zero' (law N(x0, sigma^2 t))"
                )
            return brownian_density(sc.dimension, sigma=float(desc.get("sigma", 1.0)),
                                    x0=desc.get("x0"))
        if kind == "ou-stationary":
            return ou_stationary_density(sc.dimension, omega=float(desc.get("omega", 1.0)),
                                         sigma=float(desc.get("sigma", 1.0)))
        if kind in ("constant", "classical"):
            return DiracDensityModel(dim=sc.dimension)
        raise _registry_error("analytic density family", kind, DENSITY_FAMILIES)
    if route == "kde":
        a_const = model.diffusion_matrix_const()
        return KdeDensityModel(source=ens, a_const=a_const if a_const is not None
                               else np.eye(sc.dimension),
                               bandwidth_rule=sc.estimator.bandwidth_rule)
    raise _registry_error("density route", route, ("analytic", "kde", "dirac"))


# ---------------------------------------------------------------------------
# group and variation registries
# ---------------------------------------------------------------------------

def make_group(desc: dict, dim: int) -> OneParameterGroup:
    kind = desc.get("kind")
    if kind == "rotation":
        plane = tuple(desc.get("plane", (0, 1)))
        return rotation_group(dim, plane=plane)  # type: ignore[arg-type]
    if kind == "translation":
        direction = desc.get("direction")
        if direction is None:
            direction = np.eye(dim)[0]
        return translation_group(direction)
    if kind == "scaling":
        return scaling_group(dim, rate=float(desc.get("rate", 1.0)))
    if kind == "affine":
        if "generator" not in desc:
            raise ScenarioError("affine group needs a 'generator' matrix")
        return affine_group(desc["generator"], desc.get("gen_offset"),
                            name=desc.get("name", "affine"))
    raise _registry_error("group kind", kind, ("rotation", "translation", "scaling", "affine"))


def make_variation(desc: dict, grid: TimeGrid, dim: int) -> VariationProcess:
    kind = desc.get("kind")
    amp = float(desc.get("amplitude", 1.0))
    direction = desc.get("direction")
    if kind == "sine":
        return sine_variation(grid, k=int(desc.get("k", 1)), amplitude=amp,
                              direction=direction, dim=dim)
    if kind == "bump":
        return bump_variation(grid, amplitude=amp, direction=direction, dim=dim)
    if kind == "constant":
        return constant_variation(direction if direction is not None else np.eye(dim)[0],
                                  dim=dim)
    if kind == "linear":
        return linear_variation(grid, slope=float(desc.get("slope", 1.0)),
                                direction=direction, dim=dim)
    raise _registry_error("variation kind", kind, ("sine", "bump", "constant", "linear"))


# ---------------------------------------------------------------------------
# the scenario object
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    id: str
    grid: TimeGrid
    n_paths: int
    seed: int
    dimension: int
    model: dict
    density_route: str
    lagrangian_desc: dict
    estimator: EstimatorConfig
    tasks: list
    variations: list = dc_field(default_factory=list)
    groups: list = dc_field(default_factory=list)
    coherence: dict | None = None
    product_rule: dict = dc_field(default_factory=dict)
    export_ensemble: bool = False
    export_binary: bool = False
    tolerances: dict = dc_field(default_factory=dict)

    def tolerance(self, key: str) -> float:
        if key not in DEFAULT_TOLERANCES:
            raise ScenarioError(f"unknown tolerance key {key!r}")
        return float(self.tolerances.get(key, DEFAULT_TOLERANCES[key]))

    def make_lagrangian(self) -> LagrangianSpec:
        desc = self.lagrangian_desc
        qf = desc.get("quadratic_form")
        if qf is None:
            qf = np.eye(self.dimension)
        potential = make_potential(desc.get("potential", {"name": "free"}), self.dimension)
        return LagrangianSpec(q=QuadraticForm(np.asarray(qf, dtype=float)),
                              potential=potential, dim=self.dimension)

    def make_groups(self) -> list[OneParameterGroup]:
        return [make_group(g, self.dimension) for g in self.groups]

    def make_variations(self) -> list[VariationProcess]:
        return [make_variation(v, self.grid, self.dimension) for v in self.variations]


def parse_scenario(data: dict, source: str = "<dict>") -> Scenario:
    try:
        grid_desc = data["grid"]
        grid = TimeGrid(float(grid_desc["a"]), float(grid_desc["b"]), int(grid_desc["steps"]))
        tasks = list(data.get("tasks", []))
        for t in tasks:
            if t not in KNOWN_TASKS:
                raise _registry_error("task", t, KNOWN_TASKS)
        est_desc = dict(data.get("estimator", {}))
        estimator = EstimatorConfig(
            h_steps=int(est_desc.get("h_steps", 1)),
            regression=est_desc.get("regression", "nw"),
            bandwidth_rule=est_desc.get("bandwidth_rule", "silverman"),
            bandwidth_scale=float(est_desc.get("bandwidth_scale", 1.0)),
            knn_k=int(est_desc.get("knn_k", 64)),
            min_effective=float(est_desc.get("min_effective", 10.0)),
            mask_low_density=bool(est_desc.get("mask_low_density", True)),
            times=est_desc.get("times"),
        )
        tolerances = dict(data.get("tolerances", {}))
        for key in tolerances:
            if key not in DEFAULT_TOLERANCES:
                raise _registry_error("tolerance", key, DEFAULT_TOLERANCES)
        sc = Scenario(
            id=str(data.get("id", Path(source).stem or "scenario")),
            grid=grid,
            n_paths=int(data.get("paths", 1000)),
            seed=int(data.get("seed", 0)),
            dimension=int(data.get("dimension", 1)),
            model=dict(data.get("model", {})),
            density_route=data.get("density_route", "analytic"),
            lagrangian_desc=dict(data.get("lagrangian", {})),
            estimator=estimator,
            tasks=tasks,
            variations=list(data.get("variations", [])),
            groups=list(data.get("groups", [])),
            coherence=data.get("coherence"),
            product_rule=dict(data.get("product_rule", {})),
            export_ensemble=bool(data.get("export_ensemble", False)),
            export_binary=bool(data.get("export_binary", False)),
            tolerances=tolerances,
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario {source}: missing required key {exc}") from exc
    # eager resolution so unknown names fail at parse time
    lag = sc.make_lagrangian()
    make_model(sc.model, sc.dimension, sc.grid, lag)
    sc.make_groups()
    sc.make_variations()
    if sc.density_route not in ("analytic", "kde", "dirac"):
        raise _registry_error("density route", sc.density_route, ("analytic", "kde", "dirac"))
    return sc


def load_scenario(path_or_name) -> Scenario:
    """Load a scenario from a file path or a bundled scenario name."""
    p = Path(path_or_name)
    if not p.exists():
        bundled = dict(bundled_scenarios())
        if str(path_or_name) in bundled:
            p = bundled[str(path_or_name)]
        else:
            raise ScenarioError(
                f"scenario file {path_or_name!r} not found "
                f"(bundled: {', '.join(sorted(bundled))})"
            )
    try:
        with open(p) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {p}: parse error at line {exc.lineno}: {exc.msg}") from exc
    return parse_scenario(data, source=str(p))


def bundled_scenarios() -> list[tuple[str, Path]]:
    """(name, path) for every scenario JSON shipped with the package."""
    out = []
    root = resources.files("stovar.scenarios")
    for entry in root.iterdir():
        if entry.name.endswith(".json"):
            out.append((entry.name[:-5], Path(str(entry))))
    return sorted(out)


def registries_text() -> str:
    lines = ["potentials:"]
    lines += [f"  - {name}" for name in sorted(POTENTIALS)]
    lines.append("density families (analytic route):")
    lines += [f"  - {name}" for name in DENSITY_FAMILIES]
    lines.append("density routes: analytic, kde, dirac")
    lines.append("model kinds: bm, ou-stationary, constant, classical")
    lines.append("groups: rotation, translation, scaling, affine")
    lines.append("variations: sine, bump, constant, linear")
    lines.append("bundled scenarios:")
    for name, _ in bundled_scenarios():
        lines.append(f"  - {name}")
    return "\n".join(lines)
