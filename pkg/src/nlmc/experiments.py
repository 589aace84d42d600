"""Scenario driver: config parsing, steady/transient studies, exports and the CLI."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import jsonschema
import numpy as np

from .basis import (
    DEFAULT_POLICY,
    basis_decay_profile,
    basis_matrix,
    build_auxiliary_spaces,
    build_cem_bases,
    build_simplified_bases,
)
from .fem_fine import (
    assemble_mass,
    assemble_stiffness,
    averaging_matrix,
    backward_euler,
    box_source,
    cell_field,
    load_vector,
    solve_fine_steady,
)
from .geometry import (
    GLOBAL,
    FractureNetwork,
    build_coarse_grid,
    build_fine_mesh,
    enumerate_continua,
    snap_fracture,
)
from .upscale import CoarseSystem, coarse_rhs, error_report

log = logging.getLogger(__name__)

_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_LAYER = {"oneOf": [{"type": "integer", "minimum": 0}, {"const": GLOBAL}]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["domain", "fine", "coarse", "kappa_matrix", "sources", "oversampling"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "domain": {
            "type": "object", "required": ["Lx", "Ly"], "additionalProperties": False,
            "properties": {"Lx": {"type": "number", "exclusiveMinimum": 0},
                           "Ly": {"type": "number", "exclusiveMinimum": 0}},
        },
        "fine": {
            "type": "object", "required": ["nx", "ny"], "additionalProperties": False,
            "properties": {"nx": {"type": "integer", "minimum": 1},
                           "ny": {"type": "integer", "minimum": 1}},
        },
        "coarse": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["Nx", "Ny"], "additionalProperties": False,
                "properties": {"Nx": {"type": "integer", "minimum": 1},
                               "Ny": {"type": "integer", "minimum": 1}},
            },
        },
        "kappa_matrix": {
            "oneOf": [
                {"type": "number", "exclusiveMinimum": 0},
                {"type": "object", "required": ["file"], "additionalProperties": False,
                 "properties": {"file": {"type": "string"}}},
            ],
        },
        "fractures": {
            "type": "array",
            "items": {
                "type": "object", "required": ["p0", "p1", "conductivity"],
                "additionalProperties": False,
                "properties": {"p0": _POINT, "p1": _POINT,
                               "conductivity": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "sources": {
            "type": "array",
            "items": {
                "type": "object", "required": ["box", "value"], "additionalProperties": False,
                "properties": {
                    "box": {"type": "array", "items": {"type": "number"},
                            "minItems": 4, "maxItems": 4},
                    "value": {"type": "number"},
                },
            },
        },
        "oversampling": {"type": "array", "minItems": 1, "items": _LAYER},
        "transient": {
            "type": "object", "required": ["dt", "t_end"], "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "t_end": {"type": "number", "exclusiveMinimum": 0},
                "report_times": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "tolerances": {
            "type": "object", "additionalProperties": False,
            "properties": {"solver": {"type": "number", "exclusiveMinimum": 0},
                           "constraint": {"type": "number", "exclusiveMinimum": 0}},
        },
        "basis": {"enum": ["simplified", "spectral"]},
        "boundary_policy": {"enum": ["physical", "dirichlet"]},
        "coarse_rhs": {"enum": ["galerkin", "block"]},
    },
}

_POLICIES = {"physical": "physical_on_domain_boundary", "dirichlet": "dirichlet_everywhere"}


class ConfigError(ValueError):
    """Invalid scenario file; ``pointer`` is the JSON pointer of the offending value."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class ExperimentConfig:
    domain: tuple[float, float]
    fine: tuple[int, int]
    coarse: list[tuple[int, int]]
    kappa_matrix: float | np.ndarray
    fractures: list[tuple[tuple[float, float], tuple[float, float], float]]
    sources: list[tuple[float, float, float, float, float]]
    oversampling: list
    transient: dict | None = None
    solver_tol: float = 1e-10
    constraint_tol: float = 1e-9
    basis: str = "simplified"
    policy: str = DEFAULT_POLICY
    rhs: str = "galerkin"
    u0: float = 0.0
    name: str = "scene"
    out: Path | None = None
    threads: int = 1


def _layer_key(layers):
    return np.inf if layers == GLOBAL else layers


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a decoded scenario and fill defaults."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    error = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if error is not None:
        raise ConfigError(error.message, _pointer(error.absolute_path))

    layers = list(data["oversampling"])
    keys = [_layer_key(x) for x in layers]
    if any(b <= a for a, b in zip(keys, keys[1:])):
        raise ConfigError("layer list must be strictly ascending", "/oversampling")

    Lx, Ly = data["domain"]["Lx"], data["domain"]["Ly"]
    sources = []
    for k, s in enumerate(data["sources"]):
        x0, x1, y0, y1 = s["box"]
        if not (x0 < x1 and y0 < y1):
            raise ConfigError("box must be [x0, x1, y0, y1] with x0 < x1, y0 < y1",
                              f"/sources/{k}/box")
        sources.append((x0, x1, y0, y1, float(s["value"])))
    total = sum(v * max(0.0, min(x1, Lx) - max(x0, 0.0)) * max(0.0, min(y1, Ly) - max(y0, 0.0))
                for x0, x1, y0, y1, v in sources)
    scale = sum(abs(v) * (x1 - x0) * (y1 - y0) for x0, x1, y0, y1, v in sources)
    if abs(total) > 1e-10 * max(scale, 1.0):
        raise ConfigError(f"incompatible source: boxes integrate to {total:.6e}, not 0", "/sources")

    kappa = data["kappa_matrix"]
    if isinstance(kappa, dict):
        path = Path(kappa["file"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        kappa = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)

    transient = None
    if "transient" in data:
        tr = data["transient"]
        transient = {"dt": float(tr["dt"]), "t_end": float(tr["t_end"]),
                     "report_times": [float(t) for t in tr.get("report_times", [tr["t_end"]])]}
    tol = data.get("tolerances", {})
    return ExperimentConfig(
        domain=(float(Lx), float(Ly)),
        fine=(int(data["fine"]["nx"]), int(data["fine"]["ny"])),
        coarse=[(int(c["Nx"]), int(c["Ny"])) for c in data["coarse"]],
        kappa_matrix=kappa,
        fractures=[(tuple(f["p0"]), tuple(f["p1"]), float(f["conductivity"]))
                   for f in data.get("fractures", [])],
        sources=sources,
        oversampling=layers,
        transient=transient,
        solver_tol=float(tol.get("solver", 1e-10)),
        constraint_tol=float(tol.get("constraint", 1e-9)),
        basis=data.get("basis", "simplified"),
        policy=_POLICIES[data.get("boundary_policy", "physical")],
        rhs=data.get("coarse_rhs", "galerkin"),
        name=data.get("name", "scene"),
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return config_from_dict(data, path.parent)


def shipped_config(name: str) -> Path:
    """Path of a scenario file bundled with the package (``benchmark`` or ``toy``)."""
    return Path(__file__).with_name("data") / f"{name}.json"


# --- scene and per-H levels ----------------------------------------------

class Scene:
    """Fine operators and reference solution of one configuration."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        nx, ny = cfg.fine
        self.mesh = build_fine_mesh(nx, ny, *cfg.domain)
        self.network = FractureNetwork(tuple(
            snap_fracture(self.mesh, p0, p1, c, id=k) for k, (p0, p1, c) in enumerate(cfg.fractures)))
        self.kappa = cell_field(self.mesh, cfg.kappa_matrix)
        self.A = assemble_stiffness(self.mesh, self.network, self.kappa)
        self.M = assemble_mass(self.mesh)
        self.g_cells = box_source(self.mesh, cfg.sources)
        self.b = load_vector(self.mesh, self.g_cells)
        self.weights = self.M @ np.ones(self.mesh.n_nodes)
        self.timings: dict[str, float] = {}

    @cached_property
    def u_f(self) -> np.ndarray:
        with _timer(self.timings, "fine_solve"):
            return solve_fine_steady(self.A, self.b, self.weights, self.cfg.solver_tol)

    def fine_transient(self) -> dict:
        tr = self.cfg.transient
        u0 = np.full(self.mesh.n_nodes, self.cfg.u0)
        with _timer(self.timings, "fine_transient"):
            return backward_euler(self.M, self.A, self.b, tr["dt"], tr["t_end"],
                                  tr["report_times"], u0)

    def level(self, Nx: int, Ny: int) -> "Level":
        return Level(self, Nx, Ny)


class Level:
    """Coarse grid, continua and averaging operator for one H."""

    def __init__(self, scene: Scene, Nx: int, Ny: int):
        self.scene = scene
        self.coarse = build_coarse_grid(scene.mesh, Nx, Ny)
        self.continua = enumerate_continua(self.coarse, scene.network)
        self.C = averaging_matrix(self.continua, scene.mesh)
        self.measures = self.C @ np.ones(scene.mesh.n_nodes)
        self._aux = None

    @property
    def tag(self) -> str:
        return f"{self.coarse.Nx}x{self.coarse.Ny}"

    @property
    def H(self) -> float:
        return self.coarse.H

    @property
    def H_label(self) -> str:
        return f"{self.coarse.H:g}"

    def aux_spaces(self):
        if self._aux is None:
            s = self.scene
            self._aux = build_auxiliary_spaces(self.coarse, s.network, s.kappa, self.continua)
        return self._aux

    def bases(self, layers, basis: str | None = None, threads: int | None = None):
        cfg = self.scene.cfg
        basis = basis or cfg.basis
        threads = cfg.threads if threads is None else threads
        if basis == "simplified":
            return build_simplified_bases(self.coarse, self.continua, self.scene.A, self.C,
                                          layers, cfg.policy, cfg.constraint_tol, threads)
        if basis == "spectral":
            return build_cem_bases(self.coarse, self.aux_spaces(), self.scene.A, layers,
                                   policy=cfg.policy, tol=cfg.constraint_tol, threads=threads)
        raise ValueError(f"unknown basis path {basis!r}")

    def system(self, bases, basis: str | None = None) -> CoarseSystem:
        cfg, s = self.scene.cfg, self.scene
        basis = basis or cfg.basis
        if basis == "spectral":
            # eigenmode coefficients have no continuum measure: Galerkin path only
            g = coarse_rhs(s.b, bases, tol=cfg.solver_tol)
            return CoarseSystem.build(bases, s.A, s.M, s.b, np.ones(len(bases)), g, "galerkin")
        g = coarse_rhs(s.b, bases, cfg.rhs, self.continua, self.coarse, s.g_cells, cfg.solver_tol)
        return CoarseSystem.build(bases, s.A, s.M, s.b, self.measures, g)

    def averages(self, bases, u_T) -> np.ndarray:
        """Continuum averages of the downscaled field."""
        return self.C @ (basis_matrix(bases, self.scene.mesh.n_nodes) @ u_T)


@contextmanager
def _timer(store: dict, key: str):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        store[key] = store.get(key, 0.0) + time.perf_counter() - t0


# --- reports ----------------------------------------------------------------

@dataclass
class RunReport:
    """Per-(H, layers) results of a study."""
    steady: list[dict] = field(default_factory=list)
    transient: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    decay: dict[str, list[float]] = field(default_factory=dict)

    def row(self, H: str, layers) -> dict:
        """Steady row for an H label such as ``"0.1"``."""
        for r in self.steady:
            if r["H"] == H and r["layers"] == layers:
                return r
        raise KeyError((H, layers))

    def to_json(self) -> dict:
        return {"steady": self.steady, "transient": self.transient,
                "timings": self.timings, "decay": self.decay}


def _fmt(x) -> str:
    return x if isinstance(x, str) else f"{x:.10e}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] if isinstance(r[h], (str, int)) else _fmt(r[h]) for h in header])


def _decay_ratio(bases, coarse) -> dict:
    """Largest d_L / d_0 per basis kind, with the profile of the worst basis overall."""
    worst = {"matrix": 0.0, "fracture": 0.0}
    worst_all, worst_profile = -1.0, None
    for b in bases:
        d = basis_decay_profile(b, coarse)
        ratio = float(d[-1] / d[0])
        kind = "matrix" if b.local == 0 else "fracture"
        worst[kind] = max(worst[kind], ratio)
        if ratio > worst_all:
            worst_all, worst_profile = ratio, d
    return {"all": worst_all, **worst, "profile": worst_profile}


def _steady_row(level: Level, layers, bases, system: CoarseSystem, report: RunReport,
                out: Path | None, export_fields: bool) -> dict:
    scene, cfg = level.scene, level.scene.cfg
    key = f"{level.tag}:{layers}"
    u_bar = level.C @ scene.u_f
    with _timer(report.timings, f"{key}:coarse_solve"):
        u_T = system.solve_steady(tol=cfg.solver_tol)
    u_ms = basis_matrix(bases, scene.mesh.n_nodes) @ u_T
    row = {"H": level.H_label, "layers": layers}
    row.update(error_report(level.C @ u_ms, u_bar, level.continua.is_matrix, level.measures))
    diff = u_ms - scene.u_f
    row["downscale_l2_pct"] = float(100.0 * np.sqrt((diff @ (scene.M @ diff))
                                                    / (scene.u_f @ (scene.M @ scene.u_f))))
    row["constraint_residual"] = max(b.constraint_residual for b in bases)
    row["conservation_residual"] = system.conservation_residual()
    row["rhs_imbalance"] = system.rhs_imbalance
    if layers == GLOBAL and cfg.basis == "simplified":
        r = system.A_G @ u_bar - system.g
        row["galerkin_residual"] = float(np.linalg.norm(r) / np.linalg.norm(system.g))
    if layers != GLOBAL and int(layers) >= 1 and cfg.basis == "simplified":
        decay = _decay_ratio(bases, level.coarse)
        profile = decay["profile"]
        row["decay_ratio"] = decay["all"]
        row["decay_ratio_matrix"] = decay["matrix"]
        row["decay_ratio_fracture"] = decay["fracture"]
        report.decay[key] = [float(x) for x in profile]
        if out is not None:
            _write_csv(out / f"decay_{level.tag}_L{layers}.csv", ["layer", "max_abs"],
                       [{"layer": k, "max_abs": float(v)} for k, v in enumerate(profile)])
    if out is not None:
        write_triplets(system.T, out / f"T_{level.tag}_L{layers}.txt")
        write_triplets(system.M_T, out / f"MT_{level.tag}_L{layers}.txt")
        write_triplets(system.A_T, out / f"AT_{level.tag}_L{layers}.txt")
        if cfg.basis == "simplified":
            write_coarse_solution(u_T, u_bar, level, out / f"coarse_{level.tag}_L{layers}.csv")
            center = level.coarse.block(level.coarse.Nx // 2, level.coarse.Ny // 2)
            export_transmissibility_map(system.A_T, level, center,
                                        out / f"transmissibility_{level.tag}_L{layers}.csv")
            export_transmissibility_slab(system.A_T, level, center,
                                         out / f"transmissibility_slab_{level.tag}_L{layers}.csv")
        if export_fields:
            export_field(u_ms, scene.mesh, out / f"u_ms_{level.tag}_L{layers}.vtk", "u_ms")
    log.info("%s layers=%s error=%.4g%%", level.tag, layers, row["error_pct"])
    return row


def _transient_rows(level: Level, layers, bases, system: CoarseSystem, fine: dict,
                    report: RunReport) -> list[dict]:
    scene, cfg = level.scene, level.scene.cfg
    tr = cfg.transient
    if cfg.basis == "spectral":
        if cfg.u0 != 0:
            raise ValueError("spectral transient runs need u0 = 0")
        u0 = np.zeros(len(bases))
    else:
        u0 = level.C @ np.full(scene.mesh.n_nodes, cfg.u0)
    with _timer(report.timings, f"{level.tag}:{layers}:transient_solve"):
        coarse = system.solve_transient(tr["dt"], tr["t_end"], tr["report_times"], u0)
    rows = []
    for t_rep in tr["report_times"]:
        u_bar = level.C @ fine[t_rep]
        row = {"H": level.H_label, "layers": layers, "t": t_rep}
        if np.linalg.norm(u_bar) == 0.0:
            row.update(error_pct=0.0, error_matrix_pct=0.0, error_fracture_pct=0.0)
        else:
            row.update(error_report(level.averages(bases, coarse[t_rep]), u_bar,
                                    level.continua.is_matrix, level.measures))
        rows.append(row)
    return rows


STEADY_COLUMNS = ["H", "layers", "error_pct", "error_matrix_pct", "error_fracture_pct"]
TRANSIENT_COLUMNS = ["H", "layers", "t", "error_pct", "error_matrix_pct", "error_fracture_pct"]


def run_study(cfg: ExperimentConfig, scene: Scene | None = None, steady: bool = True,
              transient: bool = False, export_fields: bool = True, inspect=None) -> RunReport:
    """Build each (H, layers) basis set once and run the requested studies on it.

    ``inspect(level, layers, bases, system)`` is called for every run, so
    callers can check properties without keeping all basis sets in memory.
    """
    if transient and cfg.transient is None:
        raise ValueError("config has no transient section")
    scene = scene or Scene(cfg)
    out = cfg.out
    report = RunReport()
    fine = None
    if steady:
        scene.u_f  # noqa: B018  (solve once, timed)
        if out is not None and export_fields:
            export_field(scene.u_f, scene.mesh, out / "u_fine.vtk", "u_fine")
    if transient:
        fine = scene.fine_transient()
    report.timings.update(scene.timings)
    for Nx, Ny in cfg.coarse:
        level = scene.level(Nx, Ny)
        for layers in cfg.oversampling:
            key = f"{level.tag}:{layers}"
            try:
                with _timer(report.timings, f"{key}:basis"):
                    bases = level.bases(layers)
                with _timer(report.timings, f"{key}:assembly"):
                    system = level.system(bases)
                if steady:
                    report.steady.append(
                        _steady_row(level, layers, bases, system, report, out, export_fields))
                if transient:
                    report.transient.extend(
                        _transient_rows(level, layers, bases, system, fine, report))
                if inspect is not None:
                    inspect(level, layers, bases, system)
            except Exception as exc:
                raise RuntimeError(f"run H={level.H_label} layers={layers}: {exc}") from exc
            del bases, system
    if out is not None:
        if steady:
            _write_csv(out / "steady_errors.csv", STEADY_COLUMNS, report.steady)
        if transient:
            _write_csv(out / "transient_errors.csv", TRANSIENT_COLUMNS, report.transient)
    return report


def run_steady_study(cfg: ExperimentConfig, scene: Scene | None = None,
                     export_fields: bool = True) -> RunReport:
    """Error of the upscaled steady solution for every (H, layers) pair."""
    return run_study(cfg, scene, steady=True, export_fields=export_fields)


def run_transient_study(cfg: ExperimentConfig, scene: Scene | None = None) -> RunReport:
    """Backward-Euler errors against the fine transient reference at each report time."""
    return run_study(cfg, scene, steady=False, transient=True)


# --- exports ----------------------------------------------------------------

def export_field(values: np.ndarray, mesh, path, name: str = "u") -> None:
    """Nodal field as a VTK legacy ASCII STRUCTURED_POINTS file."""
    values = np.asarray(values, dtype=float)
    if values.size != mesh.n_nodes:
        raise ValueError(f"field has {values.size} values, mesh has {mesh.n_nodes} nodes")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "# vtk DataFile Version 3.0\n"
        f"{name}\n"
        "ASCII\n"
        "DATASET STRUCTURED_POINTS\n"
        f"DIMENSIONS {mesh.nx + 1} {mesh.ny + 1} 1\n"
        "ORIGIN 0 0 0\n"
        f"SPACING {mesh.h:.17g} {mesh.h:.17g} 1\n"
        f"POINT_DATA {mesh.n_nodes}\n"
        f"SCALARS {name} double 1\n"
        "LOOKUP_TABLE default\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, values, fmt="%.12e")


def write_triplets(K: np.ndarray, path, tol: float = 0.0) -> None:
    """Nonzero entries as ``row col value`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    r, c = np.nonzero(np.abs(K) > tol)
    with open(path, "w") as fh:
        for i, j in zip(r, c):
            fh.write(f"{i} {j} {K[i, j]:.16e}\n")


def write_coarse_solution(u_T, u_bar, level: Level, path) -> None:
    rows = []
    for k in range(level.continua.n):
        b = int(level.continua.block_of[k])
        bx, by = level.coarse.block_ij(b)
        rows.append({"block": b, "bx": int(bx), "by": int(by),
                     "continuum": int(level.continua.local_of[k]),
                     "u_T": float(u_T[k]), "u_bar": float(u_bar[k])})
    _write_csv(Path(path), ["block", "bx", "by", "continuum", "u_T", "u_bar"], rows)


def export_transmissibility_map(A_T: np.ndarray, level: Level, center: int, path,
                                local: int = 0) -> list[dict]:
    """Couplings of one continuum of ``center`` to every continuum, by block offset.

    Values are the average-pressure finite-volume entries; off-diagonal ones
    are the transmissibilities.
    """
    cont, coarse = level.continua, level.coarse
    a = cont.index(center, local)
    cx, cy = coarse.block_ij(center)
    rows = []
    for k in range(cont.n):
        bx, by = coarse.block_ij(int(cont.block_of[k]))
        rows.append({"block_dx": int(bx - cx), "block_dy": int(by - cy),
                     "continuum": int(cont.local_of[k]), "value": float(A_T[a, k])})
    _write_csv(Path(path), ["block_dx", "block_dy", "continuum", "value"], rows)
    return rows


def export_transmissibility_slab(A_T: np.ndarray, level: Level, center: int, path) -> list[dict]:
    """Matrix-to-matrix transmissibility along the row of blocks through ``center``."""
    cont, coarse = level.continua, level.coarse
    a = cont.index(center, 0)
    cx, cy = coarse.block_ij(center)
    rows = [{"block_dx": int(bx - cx), "value": float(A_T[a, cont.index(coarse.block(bx, cy), 0)])}
            for bx in range(coarse.Nx)]
    _write_csv(Path(path), ["block_dx", "value"], rows)
    return rows


# --- CLI ----------------------------------------------------------------------

def _layers_arg(text: str):
    return GLOBAL if text == GLOBAL else int(text)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="scenario JSON file")
    common.add_argument("--out", type=Path, default=None,
                        help="output directory (default: $NLMC_OUT or ./nlmc_out)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--basis", choices=["simplified", "spectral"])
    common.add_argument("--bc-policy", choices=["physical", "dirichlet"])
    common.add_argument("--rhs", choices=["galerkin", "block"])
    common.add_argument("--no-fields", action="store_true", help="skip VTK field exports")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nlmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve-fine", parents=[common], help="fine reference solve")
    bb = sub.add_parser("build-basis", parents=[common], help="build bases and decay profiles")
    bb.add_argument("--layers", type=_layers_arg, required=True)
    sub.add_parser("upscale", parents=[common], help="steady error study")
    sub.add_parser("transient", parents=[common], help="transient error study")
    sub.add_parser("report", parents=[common], help="steady and transient studies")
    return parser


def _configure(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    cfg.out = args.out or Path(os.environ.get("NLMC_OUT", "nlmc_out"))
    cfg.threads = args.threads
    if args.basis:
        cfg.basis = args.basis
    if args.bc_policy:
        cfg.policy = _POLICIES[args.bc_policy]
    if args.rhs:
        cfg.rhs = args.rhs
    return cfg


def _cmd_build_basis(cfg: ExperimentConfig, layers) -> dict:
    scene = Scene(cfg)
    summary = {"layers": layers, "levels": {}}
    for Nx, Ny in cfg.coarse:
        level = scene.level(Nx, Ny)
        t0 = time.perf_counter()
        bases = level.bases(layers)
        entry = {"n_bases": len(bases),
                 "constraint_residual": max(b.constraint_residual for b in bases),
                 "seconds": time.perf_counter() - t0}
        if layers != GLOBAL and cfg.basis == "simplified":
            decay = _decay_ratio(bases, level.coarse)
            profile = decay["profile"]
            entry["decay_ratio"] = decay["all"]
            _write_csv(cfg.out / f"decay_{level.tag}_L{layers}.csv", ["layer", "max_abs"],
                       [{"layer": k, "max_abs": float(v)} for k, v in enumerate(profile)])
        summary["levels"][level.tag] = entry
    return summary


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _configure(args)
        t0 = time.perf_counter()
        if args.command == "solve-fine":
            scene = Scene(cfg)
            export_field(scene.u_f, scene.mesh, cfg.out / "u_fine.vtk", "u_fine")
            result = {"n_nodes": scene.mesh.n_nodes, "timings": scene.timings}
        elif args.command == "build-basis":
            result = _cmd_build_basis(cfg, args.layers)
        elif args.command == "upscale":
            result = run_steady_study(cfg, export_fields=not args.no_fields).to_json()
        elif args.command == "transient":
            result = run_transient_study(cfg).to_json()
        else:
            result = run_study(cfg, transient=cfg.transient is not None,
                               export_fields=not args.no_fields).to_json()
            cfg.out.mkdir(parents=True, exist_ok=True)
            (cfg.out / "report.json").write_text(json.dumps(result, indent=2, default=str))
        result["wall_seconds"] = time.perf_counter() - t0
        print(json.dumps(result, default=str))
        return 0
    except Exception as exc:  # noqa: BLE001  (CLI boundary: report and exit nonzero)
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            payload["pointer"] = exc.pointer
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
