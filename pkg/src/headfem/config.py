"""Project configuration: a single INI file drives every pipeline.

Compartments are declared in ``[compartment:<name>]`` sections whose file
order runs innermost to outermost.  Unknown sections or keys are hard
errors reported with their line number, so a configuration that parses is
fully understood.  The canonical JSON form of the parsed configuration is
hashed into every artifact manifest.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import (
    DEFAULT_CONDUCTIVITY,
    Compartment,
    Segmentation,
    load_surface_mesh,
    load_surface_mesh_asc,
)
from .io import canonical_json, sha256_text

_KNOWN_KEYS = {
    "project": {"name", "unit_scale"},
    "compartment": {"surfaces", "conductivity", "priority", "active"},
    "mesh": {"resolution", "smoothing_iterations", "smoothing_step"},
    "electrodes": {"positions", "radius", "impedance", "triangles"},
    "sources": {"count", "mode", "seed"},
    "eit": {"dofs", "seed", "compartments", "amplitude"},
    "modality": {"type"},
    "solver": {"tolerance", "max_iterations"},
    "inversion": {"method", "hypermodel", "beta", "theta0", "nu_mode", "nu",
                  "iterations", "subsets", "decompositions", "seed",
                  "normalize", "roi_center", "roi_radius"},
    "simulation": {"noise_mode", "noise_level", "seed", "dipoles", "anomaly"},
    "truth": {"position", "orientation", "roi_radius"},
    "experiment": {"realizations", "n_seeds", "master_seed", "resolution",
                   "electrodes", "sources", "dofs", "iterations"},
    "output": {"dir"},
}

_REQUIRED_SECTIONS = ("mesh", "electrodes", "modality", "output")


def _find_line(path, needle):
    try:
        with open(path) as fh:
            for no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if stripped.startswith(needle):
                    return no
    except OSError:
        pass
    return None


@dataclass
class CompartmentSpec:
    name: str
    surfaces: list
    conductivity: object
    priority: int
    active: bool


@dataclass
class ProjectConfig:
    """Parsed and validated project configuration."""

    path: str
    base_dir: str
    raw: dict
    unit_scale: float
    compartments: list
    mesh: dict
    electrodes: dict
    sources: dict
    eit: dict
    modality: str
    solver: dict
    inversion: dict
    simulation: dict
    truth: dict | None
    experiment: dict
    output_dir: str

    @property
    def digest(self):
        return sha256_text(canonical_json(self.raw))

    def build_segmentation(self):
        comps = []
        for spec in self.compartments:
            surfaces = []
            for entry in spec.surfaces:
                paths = [os.path.join(self.base_dir, p) for p in entry]
                for p in paths:
                    if not os.path.exists(p):
                        raise FileNotFoundError(
                            f"surface file not found: {p}")
                if len(paths) == 1:
                    surfaces.append(load_surface_mesh_asc(
                        paths[0], name=spec.name, scale=self.unit_scale))
                else:
                    surfaces.append(load_surface_mesh(
                        paths[0], paths[1], name=spec.name,
                        scale=self.unit_scale))
            comps.append(Compartment(surfaces, spec.conductivity,
                                     priority=spec.priority,
                                     active=spec.active, name=spec.name))
        if not comps:
            raise ConfigError(f"{self.path}: no [compartment:*] sections")
        return Segmentation(comps)

    def compartment_index(self, name):
        for k, spec in enumerate(self.compartments):
            if spec.name == name:
                return k
        raise ConfigError(f"unknown compartment '{name}'")


def _parse_floats(text, n=None, what="value"):
    toks = text.replace(",", " ").split()
    try:
        vals = [float(t) for t in toks]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what}: {text!r}: {exc}")
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what} needs {n} numbers, got {len(vals)}: {text!r}")
    return vals


def _parse_bool(text, what):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{what} must be a boolean, got {text!r}")


def load_config(path):
    """Parse and validate an INI project file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}")

    raw = {}
    compartments = []
    for section in parser.sections():
        base = section.split(":", 1)[0].strip().lower()
        if base not in _KNOWN_KEYS:
            line = _find_line(path, f"[{section}]")
            raise ConfigError(
                f"{path}:{line}: unknown section [{section}]")
        known = _KNOWN_KEYS[base]
        sec = {}
        for key, value in parser.items(section):
            if key not in known:
                line = _find_line(path, key)
                raise ConfigError(
                    f"{path}:{line}: unknown key '{key}' in [{section}]")
            sec[key] = value
        raw[section] = sec
        if base == "compartment":
            name = section.split(":", 1)[1].strip() if ":" in section else section
            compartments.append(_compartment_spec(name, sec, path))

    for required in _REQUIRED_SECTIONS:
        if required not in raw:
            raise ConfigError(f"{path}: missing required section [{required}]")

    project = raw.get("project", {})
    mesh = _mesh_options(raw["mesh"])
    modality = raw["modality"].get("type", "eeg").strip().lower()
    if modality not in ("eeg", "eit"):
        raise ConfigError(f"{path}: modality must be eeg or eit, got '{modality}'")

    cfg = ProjectConfig(
        path=str(path),
        base_dir=os.path.dirname(os.path.abspath(path)),
        raw=raw,
        unit_scale=float(project.get("unit_scale", 1.0)),
        compartments=compartments,
        mesh=mesh,
        electrodes=_electrode_options(raw["electrodes"]),
        sources=_source_options(raw.get("sources", {})),
        eit=_eit_options(raw.get("eit", {})),
        modality=modality,
        solver=_solver_options(raw.get("solver", {})),
        inversion=_inversion_options(raw.get("inversion", {})),
        simulation=_simulation_options(raw.get("simulation", {})),
        truth=_truth_options(raw.get("truth")),
        experiment=_experiment_options(raw.get("experiment", {})),
        output_dir=raw["output"].get("dir", "out"),
    )
    return cfg


def _compartment_spec(name, sec, path):
    if "surfaces" not in sec:
        raise ConfigError(f"{path}: compartment '{name}' needs a surfaces key")
    surfaces = []
    for line in sec["surfaces"].strip().splitlines():
        entry = line.replace(";", " ").split()
        if len(entry) not in (1, 2):
            raise ConfigError(
                f"{path}: surface entry must be 'nodes tris' or 'file.asc', "
                f"got {line!r}")
        surfaces.append(entry)
    cond_text = sec.get("conductivity", "0.33").strip()
    if cond_text.lower() in DEFAULT_CONDUCTIVITY:
        conductivity = DEFAULT_CONDUCTIVITY[cond_text.lower()]
    else:
        cond_vals = _parse_floats(cond_text, what=f"conductivity of '{name}'")
        if len(cond_vals) == 1:
            conductivity = cond_vals[0]
        elif len(cond_vals) == 6:
            conductivity = np.array(cond_vals)
        else:
            raise ConfigError(
                f"{path}: conductivity of '{name}' must be a scalar, a "
                f"6-entry tensor row, or one of "
                f"{sorted(DEFAULT_CONDUCTIVITY)}")
    return CompartmentSpec(
        name=name,
        surfaces=surfaces,
        conductivity=conductivity,
        priority=int(sec.get("priority", 0)),
        active=_parse_bool(sec.get("active", "false"), f"active of '{name}'"),
    )


def _mesh_options(sec):
    return {
        "resolution": float(sec.get("resolution", 0.01)),
        "smoothing_iterations": int(sec.get("smoothing_iterations", 0)),
        "smoothing_step": float(sec.get("smoothing_step", 0.3)),
    }


def _electrode_options(sec):
    positions = []
    impedances = []
    default_z = float(sec.get("impedance", 1000.0))
    for line in sec.get("positions", "").strip().splitlines():
        vals = _parse_floats(line, what="electrode position")
        if len(vals) == 3:
            positions.append(vals)
            impedances.append(default_z)
        elif len(vals) == 4:
            positions.append(vals[:3])
            impedances.append(vals[3])
        else:
            raise ConfigError(
                f"electrode line must be 'x y z' or 'x y z impedance', "
                f"got {line!r}")
    # Explicit coverage: one electrode per line, one-based boundary-triangle
    # indices (alternative to center/radius placement).
    triangles = []
    for line in sec.get("triangles", "").strip().splitlines():
        try:
            ids = [int(t) - 1 for t in line.split()]
        except ValueError as exc:
            raise ConfigError(f"electrode triangle list {line!r}: {exc}")
        triangles.append(np.array(ids, dtype=np.int64))
    if triangles and positions:
        raise ConfigError(
            "electrodes: give either positions or triangles, not both")
    return {
        "positions": np.array(positions) if positions else np.zeros((0, 3)),
        "impedances": np.array(impedances) if impedances
            else np.full(len(triangles), default_z),
        "triangles": triangles,
        "radius": float(sec.get("radius", 0.01)),
    }


def _source_options(sec):
    mode = sec.get("mode", "unconstrained").strip().lower()
    if mode not in ("constrained", "unconstrained"):
        raise ConfigError(f"source mode must be constrained or unconstrained, "
                          f"got '{mode}'")
    return {
        "count": int(sec.get("count", 100)),
        "mode": mode,
        "seed": int(sec.get("seed", 0)),
    }


def _eit_options(sec):
    return {
        "dofs": int(sec.get("dofs", 200)),
        "seed": int(sec.get("seed", 0)),
        "compartments": sec.get("compartments", "").split(),
        "amplitude": float(sec.get("amplitude", 1.0)),
    }


def _solver_options(sec):
    max_it = sec.get("max_iterations", "").strip()
    return {
        "tolerance": float(sec.get("tolerance", 1e-8)),
        "max_iterations": int(max_it) if max_it else None,
    }


def _inversion_options(sec):
    method = sec.get("method", "map").strip().lower()
    if method not in ("map", "roi", "multires"):
        raise ConfigError(f"inversion method must be map, roi or multires, "
                          f"got '{method}'")
    nu_mode = sec.get("nu_mode", "relative-max").strip().lower()
    if nu_mode not in ("relative-max", "rms"):
        raise ConfigError(f"nu_mode must be relative-max or rms, got '{nu_mode}'")
    roi_center = sec.get("roi_center", "").strip()
    return {
        "method": method,
        "hypermodel": sec.get("hypermodel", "IG").strip().upper(),
        "beta": float(sec.get("beta", 1.5)),
        "theta0": float(sec.get("theta0", 1e-3)),
        "nu_mode": nu_mode,
        "nu": float(sec.get("nu", 0.03)),
        "iterations": int(sec.get("iterations", 2)),
        "subsets": int(sec.get("subsets", 100)),
        "decompositions": int(sec.get("decompositions", 20)),
        "seed": int(sec.get("seed", 0)),
        "normalize": _parse_bool(sec.get("normalize", "true"), "normalize"),
        "roi_center": np.array(_parse_floats(roi_center, 3, "roi_center"))
            if roi_center else None,
        "roi_radius": float(sec.get("roi_radius", 0.015)),
    }


def _simulation_options(sec):
    noise_mode = sec.get("noise_mode", "relative-max").strip().lower()
    dipoles = []
    for line in sec.get("dipoles", "").strip().splitlines():
        vals = _parse_floats(line, 7, "dipole")
        dipoles.append((np.array(vals[:3]), np.array(vals[3:6]), vals[6]))
    anomaly = sec.get("anomaly", "").strip()
    return {
        "noise_mode": noise_mode,
        "noise_level": float(sec.get("noise_level", 0.02)),
        "seed": int(sec.get("seed", 0)),
        "dipoles": dipoles,
        "anomaly": _parse_floats(anomaly, 5, "anomaly") if anomaly else None,
    }


def _truth_options(sec):
    if sec is None:
        return None
    out = {}
    if "position" in sec:
        out["position"] = np.array(_parse_floats(sec["position"], 3, "position"))
    if "orientation" in sec:
        out["orientation"] = np.array(
            _parse_floats(sec["orientation"], 3, "orientation"))
    out["roi_radius"] = float(sec.get("roi_radius", 0.015))
    return out


def _experiment_options(sec):
    return {
        "realizations": int(sec["realizations"]) if "realizations" in sec else None,
        "n_seeds": int(sec["n_seeds"]) if "n_seeds" in sec else None,
        "master_seed": int(sec.get("master_seed", 0)),
        "resolution": float(sec["resolution"]) if "resolution" in sec else None,
        "electrodes": int(sec["electrodes"]) if "electrodes" in sec else None,
        "sources": int(sec["sources"]) if "sources" in sec else None,
        "dofs": int(sec["dofs"]) if "dofs" in sec else None,
        "iterations": int(sec["iterations"]) if "iterations" in sec else None,
    }
