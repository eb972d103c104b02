"""Command-line pipelines: mesh, leadfield, simulate, invert, experiment,
metrics.

Every subcommand reads one INI project file, writes its artifacts plus a
replayable JSON manifest into the output directory, and exits with 0 on
success, 2 on configuration/IO problems, or 3 on runtime/numerical
failures.  All outputs are byte-deterministic for a fixed configuration,
seed and thread count.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io as hio
from .config import load_config
from .errors import (
    ComputationError,
    ConfigError,
    DataError,
    SetupError,
)
from .fem import ElectrodeSet, assemble_A, assemble_cem_system
from .inverse import (
    HyperModel,
    ias_map,
    multires_ias,
    normalize_problem,
    roi_metrics,
)
from .leadfield import (
    adjacent_pair_patterns,
    build_dof_map,
    eeg_leadfield,
    eit_forward,
    eit_leadfield,
)
from .meshgen import SourceSpace, generate_mesh, place_sources, smooth_mesh
from .simulate import NoiseSpec, dipole_signal, perturb_sigma_ball
from .solver import PcgConfig


def _pcg_config(cfg):
    return PcgConfig(tolerance=cfg.solver["tolerance"],
                     max_iterations=cfg.solver["max_iterations"])


def _outdir(cfg, args):
    out = args.output or cfg.output_dir
    out = out if os.path.isabs(out) else os.path.join(cfg.base_dir, out)
    os.makedirs(out, exist_ok=True)
    return out


def _build_mesh(cfg):
    seg = cfg.build_segmentation()
    mesh = generate_mesh(seg, cfg.mesh["resolution"])
    if cfg.mesh["smoothing_iterations"] > 0:
        mesh = smooth_mesh(mesh, cfg.mesh["smoothing_iterations"],
                           cfg.mesh["smoothing_step"])
    return seg, mesh


def _build_electrodes(cfg, mesh):
    if cfg.electrodes["triangles"]:
        return ElectrodeSet(mesh, cfg.electrodes["triangles"],
                            cfg.electrodes["impedances"])
    pos = cfg.electrodes["positions"]
    if len(pos) == 0:
        raise ConfigError(f"{cfg.path}: no electrodes defined")
    return ElectrodeSet.from_centers(mesh, pos, cfg.electrodes["radius"],
                                     cfg.electrodes["impedances"])


def cmd_mesh(cfg, args):
    out = _outdir(cfg, args)
    seg, mesh = _build_mesh(cfg)
    prefix = os.path.join(out, "mesh")
    hio.save_tet_mesh(mesh, prefix)
    outputs = {f"mesh_{part}": hio.sha256_file(f"{prefix}_{part}.dat")
               for part in ("nodes", "tetra", "labels", "sigma")}
    hio.write_manifest(
        os.path.join(out, "mesh_manifest.json"), "mesh", cfg.digest,
        seeds={}, parameters={
            "resolution": cfg.mesh["resolution"],
            "smoothing_iterations": cfg.mesh["smoothing_iterations"],
            "smoothing_step": cfg.mesh["smoothing_step"],
            "n_nodes": mesh.n_nodes,
            "n_elements": mesh.n_elements,
            "compartments": [c.name for c in cfg.compartments],
        }, outputs=outputs)
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_elements} elements -> {prefix}_*.dat")
    return 0


def _leadfield_from_config(cfg, args):
    seg, mesh = _build_mesh(cfg)
    electrodes = _build_electrodes(cfg, mesh)
    pcg = _pcg_config(cfg)
    threads = args.threads
    seeds = {}
    if cfg.modality == "eeg":
        seeds["sources"] = cfg.sources["seed"]
        src = place_sources(mesh, seg, cfg.sources["count"],
                            mode=cfg.sources["mode"],
                            seed=cfg.sources["seed"])
        sys_ = assemble_cem_system(mesh, electrodes, src)
        lf = eeg_leadfield(sys_, pcg, threads=threads)
        extra = {"sources": cfg.sources["count"], "mode": cfg.sources["mode"]}
    else:
        seeds["dofs"] = cfg.eit["seed"]
        comp_ids = [cfg.compartment_index(n) for n in cfg.eit["compartments"]] \
            or [0]
        sys_ = assemble_cem_system(mesh, electrodes)
        dofs = build_dof_map(mesh, comp_ids, cfg.eit["dofs"],
                             seed=cfg.eit["seed"])
        patterns = adjacent_pair_patterns(electrodes.count,
                                          cfg.eit["amplitude"])
        lf = eit_leadfield(sys_, dofs, patterns, pcg, threads=threads)
        extra = {"dofs": cfg.eit["dofs"], "patterns": patterns.shape[1]}
    return seg, mesh, electrodes, sys_, lf, seeds, extra


def cmd_leadfield(cfg, args):
    out = _outdir(cfg, args)
    *_, lf, seeds, extra = _leadfield_from_config(cfg, args)
    path = os.path.join(out, "leadfield.bin")
    hio.save_leadfield(lf, path)
    hio.write_manifest(
        os.path.join(out, "leadfield_manifest.json"), "leadfield", cfg.digest,
        seeds=seeds, parameters={
            "modality": cfg.modality, "rows": lf.matrix.shape[0],
            "cols": lf.matrix.shape[1], **extra,
        }, outputs={"leadfield": hio.sha256_file(path)})
    print(f"leadfield: {lf.matrix.shape[0]} x {lf.matrix.shape[1]} "
          f"({cfg.modality}) -> {path}")
    return 0


def cmd_simulate(cfg, args):
    out = _outdir(cfg, args)
    seed = args.seed if args.seed is not None else cfg.simulation["seed"]
    noise = NoiseSpec(mode=cfg.simulation["noise_mode"],
                      level=cfg.simulation["noise_level"], seed=seed)
    seg, mesh, electrodes, sys_, lf, seeds, _ = _leadfield_from_config(cfg, args)
    seeds["noise"] = seed
    truth = {}
    if cfg.modality == "eeg":
        dipoles = cfg.simulation["dipoles"]
        if not dipoles:
            raise ConfigError(f"{cfg.path}: [simulation] dipoles missing")
        y0, x_true = dipole_signal(lf, dipoles)
        y = y0 + noise.sample(y0)
        n_cols = 1
        truth["dipoles"] = [[*map(float, p), *map(float, o), float(m)]
                            for p, o, m in dipoles]
    else:
        anomaly = cfg.simulation["anomaly"]
        if anomaly is None:
            raise ConfigError(f"{cfg.path}: [simulation] anomaly missing")
        cx, cy, cz, diameter, delta = anomaly
        sigma_p, _ = perturb_sigma_ball(mesh, (cx, cy, cz), diameter, delta)
        mesh_p = mesh.with_sigma(sigma_p)
        sys_p = type(sys_)(mesh=mesh_p, electrodes=electrodes,
                           A=assemble_A(mesh_p, electrodes), B=sys_.B,
                           C=sys_.C, R=sys_.R, ground=sys_.ground)
        patterns = adjacent_pair_patterns(electrodes.count,
                                          cfg.eit["amplitude"])
        y_pert = np.asarray(eit_forward(sys_p, patterns,
                                        _pcg_config(cfg))).T.ravel()
        y = y_pert + noise.sample(y_pert)
        n_cols = patterns.shape[1]
        bg = os.path.join(out, "data_background.csv")
        hio.save_dataset(bg, lf.background_data, electrodes.count)
        truth["anomaly"] = [float(v) for v in anomaly]

    path = os.path.join(out, "data.csv")
    hio.save_dataset(path, y, electrodes.count)
    hio.write_manifest(
        os.path.join(out, "data_manifest.json"), "simulate", cfg.digest,
        seeds=seeds, parameters={
            "modality": cfg.modality, "noise_mode": noise.mode,
            "noise_level": noise.level, "columns": n_cols, "truth": truth,
        }, outputs={"data": hio.sha256_file(path)})
    print(f"data: {len(y)} values -> {path}")
    return 0


def _likelihood_std(inv, y):
    if inv["nu_mode"] == "relative-max":
        return inv["nu"] * np.abs(y).max()
    return inv["nu"] * np.sqrt(np.mean(y**2))


def cmd_invert(cfg, args):
    out = _outdir(cfg, args)
    if not args.data:
        raise ConfigError("invert requires --data")
    lf_path = args.leadfield or os.path.join(out, "leadfield.bin")
    if not os.path.exists(lf_path):
        raise FileNotFoundError(f"lead field not found: {lf_path}")
    if not os.path.exists(args.data):
        raise FileNotFoundError(f"data file not found: {args.data}")
    lf, side = hio.load_leadfield(lf_path)
    y = hio.load_dataset(args.data)
    if lf.modality == "eit":
        if lf.background_data is None:
            raise DataError("EIT lead field carries no background data")
        if y.size != lf.background_data.size:
            raise DataError(
                f"data length {y.size} != lead field rows "
                f"{lf.background_data.size}")
        y = y - lf.background_data
    if y.size != lf.matrix.shape[0]:
        raise DataError(f"data length {y.size} != lead field rows "
                        f"{lf.matrix.shape[0]}")

    inv = cfg.inversion
    seed = args.seed if args.seed is not None else inv["seed"]
    hyper = HyperModel(inv["hypermodel"], beta=inv["beta"],
                       theta0=inv["theta0"])
    if inv["normalize"]:
        L_hat, y_hat, x_scale = normalize_problem(lf.matrix, y)
    else:
        L_hat, y_hat, x_scale = lf.matrix, y, 1.0
    nu = _likelihood_std(inv, y_hat)

    positions = lf.positions
    if inv["method"] == "roi":
        if inv["roi_center"] is None:
            raise ConfigError("[inversion] roi_center required in roi mode")
        comp = 1 if (lf.orientations is not None or lf.modality == "eit") else 3
        in_roi = np.linalg.norm(positions - inv["roi_center"][None, :],
                                axis=1) <= inv["roi_radius"]
        dof_idx = np.flatnonzero(in_roi)
        cols = (np.concatenate([comp * dof_idx + c for c in range(comp)])
                if comp > 1 else dof_idx)
        cols.sort()
        x = ias_map(L_hat, y_hat, hyper, nu=nu, n_iter=inv["iterations"],
                    roi=cols)
    elif inv["method"] == "multires":
        if lf.modality == "eeg" and lf.orientations is None:
            raise DataError("multiresolution mode needs one column per DOF "
                            "(constrained EEG or EIT lead fields)")
        x = multires_ias(L_hat, y_hat, positions, hyper, nu=nu,
                         n_iter=inv["iterations"], n_subsets=inv["subsets"],
                         n_decompositions=inv["decompositions"], seed=seed)
    else:
        x = ias_map(L_hat, y_hat, hyper, nu=nu, n_iter=inv["iterations"])
    x = x * x_scale

    rec_path = os.path.join(out, "reconstruction.csv")
    mode = "constrained" if (lf.orientations is not None
                             or lf.modality == "eit") else "unconstrained"
    hio.save_reconstruction(rec_path, positions, x, mode)
    outputs = {"reconstruction": hio.sha256_file(rec_path)}

    metrics = None
    if cfg.truth and "position" in cfg.truth:
        metrics = _truth_metrics(cfg, lf, x, mode)
        hio.write_json(os.path.join(out, "metrics.json"), metrics)
        outputs["metrics"] = hio.sha256_file(os.path.join(out, "metrics.json"))

    hio.write_manifest(
        os.path.join(out, "reconstruction_manifest.json"), "invert",
        cfg.digest, seeds={"inversion": seed},
        parameters={"method": inv["method"], "hypermodel": hyper.family,
                    "beta": hyper.beta, "theta0": hyper.theta0,
                    "nu": nu, "nu_mode": inv["nu_mode"],
                    "iterations": inv["iterations"],
                    "normalize": inv["normalize"],
                    "argmax_dof": int(np.argmax(np.abs(x)))},
        outputs=outputs)
    print(f"reconstruction: {x.size} values -> {rec_path} "
          f"(argmax DOF {int(np.argmax(np.abs(x)))})")
    if metrics:
        print(f"metrics: position_error_mm={metrics['position_error_mm']:.3f}")
    return 0


def _truth_metrics(cfg, lf, x, mode):
    truth_pos = cfg.truth["position"]
    roi_radius = cfg.truth["roi_radius"]
    if lf.modality == "eit" or "orientation" not in cfg.truth:
        from .experiments import reconstruction_center_of_mass
        in_roi = np.linalg.norm(lf.positions - truth_pos[None, :],
                                axis=1) <= roi_radius
        pick = in_roi if in_roi.any() else slice(None)
        com = reconstruction_center_of_mass(x[pick], lf.positions[pick])
        return {"position_error_mm": 1e3 * float(np.linalg.norm(com - truth_pos)),
                "angle_error_deg": None}
    space = SourceSpace(positions=lf.positions, orientations=lf.orientations,
                        element_ids=np.zeros(len(lf.positions), dtype=int),
                        mode=mode)
    pos_err, ang_err = roi_metrics(x, space, truth_pos, roi_radius,
                                   (truth_pos, cfg.truth["orientation"]))
    return {"position_error_mm": pos_err, "angle_error_deg": ang_err}


def cmd_experiment(cfg, args):
    from . import experiments as ex

    out = _outdir(cfg, args)
    master = args.seed if args.seed is not None else cfg.experiment["master_seed"]
    if args.name == "eeg-hypermodel":
        params = ex.EegHypermodelParams(master_seed=master)
        if cfg.experiment["realizations"] is not None:
            params.realizations = cfg.experiment["realizations"]
        for key, attr in (("resolution", "resolution"),
                          ("electrodes", "n_electrodes"),
                          ("sources", "n_sources"),
                          ("iterations", "n_iter")):
            if cfg.experiment[key] is not None:
                setattr(params, attr, cfg.experiment[key])
        rows, summary, _ = ex.eeg_hypermodel_experiment(params)
        header = ["case", "hypermodel", "theta0", "source", "realization",
                  "position_error_mm", "angle_error_deg"]
        hio.write_csv(os.path.join(out, "hypermodel_realizations.csv"), header,
                      [[r[k] for k in header] for r in rows])
        sh = list(summary[0].keys())
        hio.write_csv(os.path.join(out, "hypermodel_summary.csv"), sh,
                      [[s[k] for k in sh] for s in summary])
        outputs = {n: hio.sha256_file(os.path.join(out, n)) for n in
                   ("hypermodel_realizations.csv", "hypermodel_summary.csv")}
        parameters = {"name": args.name, "realizations": params.realizations,
                      "cases": [list(c) for c in params.cases]}
    elif args.name == "eit-hemorrhage":
        params = ex.EitHemorrhageParams(master_seed=master)
        if cfg.experiment["n_seeds"] is not None:
            params.n_seeds = cfg.experiment["n_seeds"]
        for key, attr in (("resolution", "resolution"),
                          ("electrodes", "n_electrodes"),
                          ("dofs", "n_dofs"),
                          ("iterations", "n_iter")):
            if cfg.experiment[key] is not None:
                setattr(params, attr, cfg.experiment[key])
        rows, first, ctx = ex.eit_hemorrhage_experiment(params)
        header = ["seed", "com_x", "com_y", "com_z", "com_error_mm",
                  "within_radius"]
        hio.write_csv(os.path.join(out, "hemorrhage_seeds.csv"), header,
                      [[r[k] for k in header] for r in rows])
        hits = sum(r["within_radius"] for r in rows)
        hio.write_csv(os.path.join(out, "hemorrhage_summary.csv"),
                      ["n_seeds", "hits", "median_error_mm"],
                      [[params.n_seeds, hits,
                        float(np.median([r["com_error_mm"] for r in rows]))]])
        centers = ctx["dofs"].centers
        hio.save_reconstruction(os.path.join(out, "reconstruction_averaged.csv"),
                                centers, first["averaged"], "constrained")
        hio.save_reconstruction(
            os.path.join(out, "reconstruction_unaveraged.csv"),
            centers, first["unaveraged"], "constrained")
        outputs = {n: hio.sha256_file(os.path.join(out, n)) for n in
                   ("hemorrhage_seeds.csv", "hemorrhage_summary.csv",
                    "reconstruction_averaged.csv",
                    "reconstruction_unaveraged.csv")}
        parameters = {"name": args.name, "n_seeds": params.n_seeds,
                      "subsets": params.n_subsets,
                      "decompositions": params.n_decompositions}
    else:
        raise ConfigError(f"unknown experiment '{args.name}'")

    hio.write_manifest(os.path.join(out, "experiment_manifest.json"),
                       "experiment", cfg.digest, seeds={"master": master},
                       parameters=parameters, outputs=outputs)
    print(f"experiment {args.name}: artifacts in {out}")
    return 0


def cmd_metrics(cfg, args):
    out = _outdir(cfg, args)
    if not args.reconstruction:
        raise ConfigError("metrics requires --reconstruction")
    if cfg.truth is None or "position" not in cfg.truth:
        raise ConfigError("metrics requires a [truth] section with a position")
    import csv as _csv

    with open(args.reconstruction, newline="") as fh:
        r = _csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    arr = np.array(rows)
    positions = arr[:, 1:4]
    values = arr[:, 4:]
    truth_pos = cfg.truth["position"]
    roi_radius = cfg.truth["roi_radius"]
    in_roi = np.linalg.norm(positions - truth_pos[None, :],
                            axis=1) <= roi_radius
    pick = in_roi if in_roi.any() else np.ones(len(positions), dtype=bool)
    amp = np.linalg.norm(values, axis=1)
    from .experiments import reconstruction_center_of_mass
    com = reconstruction_center_of_mass(amp[pick], positions[pick])
    metrics = {"position_error_mm":
               1e3 * float(np.linalg.norm(com - truth_pos)),
               "angle_error_deg": None}
    if values.shape[1] == 3 and "orientation" in cfg.truth:
        mean_vec = values[pick].sum(axis=0)
        t = cfg.truth["orientation"]
        denom = np.linalg.norm(mean_vec) * np.linalg.norm(t)
        if denom > 0:
            cosang = np.clip(mean_vec @ t / denom, -1.0, 1.0)
            metrics["angle_error_deg"] = float(np.degrees(np.arccos(cosang)))
    hio.write_json(os.path.join(out, "metrics.json"), metrics)
    print(f"metrics: position_error_mm={metrics['position_error_mm']:.3f}")
    return 0


_COMMANDS = {
    "mesh": cmd_mesh,
    "leadfield": cmd_leadfield,
    "simulate": cmd_simulate,
    "invert": cmd_invert,
    "experiment": cmd_experiment,
    "metrics": cmd_metrics,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="headfem",
        description="FEM forward and inverse pipelines for EEG/EIT head imaging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        if name == "experiment":
            p.add_argument("name", choices=["eeg-hypermodel", "eit-hemorrhage"])
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--output", default=None)
        if name == "invert":
            p.add_argument("--data", default=None)
            p.add_argument("--leadfield", default=None)
        if name == "metrics":
            p.add_argument("--reconstruction", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except (SetupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ComputationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
