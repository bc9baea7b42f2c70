"""Pipeline stages shared by the CLI subcommands and ``minsurf run``."""
from __future__ import annotations

import logging
import os

import numpy as np

from . import config as cfgmod
from .errors import MinsurfError
from .fields import GaussianBump
from .geometry import GraphFunction, TensorPerturbation
from .inversion import (build_family, forward_pass, make_unknown_basis, measure_family,
                        normal_operator_stats, reconstruct_conformal, relative_error,
                        stability_exponent)
from .io import (Manifest, content_hash, read_json, write_boundary_csv, write_field, write_json)
from .runge import DirichletBasis, candidate_pool, select_embedding_basis
from .solver import (assemble_stability, boundary_clearance, dirichlet_spectrum, make_admissible,
                     solve_mse)
from .transform import (MeasurementTensor, ZSampler, fd_consistency, linearize_DF, measure_F,
                        transform_R)

log = logging.getLogger(__name__)


class StageError(MinsurfError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


def scene_record(cfg):
    grid = cfgmod.grid_from(cfg)
    g = cfgmod.metric_from(cfg)
    rec = {"grid": grid.to_dict(), "metric": g.to_dict(), "region": cfgmod.region_from(cfg),
           "metric_provenance": g.provenance}
    rec["sha256"] = content_hash(rec)
    return rec


def admissible_grid(cfg):
    grid = cfgmod.grid_from(cfg)
    g = cfgmod.metric_from(cfg)
    a = cfg["admissibility"]
    grid, hist = make_admissible(grid, g, a["margin"], a["shrink_factor"], cfgmod.region_from(cfg),
                                 a["track"], a["max_steps"], return_history=True)
    return grid, g, hist


def select_basis(cfg, grid, g):
    b = cfg["basis"]
    seed = cfg["seed"] if b["seed"] is None else b["seed"]
    pool = candidate_pool(grid, seed, b["pool_size"])
    return select_embedding_basis(pool, GraphFunction.zeros(grid), g,
                                  delta=b["delta_fraction"] * grid.tube_half_width,
                                  margin=cfg["admissibility"]["margin"],
                                  separation_factor=b["separation_factor"], seed=seed,
                                  pair_limit=b["exhaustive_separation_nodes"])


def load_basis(path, g):
    return DirichletBasis.from_dict(read_json(path), g)


def boundary_from(cfg, basis):
    z = cfg["boundary"]["z"]
    if z is None:
        z = np.zeros(basis.N)
        z[0] = 0.5
    z = np.asarray(z, float)
    if z.shape != (basis.N,):
        raise MinsurfError(f"boundary.z needs {basis.N} entries")
    return z, basis.data(z)


def sampler_from(cfg, N):
    s = cfg["sampling"]
    P = cfg["unknown"]["per_axis"] ** (cfg["scene"]["n"] + 1)
    count = s["count"] or int(np.ceil(s["oversampling"] * P))
    seed = cfg["seed"] if s["seed"] is None else s["seed"]
    return ZSampler(N, count, seed, s["include_origin"])


def perturbation_from(cfg):
    p = cfg["perturbation"]
    return TensorPerturbation(beta=GaussianBump(tuple(p["center"]), p["amplitude"], p["width"]))


def measurement_files(tensor: MeasurementTensor, out_csv):
    tensor.to_csv(out_csv)
    meta = dict(tensor.metadata)
    meta["values_sha256"] = tensor.digest()
    write_json(out_csv + ".json", meta)


def family_record(cfg, fam, unknown):
    rec = {"config": cfgmod.family_from(cfg), "unknown": cfg["unknown"],
           "n_unknowns": unknown.P, "family": fam.to_dict()}
    rec["sha256"] = content_hash(rec["family"])
    return rec


def family_from_record(rec):
    fam = build_family(rec["config"], rec["n_unknowns"])
    if content_hash(fam.to_dict()) != rec["sha256"]:
        raise MinsurfError("rebuilt surface family does not match the recorded hash")
    u = rec["unknown"]
    return fam, make_unknown_basis(fam.region, u["per_axis"], u["width_factor"], u["margin"])


def build_inverse_setup(cfg):
    u = cfg["unknown"]
    P = u["per_axis"] ** (cfg["scene"]["n"] + 1)
    fam = build_family(cfgmod.family_from(cfg), P)
    unknown = make_unknown_basis(fam.region, u["per_axis"], u["width_factor"], u["margin"])
    return fam, unknown


def truth_coeffs(cfg, unknown):
    inv = cfg["inversion"]
    idx = inv["truth_index"]
    if idx is None:
        # centre bump shifted one lattice step along the first axis
        idx = unknown.P // 2 + cfg["unknown"]["per_axis"] ** 2 if unknown.P > 1 else 0
        idx = min(idx, unknown.P - 1)
    c = np.zeros(unknown.P)
    c[idx] = inv["truth_amplitude"]
    return c


def family_measurements(fam, values, meta):
    return MeasurementTensor([np.asarray(v) for v in values], [s.sampler.samples for s in fam.surfaces],
                             meta)


def alpha_grid(unknown, coeffs, per_axis=33):
    c = np.asarray(unknown.region["center"], float)
    R = float(unknown.region["radius"])
    axes = [np.linspace(ci - R, ci + R, per_axis) for ci in c]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = unknown.values(coeffs, pts)
    return vals, [[ci - R, ci + R] for ci in c]


def reconstruct_report(cfg, fam, unknown, data, truth=None, solver=None):
    inv = cfg["inversion"]
    solver = solver or cfgmod.solver_from(cfg)
    gn = {k: inv[k] for k in ("max_iter", "tol_gn", "lam_rel", "min_step", "alpha_min")}
    rec = reconstruct_conformal(fam, data, unknown, gn, solver)
    out = rec.to_dict()
    out["sigma_min"] = rec.sigma["sigma_min"] if rec.sigma else None
    out["singular_values"] = rec.sigma["singular_values"] if rec.sigma else []
    out["iterations"] = len(rec.history)
    if truth is not None:
        out["truth"] = np.asarray(truth).tolist()
        out["relative_error"] = relative_error(unknown, rec.coeffs, truth)
    return rec, out


def run_pipeline(cfg, workdir, manifest: Manifest | None = None):
    """Run the configured stages, writing outputs into ``workdir``; returns the manifest."""
    os.makedirs(workdir, exist_ok=True)
    man = manifest or Manifest(cfg, workdir)
    man.seed("seed", cfg["seed"])
    stages = cfg["stages"]
    state = {}
    report = {"stages": list(stages)}
    solver = cfgmod.solver_from(cfg)

    def path(name):
        return os.path.join(workdir, name)

    def stage(name, fn):
        man.start(name)
        try:
            fn()
        except MinsurfError as exc:
            raise StageError(name, exc) from exc
        except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
            raise StageError(name, exc) from exc
        man.finish(name)

    def need_grid():
        if "grid" not in state:
            state["grid"], state["g"] = cfgmod.grid_from(cfg), cfgmod.metric_from(cfg)
        return state["grid"], state["g"]

    def need_basis():
        if "basis" not in state:
            grid, g = need_grid()
            state["basis"] = select_basis(cfg, grid, g)
        return state["basis"]

    def s_scene():
        rec = scene_record(cfg)
        write_json(path("scene.json"), rec)
        man.bind("scene", rec["sha256"])
        man.output("scene.json")

    def s_admissibility():
        grid, g, hist = admissible_grid(cfg)
        state["grid"], state["g"] = grid, g
        rec = {"grid": grid.to_dict(), "history": hist,
               "clearance": boundary_clearance(grid, cfgmod.region_from(cfg))}
        write_json(path("admissibility.json"), rec)
        report["admissibility"] = {"steps": len(hist) - 1, "margin": hist[-1]["margin"]}
        man.output("admissibility.json")

    def s_basis():
        b = need_basis()
        write_json(path("basis.json"), b.to_dict())
        man.bind("basis", b.digest())
        man.seed("basis", cfg["seed"] if cfg["basis"]["seed"] is None else cfg["basis"]["seed"])
        report["basis"] = b.report.to_dict()
        man.output("basis.json")

    def s_solve():
        grid, g = need_grid()
        b = need_basis()
        z, f = boundary_from(cfg, b)
        write_boundary_csv(path("bc.csv"), grid.boundary_ids, f)
        rep = solve_mse(f, g, grid, config=solver)
        write_field(path("u.bin"), rep.u.values, [[c - e, c + e] for c, e in zip(grid.center, grid.base_extent)])
        report["solve"] = {k: v for k, v in rep.to_dict().items()}
        report["solve"]["z"] = z.tolist()
        man.output("bc.csv")
        man.output("u.bin")

    def s_measure():
        grid, g = need_grid()
        b = need_basis()
        smp = sampler_from(cfg, b.N)
        man.seed("sampler", smp.seed)
        F = measure_F(g, b, smp, solver)
        measurement_files(F, path("measurements.csv"))
        report["measure"] = {"samples": smp.count, "values_sha256": F.digest()}
        man.output("measurements.csv")

    def s_linearize():
        grid, g = need_grid()
        b = need_basis()
        smp = sampler_from(cfg, b.N)
        H = perturbation_from(cfg)
        dF = linearize_DF(g, H, b, smp, solver)
        R = transform_R(H.beta, b, smp, g, solver)
        fd = fd_consistency(g, H, b, smp, config=solver)
        rec = {"DF": dF.tolist(), "R": R.tolist(), "fd": fd.to_dict()}
        write_json(path("linearize.json"), rec)
        report["linearize"] = {"fd_slope": fd.slope, "fd_reliable": fd.reliable}
        man.output("linearize.json")

    def s_spectrum():
        grid, g = need_grid()
        op = assemble_stability(GraphFunction.zeros(grid), g)
        lam = dirichlet_spectrum(op, cfg["spectrum"]["k"])
        write_json(path("spectrum.json"), {"spectrum": lam.tolist(), "grid": grid.to_dict()})
        report["spectrum"] = lam.tolist()
        man.output("spectrum.json")

    def s_invert():
        fam, unknown = build_inverse_setup(cfg)
        state["inverse"] = (fam, unknown)
        frec = family_record(cfg, fam, unknown)
        write_json(path("family.json"), frec)
        man.bind("family", frec["sha256"])
        truth = truth_coeffs(cfg, unknown)
        data = measure_family(fam, unknown.field(truth), solver)
        os.makedirs(path("data"), exist_ok=True)
        measurement_files(family_measurements(fam, data, {"family_sha256": frec["sha256"],
                                                          "truth": truth.tolist()}),
                          path(os.path.join("data", "measurements.csv")))
        rec, out = reconstruct_report(cfg, fam, unknown, data, truth, solver)
        vals, ext = alpha_grid(unknown, rec.coeffs)
        write_field(path("alpha.bin"), vals, ext)
        write_json(path("reconstruction.json"), out)
        report["invert"] = {"relative_error": out["relative_error"], "iterations": out["iterations"],
                            "sigma_min": out["sigma_min"], "converged": out["converged"]}
        for f in ("family.json", os.path.join("data", "measurements.csv"), "alpha.bin",
                  "reconstruction.json"):
            man.output(f)

    def s_sweep():
        fam, unknown = state.get("inverse") or build_inverse_setup(cfg)
        state["inverse"] = (fam, unknown)
        profile = truth_coeffs(cfg, unknown) / max(cfg["inversion"]["truth_amplitude"], 1e-300)
        res = stability_exponent(fam, unknown, profile, cfg["sweep"]["amplitudes"], solver)
        write_json(path("sweep.json"), res)
        report["sweep"] = {"mu_hat": res["mu_hat"], "data_vs_amplitude_slope": res["data_vs_amplitude_slope"]}
        man.output("sweep.json")

    table = {"scene": s_scene, "admissibility": s_admissibility, "basis": s_basis, "solve": s_solve,
             "measure": s_measure, "linearize": s_linearize, "spectrum": s_spectrum,
             "invert": s_invert, "sweep": s_sweep}
    for name in stages:
        stage(name, table[name])

    write_json(path("report.json"), report)
    man.output("report.json")
    from .plotting import export_plot_data
    exports = [("spectrum.json", "spectrum"), ("reconstruction.json", "convergence"),
               ("sweep.json", "sweep")]
    for src, kind in exports:
        if os.path.exists(path(src)) and src in man.data["outputs"]:
            csv_path, png_path = export_plot_data(path(src), kind, workdir)
            man.output(os.path.basename(csv_path))
            man.output(os.path.basename(png_path))
    man.write(path("manifest.json"))
    return man
