"""``minsurf`` command line.

Exit status: 0 on success, 2 for configuration/schema errors, 1 when a
stage fails (the stage is named on stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import pipeline as pl
from .errors import ConfigError, MinsurfError
from .geometry import GraphFunction
from .io import Manifest, read_boundary_csv, read_json, write_field, write_json
from .transform import (ExplicitSamples, MeasurementTensor, ZSampler, linearize_DF, measure_F,
                        transform_R)

log = logging.getLogger("minsurf")


def _p(args, name):
    return os.path.join(args.workdir, name)


def _scene(args):
    cfg = cfgmod.load(_p(args, args.scene))
    return cfg, cfgmod.grid_from(cfg), cfgmod.metric_from(cfg)


def _sampler(args, cfg, basis):
    z = args.zsamples
    if z is not None and not z.isdigit():
        raw = np.genfromtxt(_p(args, z), delimiter=",", skip_header=1, ndmin=2)
        return None, raw
    smp = pl.sampler_from(cfg, basis.N)
    if z is not None:
        smp = ZSampler(basis.N, int(z), smp.seed, smp.include_origin)
    return smp, smp.samples


def _basis_and_sampler(args, cfg, g):
    basis = pl.load_basis(_p(args, args.basis), g)
    smp, z = _sampler(args, cfg, basis)
    return basis, (smp if smp is not None else ExplicitSamples(z))


def cmd_solve(args):
    cfg, grid, g = _scene(args)
    _, f = read_boundary_csv(_p(args, args.bc), grid)
    rep = pl.solve_mse(f, g, grid, config=cfgmod.solver_from(cfg))
    write_field(_p(args, args.out), rep.u.values,
                [[c - e, c + e] for c, e in zip(grid.center, grid.base_extent)])
    print(json.dumps(rep.to_dict(), indent=2))


def cmd_basis(args):
    cfg, grid, g = _scene(args)
    if args.seed is not None:
        cfg["basis"]["seed"] = args.seed
    if args.admissible:
        grid, g, _ = pl.admissible_grid(cfg)
    b = pl.select_basis(cfg, grid, g)
    write_json(_p(args, args.out), b.to_dict())
    print(json.dumps(b.report.to_dict(), indent=2))


def cmd_measure(args):
    cfg, grid, g = _scene(args)
    basis, smp = _basis_and_sampler(args, cfg, g)
    F = measure_F(g, basis, smp, cfgmod.solver_from(cfg))
    pl.measurement_files(F, _p(args, args.out))
    print(json.dumps({"samples": smp.count, "values_sha256": F.digest()}))


def cmd_transform(args):
    cfg, grid, g = _scene(args)
    basis, smp = _basis_and_sampler(args, cfg, g)
    H = pl.perturbation_from(cfg)
    R = transform_R(H.beta, basis, smp, g, cfgmod.solver_from(cfg))
    F = MeasurementTensor([R], [smp.samples], {"kind": "transform", "beta": H.beta.to_dict(),
                                              "basis_sha256": basis.digest()})
    pl.measurement_files(F, _p(args, args.out))


def cmd_linearize(args):
    cfg, grid, g = _scene(args)
    basis, smp = _basis_and_sampler(args, cfg, g)
    H = pl.perturbation_from(cfg)
    dF = linearize_DF(g, H, basis, smp, cfgmod.solver_from(cfg), general=args.general)
    F = MeasurementTensor([dF], [smp.samples], {"kind": "linearize", "beta": H.beta.to_dict(),
                                               "basis_sha256": basis.digest()})
    pl.measurement_files(F, _p(args, args.out))
    if args.fd:
        fd = pl.fd_consistency(g, H, basis, smp, config=cfgmod.solver_from(cfg))
        print(json.dumps(fd.to_dict(), indent=2))


def cmd_family(args):
    cfg = cfgmod.load(_p(args, args.config))
    fam, unknown = pl.build_inverse_setup(cfg)
    write_json(_p(args, args.out), pl.family_record(cfg, fam, unknown))
    print(json.dumps(fam.coverage, indent=2))


def cmd_synthesize(args):
    rec = read_json(_p(args, args.family))
    fam, unknown = pl.family_from_record(rec)
    truth = np.zeros(unknown.P)
    truth[args.index] = args.amplitude
    data = pl.measure_family(fam, unknown.field(truth))
    os.makedirs(_p(args, args.out), exist_ok=True)
    pl.measurement_files(pl.family_measurements(fam, data, {"family_sha256": rec["sha256"],
                                                            "truth": truth.tolist()}),
                         os.path.join(_p(args, args.out), "measurements.csv"))


def cmd_reconstruct(args):
    rec = read_json(_p(args, args.family))
    fam, unknown = pl.family_from_record(rec)
    csv = os.path.join(_p(args, args.data), "measurements.csv")
    meta = read_json(csv + ".json") if os.path.exists(csv + ".json") else {}
    if meta.get("family_sha256", rec["sha256"]) != rec["sha256"]:
        raise MinsurfError("measurements were taken on a different surface family")
    data = MeasurementTensor.from_csv(csv, meta)
    cfg = cfgmod.validate({"inversion": {"max_iter": args.max_iter}} if args.max_iter else {})
    truth = meta.get("truth")
    res, out = pl.reconstruct_report(cfg, fam, unknown, data, truth)
    out["family_sha256"] = rec["sha256"]
    out["data_sha256"] = data.digest()
    vals, ext = pl.alpha_grid(unknown, res.coeffs)
    write_field(_p(args, args.out), vals, ext)
    write_json(_p(args, args.report), out)


def cmd_sweep(args):
    rec = read_json(_p(args, args.family))
    fam, unknown = pl.family_from_record(rec)
    amps = [float(a) for a in args.amplitudes.split(",")]
    profile = np.zeros(unknown.P)
    profile[args.index] = 1.0
    res = pl.stability_exponent(fam, unknown, profile, amps)
    res["family_sha256"] = rec["sha256"]
    write_json(_p(args, args.report), res)
    print(json.dumps({k: res[k] for k in ("mu_hat", "data_vs_amplitude_slope")}))


def cmd_spectrum(args):
    cfg, grid, g = _scene(args)
    if args.admissible:
        grid, g, hist = pl.admissible_grid(cfg)
    op = pl.assemble_stability(GraphFunction.zeros(grid), g)
    lam = pl.dirichlet_spectrum(op, args.k)
    out = {"spectrum": lam.tolist(), "grid": grid.to_dict()}
    if args.admissible:
        out["history"] = hist
    write_json(_p(args, args.out), out)


def cmd_export(args):
    from .plotting import export_plot_data
    out_dir = _p(args, args.out_dir) if args.out_dir else None
    paths = export_plot_data(_p(args, args.result), args.kind, out_dir)
    print("\n".join(paths))


def cmd_run(args):
    if args.manifest:
        man = read_json(_p(args, args.manifest))
        cfg = cfgmod.validate(man["config"])
    else:
        cfg = cfgmod.load(_p(args, args.config))
        man = None
    out = _p(args, args.out) if args.out else args.workdir
    new = pl.run_pipeline(cfg, out, Manifest(cfg, out))
    if man is not None and args.verify:
        diff = sorted(k for k, v in man["outputs"].items()
                      if k != "manifest.json" and new.data["outputs"].get(k) != v)
        if diff:
            print("outputs differ: " + ", ".join(diff), file=sys.stderr)
            return 1
        print("all outputs reproduced bitwise")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="minsurf", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="base directory for all relative paths")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def scene_cmd(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--scene", required=True, help="scene/config JSON")
        s.set_defaults(func=fn)
        return s

    s = scene_cmd("solve", cmd_solve, "solve the minimal surface equation for boundary data")
    s.add_argument("--bc", required=True, help="CSV (boundary-node-id, value)")
    s.add_argument("--out", default="u.bin")

    s = scene_cmd("basis", cmd_basis, "select a Dirichlet basis passing the Bolker proxies")
    s.add_argument("--seed", type=int)
    s.add_argument("--admissible", action="store_true", help="shrink the base to admissibility first")
    s.add_argument("--out", default="basis.json")

    for name, fn, default in (("measure", cmd_measure, "measurements.csv"),
                              ("transform", cmd_transform, "transform.csv"),
                              ("linearize", cmd_linearize, "linearize.csv")):
        s = scene_cmd(name, fn, f"{name} over sampled boundary parameters")
        s.add_argument("--basis", required=True)
        s.add_argument("--zsamples", help="sample count, or a CSV of z rows (with header)")
        s.add_argument("--out", default=default)
        if name == "linearize":
            s.add_argument("--general", action="store_true", help="use the pullback-trace formula")
            s.add_argument("--fd", action="store_true", help="also run the finite-difference check")

    s = sub.add_parser("family", help="build the plane family and unknown basis")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="family.json")
    s.set_defaults(func=cmd_family)

    s = sub.add_parser("synthesize", help="noiseless twin data for a single-bump conformal factor")
    s.add_argument("--family", required=True)
    s.add_argument("--index", type=int, default=87)
    s.add_argument("--amplitude", type=float, default=0.02)
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("reconstruct", help="Gauss-Newton reconstruction of the conformal factor")
    s.add_argument("--family", required=True)
    s.add_argument("--data", required=True, help="directory holding measurements.csv")
    s.add_argument("--out", default="alpha.bin")
    s.add_argument("--report", default="report.json")
    s.add_argument("--max-iter", type=int)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("stability-sweep", help="amplitude sweep and Hoelder exponent estimate")
    s.add_argument("--family", required=True)
    s.add_argument("--amplitudes", default="0.02,0.01,0.005,0.0025")
    s.add_argument("--index", type=int, default=87)
    s.add_argument("--report", default="sweep.json")
    s.set_defaults(func=cmd_sweep)

    s = scene_cmd("spectrum", cmd_spectrum, "Dirichlet eigenvalues of the stability operator")
    s.add_argument("--k", type=int, default=6)
    s.add_argument("--admissible", action="store_true")
    s.add_argument("--out", default="spectrum.json")

    s = sub.add_parser("export", help="tidy CSV plus PNG figure from a result JSON")
    s.add_argument("--result", required=True)
    s.add_argument("--kind", required=True, help="spectrum | sweep | convergence | refinement")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("run", help="run the configured pipeline and write a manifest")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--manifest", help="re-run from a manifest's config snapshot")
    s.add_argument("--out", help="output directory (default: workdir)")
    s.add_argument("--verify", action="store_true", help="compare output hashes with the manifest")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except ConfigError as exc:
        print(f"config error [{exc.field}]: {exc}", file=sys.stderr)
        return 2
    except pl.StageError as exc:
        print(f"minsurf {args.command}: {exc}", file=sys.stderr)
        return 1
    except (MinsurfError, ValueError, OSError) as exc:
        print(f"minsurf: stage '{args.command}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
