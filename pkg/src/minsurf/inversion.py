"""Multi-surface forward matrix, normal-operator diagnostics and Gauss-Newton reconstruction.

Scenes are Euclidean with an unknown conformal factor ``alpha`` equal to 1
outside a ball ``M``.  Planes are totally geodesic, so a family of planes
through ``M`` at several orientations and offsets serves as the base minimal
surfaces; each carries its own Dirichlet basis and z-sampler.  The unknown
``alpha - 1`` is a combination of compact bumps supported inside ``M``.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageFail, Divergence, MinsurfError
from .fields import AmbientPullback, BumpExpansion, Frame
from .geometry import FermiGrid, GraphFunction, MetricField
from .runge import DirichletBasis, candidate_pool, select_embedding_basis
from .solver import SolverConfig, make_admissible
from .transform import ZSampler, graph_area, solve_graphs, surface_integral

log = logging.getLogger(__name__)


def worker_count():
    try:
        return max(1, int(os.environ.get("MINSURF_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    """Map with up to MINSURF_THREADS workers; results keep input order."""
    items = list(items)
    w = min(worker_count(), len(items))
    if w <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, items))


ICOSAHEDRAL_AXES = np.array([[0, 1, p] for p in (1.618033988749895, -1.618033988749895)]
                            + [[1, p, 0] for p in (1.618033988749895, -1.618033988749895)]
                            + [[p, 0, 1] for p in (1.618033988749895, -1.618033988749895)], float)


def orientation_set(kind, m):
    """Unit normals in R^m: ``orthogonal`` (coordinate axes) or ``icosahedral`` (m = 3)."""
    if isinstance(kind, str):
        if kind == "orthogonal":
            return np.eye(m)
        if kind == "icosahedral":
            if m != 3:
                raise MinsurfError("icosahedral orientations need an ambient dimension of 3")
            return ICOSAHEDRAL_AXES / np.linalg.norm(ICOSAHEDRAL_AXES, axis=1, keepdims=True)
        raise MinsurfError(f"unknown orientation set {kind!r}")
    v = np.asarray(kind, dtype=float)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def tangent_frame(normal):
    """Orthonormal tangent axes completing ``normal`` (deterministic Gram-Schmidt)."""
    m = len(normal)
    vecs = [normal]
    for e in np.eye(m)[np.argsort(np.abs(normal), kind="stable")]:
        w = e - sum(np.dot(e, v) * v for v in vecs)
        if np.linalg.norm(w) > 1e-8:
            vecs.append(w / np.linalg.norm(w))
        if len(vecs) == m:
            break
    return np.array(vecs[1:]).T


def sphere_directions(m, count):
    """Near-uniform unit vectors on S^{m-1} (Fibonacci lattice for m = 3)."""
    if m == 2:
        a = np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if m == 3:
        i = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * i / count)
        th = np.pi * (1 + 5**0.5) * i
        return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    v = np.random.default_rng(0).normal(size=(count, m))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def ball_lattice(center, radius, per_axis, m):
    ax = np.linspace(-radius, radius, per_axis)
    pts = np.stack(np.meshgrid(*([ax] * m), indexing="ij"), axis=-1).reshape(-1, m)
    pts = pts[np.linalg.norm(pts, axis=1) <= radius]
    return pts + np.asarray(center, float)


@dataclass
class PlaneSurface:
    frame: Frame
    grid: FermiGrid
    basis: DirichletBasis
    sampler: ZSampler
    offset: float
    orientation: int

    def metric(self, alpha: BumpExpansion | None):
        if alpha is None:
            return MetricField(self.grid.n)
        return MetricField(self.grid.n, alpha=AmbientPullback(alpha, self.frame))


@dataclass
class SurfaceFamily:
    surfaces: list
    region: dict                  # {"center": ambient point, "radius": R}
    coverage: dict = field(default_factory=dict)

    def subset(self, keep):
        return SurfaceFamily([s for s, k in zip(self.surfaces, keep) if k], self.region,
                             self.coverage)

    def to_dict(self):
        return {"region": {"center": list(map(float, self.region["center"])),
                           "radius": float(self.region["radius"])},
                "coverage": self.coverage,
                "surfaces": [{"frame": s.frame.to_dict(), "grid": s.grid.to_dict(),
                              "offset": s.offset, "orientation": s.orientation,
                              "sampler": s.sampler.to_dict(), "basis_sha256": s.basis.digest()}
                             for s in self.surfaces]}


def coverage_report(normals, offsets_by_surface, region, theta_cov, dist_cov, n_dirs=200,
                    probes_per_axis=5, extent=None):
    """Angular/positional coverage of conormal directions over probe points of ``M``.

    A pair (probe ``y``, direction ``xi``) is covered when some plane lies
    within ``dist_cov`` of ``y`` and its normal is within ``theta_cov`` of
    ``+-xi``.
    """
    m = normals.shape[1]
    c = np.asarray(region["center"], float)
    probes = ball_lattice(c, region["radius"], probes_per_axis, m)
    dirs = sphere_directions(m, n_dirs)
    cosang = np.abs(dirs @ normals.T)                             # (dirs, surfaces)
    dist = np.abs((probes - c) @ normals.T - offsets_by_surface)  # (probes, surfaces)
    if extent is not None:
        rel = probes - c
        proj = rel[:, None, :] - (rel @ normals.T)[..., None] * normals
        inside = np.linalg.norm(proj, axis=-1) < extent
        near = (dist <= dist_cov) & inside
    else:
        near = dist <= dist_cov
    best = np.where(near[:, None, :], cosang[None, :, :], -1.0).max(axis=-1)   # (probes, dirs)
    worst = float(np.degrees(np.arccos(np.clip(best.min(), -1, 1)))) if best.min() >= 0 else 180.0
    ok = best >= np.cos(np.radians(theta_cov)) - 1e-12
    return {"theta_cov_deg": float(theta_cov), "dist_cov": float(dist_cov),
            "probes": int(len(probes)), "directions": int(n_dirs),
            "covered_fraction": float(ok.mean()), "worst_angle_deg": worst,
            "passed": bool(ok.all())}


DEFAULT_FAMILY = {
    "n": 2,
    "region_center": [0.0, 0.0, 0.0],
    "region_radius": 0.3,
    "orientations": "icosahedral",
    "offsets": 5,
    "offset_span": 0.8,
    "base_half_width": 0.5,
    "nodes_per_axis": 33,
    "tube_half_width": 0.5,
    "t_nodes": 9,
    "delta_fraction": 0.6,
    "samples_per_surface": None,     # default: 4 * P / K
    "oversampling": 4,
    "pool_size": 24,
    "seed": 7,
    "theta_cov_deg": 45.0,
    "dist_cov": None,                # default: offset spacing
    "admissibility_margin": 1e-2,
    "shrink_factor": 0.95,
}


def build_family(config=None, n_unknowns=125):
    """Planes through ``M`` at each orientation and offset, with bases and samplers."""
    cfg = dict(DEFAULT_FAMILY)
    cfg.update(config or {})
    n = int(cfg["n"])
    m = n + 1
    normals = orientation_set(cfg["orientations"], m)
    R = float(cfg["region_radius"])
    c = np.asarray(cfg["region_center"], float)
    k_off = int(cfg["offsets"])
    offsets = (np.linspace(-1, 1, k_off) * cfg["offset_span"] * R if k_off > 1 else np.zeros(1))
    spacing = float(offsets[1] - offsets[0]) if k_off > 1 else R
    K = len(normals) * len(offsets)
    count = cfg["samples_per_surface"] or int(np.ceil(cfg["oversampling"] * n_unknowns / K))
    L = float(cfg["base_half_width"])
    eps = float(cfg["tube_half_width"])
    g0 = MetricField(n)
    region = {"center": c, "radius": R}
    basis_cache = {}
    surfaces = []
    for io, nu in enumerate(normals):
        axes = tangent_frame(nu)
        for d in offsets:
            frame = Frame(c + d * nu, axes, nu)
            grid = FermiGrid(n, L, cfg["nodes_per_axis"], eps, cfg["t_nodes"])
            local = {"center": np.append(np.zeros(n), -d), "radius": R}
            grid = make_admissible(grid, g0, cfg["admissibility_margin"], cfg["shrink_factor"], local)
            h = float(np.max(grid.spacing))
            if np.hypot(min(grid.base_extent), d) <= R + 2 * h:
                raise CoverageFail("plane boundary does not clear the region by 2h")
            key = grid
            if key not in basis_cache:
                pool = candidate_pool(grid, int(cfg["seed"]), int(cfg["pool_size"]))
                basis_cache[key] = select_embedding_basis(
                    pool, GraphFunction.zeros(grid), g0,
                    delta=cfg["delta_fraction"] * eps, margin=cfg["admissibility_margin"])
            sampler = ZSampler(2 * n + 2, count, seed=int(cfg["seed"]) + len(surfaces))
            surfaces.append(PlaneSurface(frame, grid, basis_cache[key], sampler, float(d), io))
    dist_cov = cfg["dist_cov"] if cfg["dist_cov"] is not None else spacing
    cov = coverage_report(np.array([s.frame.normal for s in surfaces]),
                          np.array([s.offset for s in surfaces]), region,
                          cfg["theta_cov_deg"], dist_cov, extent=L)
    fam = SurfaceFamily(surfaces, region, cov)
    if not cov["passed"]:
        raise CoverageFail(f"coverage failed: worst angle {cov['worst_angle_deg']:.1f} deg "
                           f"> {cfg['theta_cov_deg']} deg")
    return fam


@dataclass
class UnknownBasis:
    """Radial bumps on a cubic lattice, all supported strictly inside ``M``."""

    bumps: BumpExpansion
    region: dict
    spacing: float

    @property
    def P(self):
        return len(self.bumps.centers)

    def field(self, coeffs):
        """``alpha = 1 + sum_p coeffs[p] * bump_p``."""
        return self.bumps.with_coeffs(np.asarray(coeffs, float), offset=1.0)

    def values(self, coeffs, y):
        return 1.0 + self.bumps.basis_values(y) @ np.asarray(coeffs, float)


def make_unknown_basis(region, per_axis=5, width_factor=1.5, margin=0.02):
    """Lattice of ``per_axis^m`` bumps; spacing chosen so every support fits in ``M``."""
    c = np.asarray(region["center"], float)
    R = float(region["radius"])
    m = len(c)
    half = (per_axis - 1) / 2
    s = R * (1 - margin) / (half * np.sqrt(m) + width_factor)
    ax = (np.arange(per_axis) - half) * s
    centers = np.stack(np.meshgrid(*([ax] * m), indexing="ij"), axis=-1).reshape(-1, m) + c
    widths = np.full(len(centers), width_factor * s)
    reach = np.linalg.norm(centers - c, axis=1) + widths
    if np.any(reach >= R):
        raise MinsurfError("bump support leaves the region")
    return UnknownBasis(BumpExpansion(centers, widths, np.zeros(len(centers))), region, s)


@dataclass
class ForwardMatrix:
    A: np.ndarray                 # weighted rows chi(z_m) * DF(bump_p)
    weights: np.ndarray           # chi(z_m) per row
    rows: list                    # (surface, sample) per row


@dataclass
class ForwardPass:
    areas: list                   # per surface, (count,)
    matrix: ForwardMatrix | None
    graphs: list


def forward_pass(family: SurfaceFamily, unknown: UnknownBasis, coeffs=None, jacobian=True,
                 config=SolverConfig()):
    """Areas at ``alpha = 1 + sum c_p bump_p`` and (optionally) the forward matrix there.

    Column ``p`` of the matrix is the derivative of the areas in the
    coefficient ``c_p``: ``(n/2) * integral of bump_p / alpha dVol_g``.
    """
    coeffs = np.zeros(unknown.P) if coeffs is None else np.asarray(coeffs, float)
    alpha = unknown.field(coeffs) if np.any(coeffs) else None

    def one(s):
        g = s.metric(alpha)
        graphs = solve_graphs(s.basis, g, s.sampler.samples, config)
        areas = np.array([graph_area(u, g) for u in graphs])
        rows = None
        if jacobian:
            n = s.grid.n
            chi = s.sampler.chi()
            rows = np.zeros((len(graphs), unknown.P))
            for k, u in enumerate(graphs):
                if chi[k] == 0:
                    continue
                y = s.frame.to_ambient(u.grid.points, u.values)
                B = unknown.bumps.basis_values(y)                  # grid + (P,)
                a = 1.0 + B @ coeffs
                vals = B / a[..., None]
                rho_w = _density_weights(u, g)
                rows[k] = chi[k] * 0.5 * n * np.tensordot(rho_w, vals, axes=s.grid.n)
        return areas, rows, graphs

    res = _ordered_map(one, family.surfaces)
    areas = [r[0] for r in res]
    mat = None
    if jacobian:
        A = np.vstack([r[1] for r in res])
        w = np.concatenate([s.sampler.chi() for s in family.surfaces])
        rows = [(j, k) for j, s in enumerate(family.surfaces) for k in range(s.sampler.count)]
        mat = ForwardMatrix(A, w, rows)
    return ForwardPass(areas, mat, [r[2] for r in res])


def _density_weights(u, g):
    from .geometry import density
    return density(g.jet(u.grid.points, u.values), u.gradient()) * u.grid.trapezoid_weights()


def assemble_forward(family: SurfaceFamily, unknown: UnknownBasis, coeffs=None,
                     config=SolverConfig()) -> ForwardMatrix:
    return forward_pass(family, unknown, coeffs, True, config).matrix


def measure_family(family: SurfaceFamily, alpha: BumpExpansion | None, config=SolverConfig()):
    """Areas of every surface's minimal graphs for the conformal factor ``alpha``."""
    def one(s):
        g = s.metric(alpha)
        return np.array([graph_area(u, g) for u in solve_graphs(s.basis, g, s.sampler.samples, config)])
    return _ordered_map(one, family.surfaces)


def normal_operator_stats(A):
    """Singular values of the weighted forward matrix."""
    M = A.A if isinstance(A, ForwardMatrix) else np.asarray(A)
    s = np.linalg.svd(M, compute_uv=False)
    smin = float(s[-1]) if len(s) >= M.shape[1] else 0.0
    return {"sigma_min": smin, "sigma_max": float(s[0]),
            "condition": float(s[0] / smin) if smin > 0 else float("inf"),
            "singular_values": s.tolist()}


def solve_linear_inverse(A, d, lam=None, noise_level=None, tau=1.01, lam_rel=1e-8):
    """Tikhonov solution of ``min |A b - d|^2 + lam^2 |b|^2`` via the SVD.

    Without ``lam``: the discrepancy principle if ``noise_level`` (per-entry
    standard deviation) is given, otherwise ``lam = lam_rel * sigma_max``.
    """
    M = A.A if isinstance(A, ForwardMatrix) else np.asarray(A, float)
    d = np.asarray(d, float)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    beta = U.T @ d

    def sol(l):
        return Vt.T @ (s / (s**2 + l**2) * beta)

    if lam is None:
        if noise_level is None:
            lam = lam_rel * s[0]
        else:
            target = tau * noise_level * np.sqrt(len(d))
            lo, hi = np.log(s[0] * 1e-12), np.log(s[0] * 1e3)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if np.linalg.norm(M @ sol(np.exp(mid)) - d) > target:
                    hi = mid
                else:
                    lo = mid
            lam = np.exp(lo)
    return sol(lam)


DEFAULT_GN = {"max_iter": 10, "tol_gn": 1e-7, "lam_rel": 1e-8, "min_step": 2.0**-8,
              "alpha_min": 0.1}


@dataclass
class Reconstruction:
    coeffs: np.ndarray
    alpha: BumpExpansion
    history: list
    converged: bool
    sigma: dict | None = None

    def to_dict(self):
        return {"coeffs": self.coeffs.tolist(), "history": self.history,
                "converged": self.converged,
                "sigma": None if self.sigma is None else
                {k: v for k, v in self.sigma.items() if k != "singular_values"}}


def _misfit(fam, data, areas):
    r = np.concatenate([s.sampler.chi() * (d - a) for s, d, a in zip(fam.surfaces, data, areas)])
    return r, float(np.linalg.norm(r))


def reconstruct_conformal(family: SurfaceFamily, data, unknown: UnknownBasis, config=None,
                          solver=SolverConfig()) -> Reconstruction:
    """Gauss-Newton for the bump coefficients of ``alpha`` from area data.

    ``data`` holds one array of areas per surface at that surface's samples.
    Steps are halved until the weighted misfit decreases; iteration stops
    when the accepted update is below ``tol_gn`` (sup-norm of coefficients).
    """
    cfg = dict(DEFAULT_GN)
    cfg.update(config or {})
    data = [np.asarray(d, float) for d in (data.values if hasattr(data, "values") else data)]
    c = np.zeros(unknown.P)
    fp = forward_pass(family, unknown, c, True, solver)
    r, mis = _misfit(family, data, fp.areas)
    history = []
    failures = 0
    sigma = None
    probes = ball_lattice(unknown.region["center"], unknown.region["radius"], 21,
                          len(unknown.region["center"]))
    for it in range(1, cfg["max_iter"] + 1):
        A = fp.matrix
        if it == 1:
            sigma = normal_operator_stats(A)
        dc = solve_linear_inverse(A, r, lam_rel=cfg["lam_rel"])
        upd = float(np.max(np.abs(dc)))
        rec = {"iteration": it, "misfit": mis, "update": upd, "step": 0.0}
        if upd <= cfg["tol_gn"]:
            history.append(rec)
            return Reconstruction(c, unknown.field(c), history, True, sigma)
        s = 1.0
        while s >= cfg["min_step"] and np.min(unknown.values(c + s * dc, probes)) < cfg["alpha_min"]:
            s *= 0.5
        accepted = False
        while s >= cfg["min_step"]:
            trial = forward_pass(family, unknown, c + s * dc, True, solver)
            rt, mt = _misfit(family, data, trial.areas)
            if mt < mis:
                accepted = True
                break
            s *= 0.5
        rec["step"] = s if accepted else 0.0
        history.append(rec)
        log.info("Gauss-Newton %d: misfit %.3e update %.3e step %g", it, mis, upd, rec["step"])
        if not accepted:
            failures += 1
            if failures >= 2:
                raise Divergence("misfit failed to decrease in two consecutive iterations")
            continue
        failures = 0
        c = c + s * dc
        fp, r, mis = trial, rt, mt
        if s * upd <= cfg["tol_gn"]:
            history.append({"iteration": it + 1, "misfit": mis, "update": 0.0, "step": 0.0})
            return Reconstruction(c, unknown.field(c), history, True, sigma)
    return Reconstruction(c, unknown.field(c), history, False, sigma)


def region_l2(fn, region, per_axis=41):
    """Discrete L2(M) norm of ``fn`` evaluated on a lattice inside the ball ``M``."""
    pts = ball_lattice(region["center"], region["radius"], per_axis, len(region["center"]))
    cell = (2 * region["radius"] / (per_axis - 1)) ** len(region["center"])
    return float(np.sqrt(np.sum(fn(pts) ** 2) * cell))


def relative_error(unknown: UnknownBasis, coeffs, truth):
    diff = np.asarray(coeffs, float) - np.asarray(truth, float)
    num = region_l2(lambda y: unknown.bumps.basis_values(y) @ diff, unknown.region)
    den = region_l2(lambda y: unknown.bumps.basis_values(y) @ np.asarray(truth, float), unknown.region)
    return num / den


def stability_exponent(family: SurfaceFamily, unknown: UnknownBasis, profile, amplitudes,
                       config=SolverConfig()):
    """Regression of solution-side norm against data-side norm over an amplitude ladder.

    Returns ``mu_hat`` (slope of log |alpha - 1|_{L2(M)} against log data
    norm) and the linear-regime slope of data norm against amplitude.
    """
    amps = np.array([a for a in amplitudes if a > 0], dtype=float)
    base = measure_family(family, None, config)
    rows = []
    for a in amps:
        coeffs = a * np.asarray(profile, float)
        F = measure_family(family, unknown.field(coeffs), config)
        dn = 0.0
        for s, f, f0 in zip(family.surfaces, F, base):
            w = s.sampler.chi()
            dn += float(np.sqrt(np.mean((w * (f - f0)) ** 2)))
        sn = region_l2(lambda y: unknown.bumps.basis_values(y) @ coeffs, unknown.region)
        rows.append({"amplitude": float(a), "data_norm": dn, "sol_norm": sn})
    ld = np.log([r["data_norm"] for r in rows])
    ls = np.log([r["sol_norm"] for r in rows])
    mu = float(np.polyfit(ld, ls, 1)[0])
    lin = float(np.polyfit(np.log(amps), ld, 1)[0])
    return {"mu_hat": mu, "data_vs_amplitude_slope": lin, "rows": rows}
