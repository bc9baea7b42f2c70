"""Finite Dirichlet bases whose stability solutions embed the base surface.

For boundary functions ``f_1..f_N`` (``N = 2n + 2``) let ``v_j`` solve the
stability equation with ``v_j = f_j`` on the boundary.  The restricted
Poisson kernel at ``x`` is the row ``E(x) = (v_1(x), ..., v_N(x))``; the
Bolker proxies ask that ``E`` separates points, is an immersion and misses
the origin.  Existence is non-constructive, so bases are found by a seeded
greedy search over a pool of smooth boundary traces.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .errors import SelectionFail
from .geometry import FermiGrid, GraphFunction, MetricField, grid_gradient
from .solver import admissibility_margin, assemble_stability, solve_stability

log = logging.getLogger(__name__)

EXHAUSTIVE_NODES = 10_000


def _boundary_coords(grid: FermiGrid):
    return grid.points.reshape(-1, grid.n)[grid.boundary_ids] - np.asarray(grid.center)


def _to_grid(grid, f):
    F = np.zeros(grid.size)
    F[grid.boundary_ids] = f
    return F.reshape(grid.shape)


def boundary_derivatives(grid: FermiGrid, f):
    """Sup-norms of first and second tangential differences of ``f`` along each boundary face."""
    F = _to_grid(grid, f)
    h = grid.spacing
    d1 = d2 = 0.0
    for j in range(grid.n):
        tang = [k for k in range(grid.n) if k != j]
        for side in (0, -1):
            face = np.take(F, side, axis=j)
            for a, k in enumerate(tang):
                if face.shape[a] < 3:
                    continue
                g1 = np.gradient(face, h[k], axis=a, edge_order=2)
                g2 = np.gradient(g1, h[k], axis=a, edge_order=2)
                d1 = max(d1, float(np.max(np.abs(g1))))
                d2 = max(d2, float(np.max(np.abs(g2))))
    return d1, d2


def surrogate_norm(grid: FermiGrid, f):
    """Discrete stand-in for the C^{2,gamma} boundary norm: sup |f| + sup |f'| + sup |f''|."""
    d1, d2 = boundary_derivatives(grid, f)
    return float(np.max(np.abs(f))) + d1 + d2


def candidate_pool(grid: FermiGrid, seed: int, pool_size: int, lap_bound: float = 50.0,
                   max_freq: float = 2.0):
    """Deterministic pool of smooth boundary traces.

    The first ``n + 1`` entries are the constant trace and the coordinate
    traces; quadratic harmonic polynomials follow, then seeded random
    low-frequency plane-wave sums.  Every member is scaled to unit sup-norm
    and has boundary second differences bounded by ``lap_bound`` in
    extent-normalized units.
    """
    n = grid.n
    xb = _boundary_coords(grid)
    L = float(max(grid.base_extent))
    xi = xb / L
    pool = [np.ones(len(xb))] + [xb[:, i].copy() for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            pool.append(xi[:, i] * xi[:, j])
    for i in range(n - 1):
        pool.append(xi[:, i] ** 2 - xi[:, i + 1] ** 2)
    rng = np.random.default_rng(seed)
    while len(pool) < pool_size:
        k = rng.uniform(-max_freq, max_freq, size=(3, n)) * np.pi / 2
        a = rng.normal(size=3)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        f = np.sum(a * np.cos(xi @ k.T + ph), axis=1)
        s = np.max(np.abs(f))
        if s < 1e-8:
            continue
        f = f / s
        if boundary_derivatives(grid, f)[1] * L**2 > lap_bound:
            continue
        pool.append(f)
    out = []
    for f in pool[:pool_size]:
        s = np.max(np.abs(f))
        out.append(f / s if s > 0 else f)
    return out


@dataclass
class BolkerReport:
    separation: float
    immersion: float
    origin: float
    scale: float
    thresholds: dict
    boundary_rank: int
    N: int
    pairs_checked: int

    @property
    def separation_ok(self):
        return self.separation > self.thresholds["separation"] * self.scale

    @property
    def immersion_ok(self):
        return self.immersion > self.thresholds["immersion"] * self.scale

    @property
    def origin_ok(self):
        return self.origin > self.thresholds["origin"] * self.scale

    @property
    def degenerate(self):
        return self.boundary_rank < self.N

    @property
    def passed(self):
        return self.separation_ok and self.immersion_ok and self.origin_ok

    def to_dict(self):
        return {"separation": self.separation, "immersion": self.immersion,
                "origin": self.origin, "scale": self.scale, "thresholds": self.thresholds,
                "boundary_rank": self.boundary_rank, "N": self.N,
                "pairs_checked": self.pairs_checked, "separation_ok": self.separation_ok,
                "immersion_ok": self.immersion_ok, "origin_ok": self.origin_ok,
                "degenerate": self.degenerate, "passed": self.passed}


@dataclass
class DirichletBasis:
    grid: FermiGrid
    boundary: np.ndarray          # (N, n_boundary)
    norms: np.ndarray             # surrogate norm of each f_j (= delta_j)
    solutions: np.ndarray         # (N,) + grid.shape
    provenance: list = field(default_factory=list)
    report: BolkerReport | None = None

    @property
    def N(self):
        return len(self.boundary)

    def data(self, z):
        """Boundary data ``sum_i z_i f_i``."""
        return np.asarray(z, float) @ self.boundary

    def embedding(self):
        """``E`` as an array of shape ``(nodes, N)``."""
        return self.solutions.reshape(self.N, -1).T

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.boundary, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.norms, dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def from_dict(cls, d, g: MetricField, u0: GraphFunction | None = None):
        """Rebuild from :meth:`to_dict`; stability solutions are recomputed for ``g``."""
        grid = FermiGrid(**d["grid"])
        boundary = np.asarray(d["boundary"], dtype=float)
        u0 = GraphFunction.zeros(grid) if u0 is None else u0
        V = np.array([s.values for s in solve_stability(boundary, u0, g)])
        rep = d.get("report")
        fields = ("separation", "immersion", "origin", "scale", "thresholds", "boundary_rank",
                  "N", "pairs_checked")
        report = None if rep is None else BolkerReport(*(rep[k] for k in fields))
        out = cls(grid, boundary, np.asarray(d["norms"], float), V, d.get("provenance", []), report)
        if "sha256" in d and out.digest() != d["sha256"]:
            raise ValueError("basis content does not match its recorded hash")
        return out

    def to_dict(self):
        return {"grid": self.grid.to_dict(), "boundary": self.boundary.tolist(),
                "norms": self.norms.tolist(), "provenance": self.provenance,
                "report": None if self.report is None else self.report.to_dict(),
                "sha256": self.digest()}


class _Margins:
    """Incremental margin bookkeeping for a growing set of solutions."""

    def __init__(self, grid, pair_limit=EXHAUSTIVE_NODES, separation_factor=2.0, seed=0):
        self.grid = grid
        self.h = float(np.max(grid.spacing))
        self.L = float(max(grid.base_extent))
        X = grid.points.reshape(-1, grid.n)
        m = len(X)
        if m < pair_limit:
            self.far = pdist(X) >= separation_factor * self.h * (1 - 1e-12)
            self.pairs = None
        else:
            rng = np.random.default_rng(seed)
            k = int(m * np.log(m) * 4)
            i = rng.integers(0, m, k)
            j = rng.integers(0, m, k)
            keep = np.linalg.norm(X[i] - X[j], axis=1) >= separation_factor * self.h * (1 - 1e-12)
            self.pairs = (i[keep], j[keep])
        self.interior = grid.interior_mask.ravel()

    @property
    def pairs_checked(self):
        return int(self.far.sum()) if self.pairs is None else len(self.pairs[0])

    def separation(self, E):
        if self.pairs is None:
            return float(np.sqrt(np.min(pdist(E, "sqeuclidean")[self.far])))
        i, j = self.pairs
        return float(np.sqrt(np.min(np.sum((E[i] - E[j]) ** 2, axis=1))))

    def immersion(self, dE, partial=False):
        """min over interior nodes of the smallest (``partial``: the k-th) singular value of dE."""
        gram = np.einsum("mki,mkj->mij", dE, dE)
        ev = np.linalg.eigvalsh(gram)
        k = dE.shape[1]
        col = -min(k, dE.shape[2]) if partial else 0
        return float(np.sqrt(max(np.min(ev[:, col]), 0.0)))

    @staticmethod
    def origin(E):
        return float(np.sqrt(np.min(np.sum(E**2, axis=1))))


def _jacobians(grid, V):
    """dE at interior nodes, shape (interior nodes, k, n)."""
    dv = [grid_gradient(grid, v).reshape(-1, grid.n)[grid.interior_ids] for v in V]
    return np.stack(dv, axis=1)


THRESHOLDS = {"separation": 1e-6, "immersion": 1e-6, "origin": 1e-6}


def _report(grid, margins, V, boundary, thresholds):
    E = V.reshape(len(V), -1).T
    scale = float(np.max(np.abs(E))) if E.size else 0.0
    L = margins.L
    return BolkerReport(
        separation=margins.separation(E),
        immersion=margins.immersion(_jacobians(grid, V)) * L,
        origin=margins.origin(E),
        scale=scale, thresholds=dict(thresholds),
        boundary_rank=int(np.linalg.matrix_rank(np.asarray(boundary), tol=1e-10 * max(scale, 1e-300))),
        N=len(V), pairs_checked=margins.pairs_checked)


def select_embedding_basis(pool, u0: GraphFunction, g: MetricField, N=None, delta=None,
                           margin=1e-2, thresholds=THRESHOLDS, separation_factor=2.0, seed=0,
                           pair_limit=EXHAUSTIVE_NODES):
    """Greedy selection of ``N = 2n + 2`` pool members with positive Bolker margins.

    At each step the first failing criterion (immersion, then separation,
    then origin avoidance) is maximized, ties broken by the later ones; once
    all pass, the sum of log relative margins is maximized.  Each chosen
    trace is rescaled to surrogate norm ``delta``.
    """
    grid = u0.grid
    n = grid.n
    N = 2 * n + 2 if N is None else N
    delta = 0.05 * grid.tube_half_width if delta is None else delta
    if len(pool) < N:
        raise SelectionFail("pool smaller than the basis size")
    op = assemble_stability(u0, g)
    if margin is not None and admissibility_margin(op) < margin:
        raise SelectionFail("stability operator is not admissible")
    F = np.array([f * (delta / surrogate_norm(grid, f)) for f in pool])
    sols = solve_stability(F, u0, g, op=op)
    V = np.array([s.values for s in sols])
    dV = _jacobians(grid, V)
    E_all = V.reshape(len(V), -1).T
    margins = _Margins(grid, pair_limit, separation_factor, seed)
    L = margins.L
    selected, log_ = [], []

    def score(idx):
        E = E_all[:, idx]
        scale = float(np.max(np.abs(E)))
        sub = dV[:, idx, :]
        full = margins.immersion(sub) * L / scale
        partial = margins.immersion(sub, partial=True) * L / scale
        sep = margins.separation(E) / scale
        org = margins.origin(E) / scale
        return (full, sep, org), partial

    names = ("immersion", "separation", "origin")
    while len(selected) < N:
        current = score(selected)[0] if selected else (0.0, 0.0, 0.0)
        failing = [i for i, k in enumerate(names) if current[i] <= thresholds[k]]
        best, best_key, best_s = None, None, None
        for c in range(len(pool)):
            if c in selected:
                continue
            if any(np.allclose(F[c], F[s]) for s in selected):
                continue
            s, partial = score(selected + [c])
            if failing:
                p = failing[0]
                lead = partial if p == 0 else s[p]
                key = (lead,) + tuple(s[i] for i in range(3) if i != p)
            else:
                key = (float(np.sum(np.log(np.maximum(s, 1e-300)))),)
            if best_key is None or key > best_key:
                best, best_key, best_s = c, key, s
        if best is None:
            raise SelectionFail("pool exhausted before N functions were selected")
        selected.append(best)
        log_.append({"step": len(selected), "pool_index": int(best),
                     "objective": names[failing[0]] if failing else "balanced",
                     "immersion": best_s[0], "separation": best_s[1], "origin": best_s[2]})
        log.debug("basis step %d: pool[%d] %s", len(selected), best, best_s)
    basis = DirichletBasis(grid, F[selected], np.full(N, delta), V[selected], log_)
    basis.report = _report(grid, margins, V[selected], F[selected], thresholds)
    if not basis.report.passed:
        raise SelectionFail(f"selected basis fails the Bolker proxies: {basis.report.to_dict()}")
    return basis


def basis_from_boundary(boundary, u0: GraphFunction, g: MetricField, provenance=None):
    """Basis with the given boundary traces (no selection, no rescaling)."""
    boundary = np.atleast_2d(np.asarray(boundary, dtype=float))
    sols = solve_stability(boundary, u0, g)
    V = np.array([s.values for s in sols])
    norms = np.array([surrogate_norm(u0.grid, f) for f in boundary])
    return DirichletBasis(u0.grid, boundary, norms, V, provenance or [])


def bolker_check(basis: DirichletBasis, u0: GraphFunction | None = None, g: MetricField | None = None,
                 thresholds=THRESHOLDS, separation_factor=2.0, seed=0,
                 pair_limit=EXHAUSTIVE_NODES) -> BolkerReport:
    """Separation, immersion and origin-avoidance margins of the basis embedding.

    If ``u0`` and ``g`` are given the cached solutions are recomputed first.
    """
    V = basis.solutions
    if u0 is not None and g is not None:
        V = np.array([s.values for s in solve_stability(basis.boundary, u0, g)])
    margins = _Margins(basis.grid, pair_limit, separation_factor, seed)
    return _report(basis.grid, margins, V, basis.boundary, thresholds)


def poisson_row(node, basis: DirichletBasis):
    """Restricted Poisson kernel at a base node: ``(v_1(x), ..., v_N(x))``."""
    return basis.solutions.reshape(basis.N, -1)[:, node].copy()
