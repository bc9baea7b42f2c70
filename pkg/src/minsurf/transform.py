"""Area measurements, the minimal surface transform and its linearization.

For a base surface with Dirichlet basis ``f_1..f_N`` the measurement map
sends ``z`` in the l1 unit ball to the ``g``-area of the minimal graph with
boundary data ``f^z = sum z_i f_i``.  Its derivative in the metric direction
``H`` is ``(1/2) * integral of tr_{g_Sigma}(pullback H) dVol``, which for
``H = beta g`` is ``(n/2) * integral of beta dVol``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .fields import cutoff_chi0
from .geometry import (GraphFunction, MetricField, TensorPerturbation, density, evaluate_on_graph,
                       graph_area, pulled_back_metric)
from .runge import DirichletBasis
from .solver import SolverConfig, assemble_stability, solve_mse, solve_stability
from .errors import NoConvergence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZSampler:
    """Quasi-random parameters ``z`` in the l1 unit ball where the cutoff is positive.

    Halton points in ``[-1, 1]^N`` are rejected outside the l1 ball and the
    survivors scaled by ``1/sqrt(N)``.  With ``include_origin`` the first
    sample is ``z = 0``.
    """

    N: int
    count: int
    seed: int = 0
    include_origin: bool = True

    @property
    def samples(self):
        return _halton_l1(self.N, self.count, self.seed, self.include_origin)

    def chi(self, z=None):
        z = self.samples if z is None else np.atleast_2d(z)
        return cutoff_chi0(np.sqrt(self.N) * np.linalg.norm(z, axis=1))

    def to_dict(self):
        return {"N": self.N, "count": self.count, "seed": self.seed,
                "include_origin": self.include_origin}


class ExplicitSamples:
    """A fixed list of parameters ``z`` with the same cutoff as :class:`ZSampler`."""

    def __init__(self, z):
        self.z = np.atleast_2d(np.asarray(z, dtype=float))
        self.N = self.z.shape[1]
        self.count = len(self.z)
        self.seed = None

    @property
    def samples(self):
        return self.z.copy()

    def chi(self, z=None):
        z = self.z if z is None else np.atleast_2d(z)
        return cutoff_chi0(np.sqrt(self.N) * np.linalg.norm(z, axis=1))

    def to_dict(self):
        return {"N": self.N, "count": self.count, "explicit": True}


_SAMPLE_CACHE = {}


def _halton_l1(N, count, seed, include_origin):
    key = (N, count, seed, include_origin)
    if key in _SAMPLE_CACHE:
        return _SAMPLE_CACHE[key].copy()
    eng = qmc.Halton(d=N, scramble=True, seed=seed)
    out = [np.zeros(N)] if include_origin else []
    scale = 1.0 / np.sqrt(N)
    while len(out) < count:
        pts = 2.0 * eng.random(4096) - 1.0
        for z in pts[np.sum(np.abs(pts), axis=1) <= 1.0]:
            zs = z * scale
            if cutoff_chi0(np.sqrt(N) * np.linalg.norm(zs)) > 0:
                out.append(zs)
            if len(out) == count:
                break
    arr = np.array(out[:count])
    _SAMPLE_CACHE[key] = arr
    return arr.copy()


@dataclass
class MeasurementTensor:
    """Measured values per base surface, with the ``z`` list and provenance metadata."""

    values: list                  # one (count,) array per surface
    z: list                       # one (count, N) array per surface
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        N = self.z[0].shape[1]
        header = "surface,sample," + ",".join(f"z{i + 1}" for i in range(N)) + ",value"
        lines = [header]
        for j, (vals, zs) in enumerate(zip(self.values, self.z)):
            for m, (v, z) in enumerate(zip(vals, zs)):
                lines.append(f"{j},{m}," + ",".join(repr(float(c)) for c in z) + f",{float(v)!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, metadata=None):
        raw = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        values, z = [], []
        for j in np.unique(raw[:, 0]).astype(int):
            rows = raw[raw[:, 0] == j]
            rows = rows[np.argsort(rows[:, 1], kind="stable")]
            z.append(rows[:, 2:-1])
            values.append(rows[:, -1])
        return cls(values, z, metadata or {})

    def digest(self):
        h = hashlib.sha256()
        for v, z in zip(self.values, self.z):
            h.update(np.ascontiguousarray(v, "<f8").tobytes())
            h.update(np.ascontiguousarray(z, "<f8").tobytes())
        return h.hexdigest()


def solve_graphs(basis: DirichletBasis, g: MetricField, z, config=SolverConfig()):
    """Minimal graphs for every parameter in ``z`` (returned in input order).

    Solves run in order of increasing ``|z|``; each starts from the nearest
    solved parameter plus a stability-equation predictor for the change in
    boundary data.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    grid = basis.grid
    zero = GraphFunction.zeros(grid)
    op0 = assemble_stability(zero, g)
    order = np.argsort(np.linalg.norm(z, axis=1), kind="stable")
    graphs = [None] * len(z)
    done = []
    for m in order:
        f = basis.data(z[m])
        if done:
            near = min(done, key=lambda k: (np.linalg.norm(z[k] - z[m]), k))
            fn = basis.data(z[near])
            u0 = GraphFunction(grid, graphs[near].values
                               + solve_stability(f - fn, zero, g, op=op0).values)
        else:
            u0 = solve_stability(f, zero, g, op=op0)
        try:
            rep = solve_mse(f, g, grid, u0=u0, config=config)
        except NoConvergence as exc:
            raise NoConvergence(f"sample {m}: {exc}") from exc
        graphs[m] = rep.u
        done.append(m)
    return graphs


def measure_F(g: MetricField, basis: DirichletBasis, sampler: ZSampler, config=SolverConfig(),
              graphs=None, return_graphs=False):
    """Areas ``F(g)(f^z)`` of the minimal graphs over the sampler's ``z`` list."""
    z = sampler.samples
    graphs = solve_graphs(basis, g, z, config) if graphs is None else graphs
    vals = np.array([graph_area(u, g) for u in graphs])
    meta = {"basis_sha256": basis.digest(), "sampler": sampler.to_dict(),
            "metric": _metric_digest(g)}
    out = MeasurementTensor([vals], [z], meta)
    return (out, graphs) if return_graphs else out


def _metric_digest(g):
    return hashlib.sha256(json.dumps(g.to_dict(), sort_keys=True, default=str).encode()).hexdigest()


def surface_integral(values, u: GraphFunction, g: MetricField):
    """Trapezoid quadrature of nodal ``values`` against the induced volume of the graph."""
    rho = density(g.jet(u.grid.points, u.values), u.gradient())
    return float(np.sum(values * rho * u.grid.trapezoid_weights()))


def transform_R(beta, basis: DirichletBasis, sampler: ZSampler, g: MetricField,
                config=SolverConfig(), graphs=None):
    """Integrals of ``beta`` over the minimal graphs, one per ``z`` sample."""
    graphs = solve_graphs(basis, g, sampler.samples, config) if graphs is None else graphs
    return np.array([surface_integral(evaluate_on_graph(beta, u), u, g) for u in graphs])


def pullback_trace(H: TensorPerturbation, u: GraphFunction, g: MetricField):
    """Nodal ``tr_{g_Sigma}(pullback H)`` using the graph frame ``d_j + d_j u d_t``."""
    x = u.grid.points
    gj = g.jet(x, u.values)
    p = u.gradient()
    G = pulled_back_metric(gj, p)
    Hp = pulled_back_metric(H.jet(gj, x, u.values), p)
    return np.trace(np.linalg.solve(G, Hp), axis1=-2, axis2=-1)


def linearize_DF(g: MetricField, H: TensorPerturbation, basis: DirichletBasis, sampler: ZSampler,
                 config=SolverConfig(), graphs=None, general=False):
    """Derivative of the measurements in the metric direction ``H``.

    Conformal ``H = beta g`` uses ``(n/2) * R(beta)`` unless ``general`` forces
    the pullback-trace path.
    """
    graphs = solve_graphs(basis, g, sampler.samples, config) if graphs is None else graphs
    n = basis.grid.n
    if H.conformal and not general:
        return 0.5 * n * transform_R(H.beta, basis, sampler, g, graphs=graphs)
    return np.array([0.5 * surface_integral(pullback_trace(H, u, g), u, g) for u in graphs])


@dataclass
class FDResult:
    slope: float
    eps: np.ndarray
    remainders: np.ndarray
    reliable: bool
    noise_floor: float

    def to_dict(self):
        return {"slope": self.slope, "eps": self.eps.tolist(),
                "remainders": self.remainders.tolist(), "reliable": self.reliable,
                "noise_floor": self.noise_floor}


def fd_consistency(g: MetricField, H: TensorPerturbation, basis: DirichletBasis, sampler: ZSampler,
                   eps_list=(1e-2, 5e-3, 2.5e-3, 1.25e-3), config=SolverConfig()):
    """Log-log slope of the Taylor remainder ``|F(g + eH) - F(g) - e DF(g)H|_sup`` against ``e``.

    Remainders within a few hundred ulps of the areas are below the noise
    floor of the solver; the slope is then flagged unreliable (and is
    ``nan`` if the remainder vanishes).
    """
    eps = np.asarray(eps_list, dtype=float)
    F0, graphs = measure_F(g, basis, sampler, config, return_graphs=True)
    F0 = F0.values[0]
    dF = linearize_DF(g, H, basis, sampler, graphs=graphs)
    rem = []
    for e in eps:
        Fe = measure_F(g.perturbed(H, e), basis, sampler, config).values[0]
        rem.append(float(np.max(np.abs(Fe - F0 - e * dF))))
    rem = np.array(rem)
    floor = 500 * np.finfo(float).eps * float(np.max(np.abs(F0))) + 1e3 * config.tol_newton**2
    ok = rem > floor
    if np.sum(ok) >= 2:
        slope = float(np.polyfit(np.log(eps[ok]), np.log(rem[ok]), 1)[0])
    else:
        slope = float("nan")
    return FDResult(slope, eps, rem, bool(np.all(ok)), floor)
