"""Fermi-coordinate scene: grids, metric fields, graphs and their volume densities.

Metrics are written in Fermi coordinates of a base hypersurface as

    g = h_jk(x,t) dx^j dx^k + g_tt(x,t) dt^2 + omega(x,t) (x) dt + dt (x) omega(x,t)

and a graph ``t = u(x)`` pulls it back to

    G = h_u + g_tt p p^T + omega p^T + p omega^T,     p = du,

so the induced volume density is ``rho = sqrt(det G)``.  ``rho`` and its
derivatives in ``(t, p)`` drive both the area and the minimal-surface
operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NonPositiveDensity, OutOfTube
from .fields import GaussianBump, SampledTubeField, TubeFunction


@dataclass(frozen=True)
class FermiGrid:
    """Tensor grid on the base rectangle plus a uniform grid across the tube."""

    n: int
    base_extent: tuple
    nodes_per_axis: tuple
    tube_half_width: float
    t_nodes: int = 9
    center: tuple | None = None

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ConfigError("n must be >= 1", "n")
        ext = tuple(float(e) for e in np.broadcast_to(self.base_extent, (n,)))
        npa = tuple(int(k) for k in np.broadcast_to(self.nodes_per_axis, (n,)))
        if any(e <= 0 for e in ext):
            raise ConfigError("base_extent must be positive", "base_extent")
        if any(k < 3 for k in npa):
            raise ConfigError("nodes_per_axis must be >= 3", "nodes_per_axis")
        if not self.tube_half_width > 0:
            raise ConfigError("tube_half_width must be > 0", "tube_half_width")
        if int(self.t_nodes) < 3:
            raise ConfigError("t_nodes must be >= 3", "t_nodes")
        ctr = (0.0,) * n if self.center is None else tuple(float(c) for c in self.center)
        if len(ctr) != n:
            raise ConfigError("center must have n entries", "center")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "base_extent", ext)
        object.__setattr__(self, "nodes_per_axis", npa)
        object.__setattr__(self, "tube_half_width", float(self.tube_half_width))
        object.__setattr__(self, "t_nodes", int(self.t_nodes))
        object.__setattr__(self, "center", ctr)

    @property
    def shape(self):
        return self.nodes_per_axis

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def spacing(self):
        return np.array([2 * e / (k - 1) for e, k in zip(self.base_extent, self.shape)])

    @property
    def axes(self):
        return [np.linspace(c - e, c + e, k)
                for c, e, k in zip(self.center, self.base_extent, self.shape)]

    @property
    def t_axis(self):
        return np.linspace(-self.tube_half_width, self.tube_half_width, self.t_nodes)

    @property
    def points(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def boundary_mask(self):
        m = np.zeros(self.shape, dtype=bool)
        for j in range(self.n):
            sl = [slice(None)] * self.n
            sl[j] = 0
            m[tuple(sl)] = True
            sl[j] = -1
            m[tuple(sl)] = True
        return m

    @property
    def interior_mask(self):
        return ~self.boundary_mask

    @property
    def boundary_ids(self):
        return np.flatnonzero(self.boundary_mask.ravel())

    @property
    def interior_ids(self):
        return np.flatnonzero(self.interior_mask.ravel())

    def trapezoid_weights(self):
        w = np.ones(())
        for h, k in zip(self.spacing, self.shape):
            w1 = np.full(k, h)
            w1[0] = w1[-1] = h / 2
            w = np.multiply.outer(w, w1)
        return w

    def shrunk(self, factor):
        return replace(self, base_extent=tuple(e * factor for e in self.base_extent))

    def to_dict(self):
        return {"n": self.n, "base_extent": list(self.base_extent),
                "nodes_per_axis": list(self.nodes_per_axis),
                "tube_half_width": self.tube_half_width, "t_nodes": self.t_nodes,
                "center": list(self.center)}


class MetricJet(NamedTuple):
    h: np.ndarray
    h_t: np.ndarray
    h_tt: np.ndarray
    c: np.ndarray
    c_t: np.ndarray
    c_tt: np.ndarray
    om: np.ndarray
    om_t: np.ndarray
    om_tt: np.ndarray

    def scaled(self, a, a_t, a_tt):
        """Jet of ``a * g`` by the product rule."""
        def mul(f, f_t, f_tt, ex):
            A, At, Att = (v[(...,) + (None,) * ex] for v in (a, a_t, a_tt))
            return A * f, At * f + A * f_t, Att * f + 2 * At * f_t + A * f_tt
        return MetricJet(*mul(self.h, self.h_t, self.h_tt, 2),
                         *mul(self.c, self.c_t, self.c_tt, 0),
                         *mul(self.om, self.om_t, self.om_tt, 1))

    def __add__(self, other):
        return MetricJet(*(a + b for a, b in zip(self, other)))

    def __mul__(self, s):
        return MetricJet(*(s * a for a in self))


def _base_jet(preset, params, n, x, t):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    shp = t.shape
    eye = np.broadcast_to(np.eye(n), shp + (n, n))
    zero_n = np.zeros(shp + (n,))
    one = np.ones(shp)
    zero = np.zeros(shp)
    if preset in ("euclidean", "conformal-bump"):
        return MetricJet(eye.copy(), np.zeros_like(eye), np.zeros_like(eye),
                         one, zero, zero.copy(), zero_n, zero_n.copy(), zero_n.copy())
    if preset == "warped":
        # h = (1 + b t^2)(1 + c |x|^2) I : t = 0 is totally geodesic, q = -n b.
        b = float(params.get("b", 0.0))
        cw = float(params.get("c", 0.0))
        w = 1.0 + cw * np.sum(x**2, axis=-1)
        s = 1.0 + b * t**2
        E = eye
        return MetricJet((s * w)[..., None, None] * E, (2 * b * t * w)[..., None, None] * E,
                         (2 * b * w)[..., None, None] * E,
                         one, zero, zero.copy(), zero_n, zero_n.copy(), zero_n.copy())
    raise ConfigError(f"unknown metric preset {preset!r}", "metric.preset")


@dataclass(frozen=True)
class TensorPerturbation:
    """Symmetric 2-tensor ``H`` on the tube.

    Either conformal (``beta`` set, ``H = beta * g``) or given by components:
    ``hjk`` maps ``(j, k)`` with ``j <= k`` to tube functions, ``htt`` and
    ``hjt`` (``j -> function``) are the normal and mixed parts.
    """

    beta: TubeFunction | None = None
    hjk: dict = field(default_factory=dict)
    htt: TubeFunction | None = None
    hjt: dict = field(default_factory=dict)

    @property
    def conformal(self):
        return self.beta is not None

    def jet(self, g_jet, x, t):
        if self.conformal:
            return g_jet.scaled(*self.beta.jet(x, t))
        t = np.asarray(t, dtype=float)
        n = g_jet.h.shape[-1]
        out = [np.zeros(t.shape + (n, n)) for _ in range(3)]
        for (j, k), f in self.hjk.items():
            for o, v in zip(out, f.jet(x, t)):
                o[..., j, k] = v
                o[..., k, j] = v
        cc = [np.zeros(t.shape) for _ in range(3)]
        if self.htt is not None:
            cc = list(self.htt.jet(x, t))
        om = [np.zeros(t.shape + (n,)) for _ in range(3)]
        for j, f in self.hjt.items():
            for o, v in zip(om, f.jet(x, t)):
                o[..., j] = v
        return MetricJet(*out, *cc, *om)


@dataclass(frozen=True)
class MetricField:
    """Ambient metric in Fermi components, optionally times a conformal factor.

    ``g = alpha * g_preset + sum_i eps_i H_i``.  All components and their
    first and second normal derivatives are available at arbitrary tube
    points through :meth:`jet`.
    """

    n: int
    preset: str = "euclidean"
    params: dict = field(default_factory=dict)
    alpha: TubeFunction | None = None
    perturbations: tuple = ()

    def __post_init__(self):
        _base_jet(self.preset, self.params, self.n, np.zeros((1, self.n)), np.zeros(1))
        if self.preset == "conformal-bump" and self.alpha is None:
            p = self.params
            ctr = tuple(float(c) for c in p.get("center", (0.0,) * (self.n + 1)))
            if len(ctr) != self.n + 1:
                raise ConfigError("conformal-bump center needs n + 1 entries", "metric.params.center")
            bump = GaussianBump(ctr, float(p.get("amplitude", 0.02)), float(p.get("width", 0.1)), 1.0)
            object.__setattr__(self, "alpha", bump)

    @property
    def provenance(self):
        return "sampled grid" if isinstance(self.alpha, SampledTubeField) else "preset expression"

    def with_alpha(self, alpha):
        return replace(self, alpha=alpha)

    def perturbed(self, H, eps):
        if eps == 0:
            return self
        return replace(self, perturbations=self.perturbations + ((float(eps), H),))

    def jet(self, x, t):
        g = _base_jet(self.preset, self.params, self.n, x, t)
        if self.alpha is not None:
            g = g.scaled(*self.alpha.jet(x, t))
        base = g
        for eps, H in self.perturbations:
            g = g + H.jet(base, x, t) * eps
        return g

    def to_dict(self):
        d = {"n": self.n, "preset": self.preset, "params": dict(self.params)}
        if self.alpha is not None:
            d["alpha"] = self.alpha.to_dict()
        return d


@dataclass
class GraphFunction:
    """Height ``u`` of a graph over the base grid (nodal values, grid shape)."""

    grid: FermiGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)

    def gradient(self):
        return grid_gradient(self.grid, self.values)

    @property
    def boundary_values(self):
        return self.values.ravel()[self.grid.boundary_ids]

    def check_in_tube(self):
        if np.max(np.abs(self.values)) >= self.grid.tube_half_width:
            raise OutOfTube("graph leaves the Fermi tube")
        return self

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, fn(grid.points))


def grid_gradient(grid, values):
    """Central differences inside, second-order one-sided at the boundary."""
    g = np.gradient(values, *grid.spacing, edge_order=2)
    if grid.n == 1:
        g = [g]
    return np.stack(g, axis=-1)


class DensityTerms(NamedTuple):
    rho: np.ndarray       # sqrt(det G)
    F: np.ndarray         # d rho / d p
    S: np.ndarray         # d rho / d t
    F_p: np.ndarray       # d^2 rho / d p^2
    F_t: np.ndarray       # d^2 rho / dp dt
    S_t: np.ndarray       # d^2 rho / dt^2


def _sym_outer(a, b):
    return a[..., :, None] * b[..., None, :] + b[..., :, None] * a[..., None, :]


def pulled_back_metric(mj, p):
    """Induced metric of the graph, ``h + g_tt p p^T + omega p^T + p omega^T``."""
    pp = p[..., :, None] * p[..., None, :]
    return mj.h + mj.c[..., None, None] * pp + _sym_outer(mj.om, p)


def density(mj, p):
    G = pulled_back_metric(mj, p)
    d = np.linalg.det(G)
    if np.any(~(d > 0)):
        raise NonPositiveDensity("induced metric is not positive definite")
    return np.sqrt(d)


def density_terms(mj, p, second=True):
    """``rho`` and its first (and optionally second) derivatives in ``(p, t)``.

    With ``K = G^-1``, ``w = g_tt p + omega``:
    ``F = rho K w``, ``S = rho tr(K G_t) / 2``, ``F_p = rho (g_tt - w.Kw) K``,
    ``F_t = S K w - rho K G_t K w + rho K (g_tt' p + omega')`` and
    ``S_t = rho (tr(K G_t)^2 / 4 - tr(K G_t K G_t) / 2 + tr(K G_tt) / 2)``.
    """
    G = pulled_back_metric(mj, p)
    det = np.linalg.det(G)
    if np.any(~(det > 0)):
        raise NonPositiveDensity("induced metric is not positive definite")
    rho = np.sqrt(det)
    K = np.linalg.inv(G)
    pp = p[..., :, None] * p[..., None, :]
    Gt = mj.h_t + mj.c_t[..., None, None] * pp + _sym_outer(mj.om_t, p)
    w = mj.c[..., None] * p + mj.om
    Kw = np.einsum("...ij,...j->...i", K, w)
    KGt = K @ Gt
    trKGt = np.trace(KGt, axis1=-2, axis2=-1)
    F = rho[..., None] * Kw
    S = 0.5 * rho * trKGt
    if not second:
        return DensityTerms(rho, F, S, None, None, None)
    s = np.einsum("...i,...i->...", w, Kw)
    F_p = (rho * (mj.c - s))[..., None, None] * K
    wt = mj.c_t[..., None] * p + mj.om_t
    F_t = (S[..., None] * Kw
           - rho[..., None] * np.einsum("...ij,...j->...i", KGt, Kw)
           + rho[..., None] * np.einsum("...ij,...j->...i", K, wt))
    Gtt = mj.h_tt + mj.c_tt[..., None, None] * pp + _sym_outer(mj.om_tt, p)
    S_t = rho * (0.25 * trKGt**2 - 0.5 * np.einsum("...ij,...ji->...", KGt, KGt)
                 + 0.5 * np.trace(K @ Gtt, axis1=-2, axis2=-1))
    return DensityTerms(rho, F, S, F_p, F_t, S_t)


def induced_volume_density(u: GraphFunction, g: MetricField, node=None):
    """Density of the induced volume form of the graph, at every base node or at ``node``.

    ``node`` is a flat base-node index.
    """
    x = u.grid.points
    mj = g.jet(x, u.values)
    rho = density(mj, u.gradient())
    if node is None:
        return rho
    return float(rho.ravel()[node])


def graph_area(u: GraphFunction, g: MetricField):
    """Area of the graph by the composite trapezoid rule."""
    return float(np.sum(induced_volume_density(u, g) * u.grid.trapezoid_weights()))


def evaluate_on_graph(field_, u: GraphFunction):
    """Values ``beta(x, u(x))`` of a tube field on the graph, per base node."""
    if np.any(np.abs(u.values) >= u.grid.tube_half_width):
        raise OutOfTube("graph leaves the Fermi tube")
    if hasattr(field_, "evaluate"):
        return field_.evaluate(u.grid.points, u.values)
    return field_.value(u.grid.points, u.values)
