"""Minimal-surface graph equation: residual, stability operator, Newton solver, spectra.

The residual at an interior node is

    L(u) = |h_u|^{-1/2} ( div F(x, u, du) - S(x, u, du) ),

the Euler-Lagrange expression of the area density ``rho`` with ``F = d rho/dp``
and ``S = d rho/dt``.  Its linearization at a minimal graph is the Jacobi
operator ``Delta_h + q``; on a flat Euclidean base it is the ordinary
Laplacian.  Fluxes live on cell faces (normal difference across the face,
averaged central differences along it), which keeps the scheme second order
and conservative.  The Jacobian is assembled exactly from the second
derivatives of ``rho``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (CannotShrink, EigenSolverFail, LineSearchStall, NoConvergence,
                     NonPositiveDensity, OutOfTube, SingularM, SingularOperator)
from .geometry import FermiGrid, GraphFunction, MetricField, density_terms, grid_gradient

log = logging.getLogger(__name__)

DIRECT_LIMIT = 100_000


@dataclass(frozen=True)
class SolverConfig:
    tol_newton: float = 1e-10        # scaled by (1 + |f|_sup)
    max_iter: int = 30
    min_step: float = 2.0**-20
    armijo: float = 1e-4
    tol_lin: float = 1e-10
    delta: float = np.inf            # admissible data radius |f|_sup
    direct_limit: int = DIRECT_LIMIT # sparse LU below this many unknowns, else BiCGStab + ILU


def _sl(n, spec):
    return tuple(spec.get(k, slice(1, -1)) for k in range(n))


def _interior(n):
    return (slice(1, -1),) * n


def _shift(n, j, sj, k=None, sk=None):
    d = {j: sj}
    if k is not None:
        d[k] = sk
    return _sl(n, d)


class _Evaluation:
    """Residual pieces for one graph; builds the Jacobian on request."""

    def __init__(self, grid: FermiGrid, U, g: MetricField, jac=False):
        self.grid = grid
        n = grid.n
        h = grid.spacing
        X = grid.points
        D = grid_gradient(grid, U)
        I = _interior(n)
        self.faces = []
        div = 0.0
        for j in range(n):
            sa = _shift(n, j, slice(0, -1))
            sb = _shift(n, j, slice(1, None))
            p = 0.5 * (D[sa] + D[sb])
            p[..., j] = (U[sb] - U[sa]) / h[j]
            xf = 0.5 * (X[sa] + X[sb])
            tf = 0.5 * (U[sa] + U[sb])
            terms = density_terms(g.jet(xf, tf), p, second=jac)
            Fj = terms.F[..., j]
            lo = [slice(None)] * n
            hi = [slice(None)] * n
            lo[j] = slice(0, -1)
            hi[j] = slice(1, None)
            div = div + (Fj[tuple(hi)] - Fj[tuple(lo)]) / h[j]
            self.faces.append(terms)
        mj = g.jet(X[I], U[I])
        node = density_terms(mj, D[I], second=jac)
        hdet = np.linalg.det(mj.h)
        if np.any(~(hdet > 0)):
            raise SingularM("tangential metric block is not positive definite")
        self.P = hdet**-0.5
        self.P_t = -0.5 * self.P * np.trace(np.linalg.solve(mj.h, mj.h_t), axis1=-2, axis2=-1)
        self.node = node
        self.bracket = div - node.S
        self.residual = self.P * self.bracket

    def jacobian(self):
        grid = self.grid
        n = grid.n
        h = grid.spacing
        shape = grid.shape
        idx = np.arange(grid.size).reshape(shape)
        rowmap = np.full(grid.size, -1)
        rowmap[grid.interior_ids] = np.arange(len(grid.interior_ids))
        rows, cols, vals = [], [], []

        def add(r, c, v):
            keep = r >= 0
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(v[keep])

        for j in range(n):
            t = self.faces[j]
            Fp = t.F_p[..., j, :]
            Ft = t.F_t[..., j]
            A = idx[_shift(n, j, slice(0, -1))]
            B = idx[_shift(n, j, slice(1, None))]
            entries = [(A, -Fp[..., j] / h[j] + 0.5 * Ft), (B, Fp[..., j] / h[j] + 0.5 * Ft)]
            for k in range(n):
                if k == j:
                    continue
                c = Fp[..., k] / (4 * h[k])
                entries += [
                    (idx[_shift(n, j, slice(0, -1), k, slice(2, None))], c),
                    (idx[_shift(n, j, slice(1, None), k, slice(2, None))], c),
                    (idx[_shift(n, j, slice(0, -1), k, slice(0, -2))], -c),
                    (idx[_shift(n, j, slice(1, None), k, slice(0, -2))], -c),
                ]
            ra = rowmap[A.ravel()]
            rb = rowmap[B.ravel()]
            for col, v in entries:
                col = col.ravel()
                v = v.ravel() / h[j]
                add(ra, col, v)
                add(rb, col, -v)
        I = _interior(n)
        rI = rowmap[idx[I].ravel()]
        Sp = self.node.F_t
        for k in range(n):
            c = (Sp[..., k] / (2 * h[k])).ravel()
            add(rI, idx[_sl(n, {k: slice(2, None)})].ravel(), -c)
            add(rI, idx[_sl(n, {k: slice(0, -2)})].ravel(), c)
        add(rI, idx[I].ravel(), -self.node.S_t.ravel())
        m = len(grid.interior_ids)
        JB = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(m, grid.size)).tocsr()
        J = sp.diags(self.P.ravel()) @ JB
        J = J + sp.coo_matrix(((self.P_t * self.bracket).ravel(), (np.arange(m), idx[I].ravel())),
                              shape=(m, grid.size))
        return J.tocsr()


def mse_residual(u: GraphFunction, g: MetricField):
    """Minimal-surface operator at every interior node (interior-grid shaped array)."""
    return _Evaluation(u.grid, u.values, g).residual


@dataclass
class StabilityOperator:
    """Linearized minimal-surface operator with Dirichlet boundary elimination.

    ``matrix`` acts on interior nodes; ``boundary_block`` couples boundary
    values into interior rows.  ``q`` is the zeroth-order potential, which is
    the Jacobi potential ``|A|^2 + Ric(N,N)`` when ``u`` is a minimal graph
    with ``omega = 0``.  ``weights`` are ``|h_u|^{1/2}`` at interior nodes:
    the operator is self-adjoint for the weighted inner product.
    """

    matrix: sp.csr_matrix
    boundary_block: sp.csr_matrix
    full: sp.csr_matrix
    q: np.ndarray
    weights: np.ndarray
    u: GraphFunction
    g: MetricField
    _lu: object = field(default=None, repr=False)
    direct_limit: int = DIRECT_LIMIT
    tol_lin: float = 1e-10

    @property
    def grid(self):
        return self.u.grid

    def apply(self, v):
        """Operator applied to a full nodal field ``v`` (boundary values included)."""
        return (self.full @ np.asarray(v, float).ravel()).reshape(self.u.values[_interior(self.grid.n)].shape)

    def solve(self, rhs):
        """Solve ``matrix x = rhs`` (interior vectors)."""
        rhs = np.asarray(rhs, dtype=float)
        m = self.matrix.shape[0]
        if m < self.direct_limit:
            if self._lu is None:
                try:
                    self._lu = spla.splu(self.matrix.tocsc())
                except RuntimeError as exc:
                    raise SingularOperator(str(exc)) from exc
            x = self._lu.solve(rhs)
        else:
            ilu = spla.spilu(self.matrix.tocsc(), drop_tol=1e-5)
            M = spla.LinearOperator(self.matrix.shape, ilu.solve)
            x, info = spla.bicgstab(self.matrix, rhs, M=M, rtol=self.tol_lin, maxiter=2000)
            if info != 0:
                raise SingularOperator(f"bicgstab failed (info={info})")
        if not np.all(np.isfinite(x)):
            raise SingularOperator("linear solve produced non-finite values")
        return x


def assemble_stability(u: GraphFunction, g: MetricField) -> StabilityOperator:
    ev = _Evaluation(u.grid, u.values, g, jac=True)
    J = ev.jacobian()
    grid = u.grid
    # potential = action on the constant function, which the derivative terms annihilate
    q = (J @ np.ones(grid.size)).reshape(ev.P.shape)
    return StabilityOperator(J[:, grid.interior_ids].tocsr(), J[:, grid.boundary_ids].tocsr(), J,
                             q, 1.0 / ev.P, u, g)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    u: GraphFunction
    residual_history: list = field(default_factory=list)
    damping_history: list = field(default_factory=list)

    def to_dict(self):
        return {"converged": self.converged, "iterations": self.iterations,
                "residual": self.residual, "residual_history": self.residual_history,
                "damping_history": self.damping_history}


def _with_boundary(grid, interior_vals, f):
    U = np.zeros(grid.size)
    U[grid.interior_ids] = interior_vals
    U[grid.boundary_ids] = f
    return U.reshape(grid.shape)


def solve_stability(f, u: GraphFunction, g: MetricField, op: StabilityOperator | None = None,
                    margin=None) -> GraphFunction:
    """Solve ``D_u L_g(u) v = 0`` with ``v = f`` on the boundary."""
    op = assemble_stability(u, g) if op is None else op
    if margin is not None:
        m = admissibility_margin(op)
        if m < margin:
            raise SingularOperator(f"admissibility margin {m:.3g} below {margin:.3g}")
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        vI = op.solve(-(op.boundary_block @ f))
    else:
        vI = op.solve(-(op.boundary_block @ f.T)).T
        return [GraphFunction(u.grid, _with_boundary(u.grid, vi, fi)) for vi, fi in zip(vI, f)]
    return GraphFunction(u.grid, _with_boundary(u.grid, vI, f))


def solve_mse(f, g: MetricField, grid: FermiGrid, u0: GraphFunction | None = None,
              config: SolverConfig = SolverConfig()) -> SolveReport:
    """Damped Newton for ``L_g(u) = 0`` with Dirichlet data ``f`` (boundary-node order)."""
    f = np.asarray(f, dtype=float)
    fnorm = float(np.max(np.abs(f))) if f.size else 0.0
    if fnorm > config.delta:
        raise NoConvergence(f"boundary data |f| = {fnorm:.3g} exceeds the admissible radius")
    tol = config.tol_newton * (1.0 + fnorm)
    if u0 is None:
        U = solve_stability(f, GraphFunction.zeros(grid), g).values
    else:
        U = np.array(u0.values, dtype=float)
        U.ravel()[grid.boundary_ids] = f
    ev = _Evaluation(grid, U, g, jac=True)
    rn = float(np.max(np.abs(ev.residual)))
    hist, damping = [rn], []
    for it in range(config.max_iter + 1):
        if rn <= tol:
            u = GraphFunction(grid, U)
            return SolveReport(True, it, rn, u, hist, damping)
        if it == config.max_iter:
            break
        J = ev.jacobian()
        op = StabilityOperator(J[:, grid.interior_ids].tocsr(), None, J, None, None, None, g,
                               direct_limit=config.direct_limit, tol_lin=config.tol_lin)
        step = np.zeros(grid.size)
        step[grid.interior_ids] = op.solve(ev.residual.ravel())
        step = step.reshape(grid.shape)
        s = 1.0
        while True:
            try:
                trial = _Evaluation(grid, U - s * step, g, jac=True)
                tn = float(np.max(np.abs(trial.residual)))
            except (NonPositiveDensity, SingularM, OutOfTube):
                tn = np.inf
            if tn <= (1.0 - config.armijo * s) * rn or tn <= tol:
                break
            s *= 0.5
            if s < config.min_step:
                raise LineSearchStall(f"step underflow at iteration {it}, residual {rn:.3e}")
        U = U - s * step
        ev, rn = trial, tn
        hist.append(rn)
        damping.append(s)
    raise NoConvergence(f"no convergence in {config.max_iter} iterations (residual {rn:.3e})")


def _symmetrized(op: StabilityOperator):
    w = np.sqrt(op.weights.ravel())
    A = sp.diags(w) @ op.matrix @ sp.diags(1.0 / w)
    asym = abs(A - A.T).max() if A.nnz else 0.0
    return A.tocsc(), asym <= 1e-9 * max(abs(A).max(), 1.0)


def _start_vector(m):
    # ARPACK otherwise draws a random start, which breaks bitwise reruns
    return np.random.default_rng(0).uniform(0.5, 1.5, m)


def dirichlet_spectrum(op: StabilityOperator, k=6):
    """The ``k`` Dirichlet eigenvalues of smallest magnitude, sorted by magnitude.

    Shift-invert Lanczos at zero on the weight-symmetrized operator
    (Arnoldi when the operator is not symmetrizable).
    """
    A, symmetric = _symmetrized(op)
    m = A.shape[0]
    k = min(k, m)
    try:
        if m <= 400 or k >= m - 1:
            lam = (scipy.linalg.eigvalsh(A.toarray()) if symmetric
                   else scipy.linalg.eigvals(A.toarray()))
        elif symmetric:
            lam = spla.eigsh(A, k=k, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-12,
                             v0=_start_vector(m))
        else:
            lam = spla.eigs(A, k=k, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-12,
                            v0=_start_vector(m))
    except (spla.ArpackNoConvergence, spla.ArpackError, RuntimeError) as exc:
        raise EigenSolverFail(str(exc)) from exc
    lam = np.real_if_close(np.asarray(lam))
    lam = lam[np.argsort(np.abs(lam), kind="stable")][:k]
    return lam


def admissibility_margin(op: StabilityOperator):
    return float(np.min(np.abs(dirichlet_spectrum(op, 1))))


def top_eigenvalues(op: StabilityOperator, k=3):
    """Largest ``k`` (algebraic) Dirichlet eigenvalues, in decreasing order.

    These are the ones that move monotonically (strictly down) when the
    domain shrinks.
    """
    A, symmetric = _symmetrized(op)
    m = A.shape[0]
    k = min(k, m)
    if m <= 400 or k >= m - 1:
        lam = np.real(scipy.linalg.eigvals(A.toarray()))
    else:
        shift = float(np.max(op.q)) + 1.0
        try:
            fn = spla.eigsh if symmetric else spla.eigs
            lam = np.real(fn(A, k=k, sigma=shift, which="LM", return_eigenvectors=False, tol=1e-12,
                             v0=_start_vector(m)))
        except (spla.ArpackNoConvergence, spla.ArpackError, RuntimeError) as exc:
            raise EigenSolverFail(str(exc)) from exc
    return np.sort(lam)[::-1][:k]


def boundary_clearance(grid: FermiGrid, region):
    """Distance from the centre of the ball ``region`` to the base-rectangle boundary, minus its radius."""
    if region is None:
        return np.inf
    c = np.asarray(region["center"], dtype=float)
    cx, ct = c[:-1] - np.asarray(grid.center), c[-1]
    ext = np.asarray(grid.base_extent)
    if np.all(np.abs(cx) <= ext):
        dx = float(np.min(ext - np.abs(cx)))
    else:
        dx = float(np.linalg.norm(np.maximum(np.abs(cx) - ext, 0.0)))
    return float(np.hypot(dx, ct)) - float(region["radius"])


def make_admissible(grid: FermiGrid, g: MetricField, margin=1e-2, shrink=0.95, region=None,
                    track=3, max_steps=200, return_history=False):
    """Shrink the base rectangle concentrically until ``min |lambda| >= margin``.

    Each shrink is checked for strict domain monotonicity of the tracked
    eigenvalues.  Raises :class:`CannotShrink` if the boundary would enter
    ``region`` (a ball ``{"center", "radius"}`` in Fermi coordinates).
    """
    history = []
    prev = None
    for step in range(max_steps + 1):
        op = assemble_stability(GraphFunction.zeros(grid), g)
        spec = dirichlet_spectrum(op, max(track, 1))
        top = top_eigenvalues(op, track)
        m = float(np.min(np.abs(spec)))
        history.append({"step": step, "scale": shrink**step, "margin": m,
                        "eigenvalues": spec.tolist(), "top": top.tolist()})
        if prev is not None and not np.all(top < prev):
            raise EigenSolverFail("eigenvalues did not decrease strictly under domain shrinking")
        prev = top
        if m >= margin:
            log.debug("admissible after %d shrink steps (margin %.4g)", step, m)
            return (grid, history) if return_history else grid
        nxt = grid.shrunk(shrink)
        if boundary_clearance(nxt, region) <= 2 * float(np.max(nxt.spacing)):
            raise CannotShrink("boundary would enter the region before the margin is met")
        grid = nxt
    raise CannotShrink(f"margin not reached after {max_steps} shrink steps")
