"""Scalar fields on the Fermi tube and on the ambient space.

A tube field is anything with ``jet(x, t) -> (f, f_t, f_tt)``: its value and
first two normal derivatives at points ``(x, t)``, ``x`` of shape ``(..., n)``
and ``t`` of shape ``(...)``.  The minimal-surface operator only ever needs
normal derivatives of the metric, so that is all the jet carries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import OutOfTube


class TubeFunction:
    def jet(self, x, t):
        raise NotImplementedError

    def value(self, x, t):
        return self.jet(x, t)[0]

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(TubeFunction):
    c: float = 1.0

    def jet(self, x, t):
        t = np.asarray(t, dtype=float)
        z = np.zeros_like(t)
        return np.full_like(t, self.c), z, z.copy()

    def to_dict(self):
        return {"kind": "constant", "c": self.c}


@dataclass(frozen=True)
class GaussianBump(TubeFunction):
    """``offset + amplitude * exp(-|(x,t) - center|^2 / (2 width^2))`` in Fermi coordinates."""

    center: tuple
    amplitude: float
    width: float
    offset: float = 0.0

    def jet(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        c = np.asarray(self.center, dtype=float)
        w2 = self.width**2
        r2 = np.sum((x - c[:-1]) ** 2, axis=-1) + (t - c[-1]) ** 2
        e = self.amplitude * np.exp(-0.5 * r2 / w2)
        dt = t - c[-1]
        return self.offset + e, -e * dt / w2, e * (dt**2 / w2**2 - 1.0 / w2)

    def to_dict(self):
        return {"kind": "gaussian", "center": list(self.center), "amplitude": self.amplitude,
                "width": self.width, "offset": self.offset}


def smooth_bump(q):
    """exp(1 - 1/(1-q)) for q in [0, 1), zero beyond; q is the squared scaled radius."""
    q = np.asarray(q, dtype=float)
    out = np.zeros_like(q)
    inside = q < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - q[inside]))
    return out


def _psi(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = np.exp(-1.0 / r[pos])
    return out


def cutoff_chi0(s):
    """C-infinity cutoff: 1 on [-1/2, 1/2], 0 outside (-1, 1), values in [0, 1]."""
    a = np.abs(np.asarray(s, dtype=float))
    num = _psi(1.0 - a)
    return num / (num + _psi(a - 0.5))


@dataclass(frozen=True)
class BumpExpansion:
    """Ambient scalar field ``offset + sum_p coeffs[p] * phi(|y - c_p| / w_p)``.

    ``phi`` is the compactly supported bump ``exp(1 - 1/(1 - r^2))`` with
    value 1 at the centre.  Values, gradients and Hessians are exact.
    """

    centers: np.ndarray
    widths: np.ndarray
    coeffs: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "centers", np.atleast_2d(np.asarray(self.centers, dtype=float)))
        k = len(self.centers)
        object.__setattr__(self, "widths", np.broadcast_to(np.asarray(self.widths, float), (k,)).copy())
        object.__setattr__(self, "coeffs", np.broadcast_to(np.asarray(self.coeffs, float), (k,)).copy())

    def with_coeffs(self, coeffs, offset=None):
        return BumpExpansion(self.centers, self.widths, coeffs,
                             self.offset if offset is None else offset)

    def single(self, p):
        e = np.zeros(len(self.centers))
        e[p] = 1.0
        return BumpExpansion(self.centers, self.widths, e, 0.0)

    def basis_values(self, y):
        """Matrix of the individual bumps at points ``y`` (shape ``(..., P)``)."""
        y = np.asarray(y, dtype=float)
        d = y[..., None, :] - self.centers
        q = np.sum(d**2, axis=-1) / self.widths**2
        return smooth_bump(q)

    def evaluate(self, y):
        y = np.asarray(y, dtype=float)
        shape, m = y.shape[:-1], y.shape[-1]
        flat = y.reshape(-1, m)
        val = np.full(len(flat), float(self.offset))
        grad = np.zeros((len(flat), m))
        hess = np.zeros((len(flat), m, m))
        eye = np.eye(m)
        for p in np.flatnonzero(self.coeffs):
            w2 = self.widths[p] ** 2
            d = flat - self.centers[p]
            q = np.einsum("ij,ij->i", d, d) / w2
            idx = np.flatnonzero(q < 1.0)
            if idx.size == 0:
                continue
            qs, dd = q[idx], d[idx]
            phi = self.coeffs[p] * np.exp(1.0 - 1.0 / (1.0 - qs))
            a = -1.0 / (1.0 - qs) ** 2
            da = -2.0 / (1.0 - qs) ** 3
            gq = 2.0 * dd / w2
            val[idx] += phi
            grad[idx] += (phi * a)[:, None] * gq
            hess[idx] += ((phi * (a**2 + da))[:, None, None] * gq[:, :, None] * gq[:, None, :]
                          + (phi * a * 2.0 / w2)[:, None, None] * eye)
        return val.reshape(shape), grad.reshape(shape + (m,)), hess.reshape(shape + (m, m))

    def to_dict(self):
        return {"kind": "bumps", "centers": self.centers.tolist(), "widths": self.widths.tolist(),
                "coeffs": self.coeffs.tolist(), "offset": self.offset}


@dataclass(frozen=True)
class Frame:
    """Rigid embedding ``(x, t) -> origin + axes @ x + t * normal`` of Fermi coordinates."""

    origin: np.ndarray
    axes: np.ndarray        # (m, n), orthonormal columns
    normal: np.ndarray      # (m,)

    def to_ambient(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return self.origin + x @ self.axes.T + t[..., None] * self.normal

    def to_fermi(self, y):
        d = np.asarray(y, dtype=float) - self.origin
        return d @ self.axes, d @ self.normal

    def to_dict(self):
        return {"origin": self.origin.tolist(), "axes": self.axes.tolist(),
                "normal": self.normal.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["origin"], float), np.asarray(d["axes"], float),
                   np.asarray(d["normal"], float))


@dataclass(frozen=True)
class AmbientPullback(TubeFunction):
    field: BumpExpansion
    frame: Frame

    def jet(self, x, t):
        val, grad, hess = self.field.evaluate(self.frame.to_ambient(x, t))
        nu = self.frame.normal
        return val, grad @ nu, np.einsum("...ij,i,j->...", hess, nu, nu)

    def to_dict(self):
        return {"kind": "pullback", "field": self.field.to_dict(), "frame": self.frame.to_dict()}


@dataclass(frozen=True)
class SampledTubeField(TubeFunction):
    """Tube field sampled on the grid ``base nodes x t nodes``.

    Values are multilinear interpolants; normal derivatives use fourth-order
    central differences of the interpolant with the t-grid step.  ``mask``
    flags nodes inside the region where the field may be nonzero.
    """

    axes: tuple                 # n base axes then the t axis
    values: np.ndarray
    mask: np.ndarray | None = None
    _interp: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if self.mask is not None:
            vals = np.where(self.mask, vals, 0.0)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            self.axes, vals, method="linear", bounds_error=False, fill_value=None))

    @property
    def tube_half_width(self):
        return float(self.axes[-1][-1])

    def _eval(self, x, t):
        pts = np.concatenate([np.asarray(x, float), np.asarray(t, float)[..., None]], axis=-1)
        return self._interp(pts.reshape(-1, pts.shape[-1])).reshape(pts.shape[:-1])

    def evaluate(self, x, t):
        t = np.asarray(t, dtype=float)
        if np.any(np.abs(t) >= self.tube_half_width):
            raise OutOfTube("graph leaves the Fermi tube")
        return self._eval(x, t)

    def jet(self, x, t):
        t = np.asarray(t, dtype=float)
        k = float(self.axes[-1][1] - self.axes[-1][0])
        f = [self._eval(x, t + s * k) for s in (-2, -1, 0, 1, 2)]
        d1 = (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * k)
        d2 = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * k * k)
        return f[2], d1, d2

    def to_dict(self):
        return {"kind": "sampled", "shape": list(self.values.shape)}


def sample_on_tube(func, grid, mask_fn=None):
    """Sample a tube function on ``grid``'s tube nodes into a :class:`SampledTubeField`."""
    axes = tuple(grid.axes) + (grid.t_axis,)
    mesh = np.meshgrid(*axes, indexing="ij")
    x = np.stack(mesh[:-1], axis=-1)
    t = mesh[-1]
    vals = func.value(x, t) if hasattr(func, "value") else func(x, t)
    mask = None if mask_fn is None else mask_fn(x, t)
    return SampledTubeField(axes, vals, mask)
