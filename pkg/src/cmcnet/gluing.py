"""Catenoid necks matched to spherical building blocks.

In the rescaled chart centred at a neck midpoint, with the neck axis along
``x1``, the two neighbouring blocks are graphs over the ``(x2, x3)`` plane

    F_sph^-  = -tau/2 - eps  (c  + C  log rho) + O(rho^2)
    F_sph^+  = +tau/2 + eps' (c' + C' log rho) + O(rho^2)

and a catenoid of scale ``eb`` shifted by ``eb * db`` along the axis has ends

    F_neck^+- = +- eb arccosh(rho / eb) + eb db.

Matching the constant and logarithmic terms gives ``eb = C eps = C' eps'``,
``db = (c'/C' - c/C) / 2`` and ``tau = Lambda(eb)`` with

    Lambda(e) = e (2 (log 2 - log e) - c'/C' - c/C).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .spectral import LOG_COEFFICIENT, SELF_CONSTANT, zonal_kernel

__all__ = [
    "NeckSpec",
    "MatchingError",
    "GraphabilityError",
    "chi",
    "chi_derivatives",
    "CHI_BOUNDS",
    "lambda_relation",
    "lambda_derivative",
    "lambda_threshold",
    "match_neck",
    "invert_lambda",
    "neck_graph",
    "neck_point",
    "interpolant",
    "sphere_graph_model",
    "pair_constants",
    "rotation",
]

# monotone domain is cut at this fraction of the critical scale
DOMAIN_FRACTION = 0.8


class MatchingError(ValueError):
    """Neck scale or separation outside the invertible range of Lambda."""


class GraphabilityError(ValueError):
    """A deformed catenoid end is no longer a graph over the plane."""


# ---------------------------------------------------------------------------
# cut-off


def chi(u):
    """Quintic cut-off: 1 on ``[0, 1/2]``, 0 on ``[1, inf)``, C^2 joins."""
    s = np.clip(2.0 * np.asarray(u, float) - 1.0, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def chi_derivatives(u):
    """First and second derivatives of :func:`chi` in ``u``."""
    s = np.clip(2.0 * np.asarray(u, float) - 1.0, 0.0, 1.0)
    d1 = -2.0 * 30.0 * s**2 * (1.0 - s) ** 2
    d2 = -4.0 * 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return d1, d2


# max |chi'| = 15/4 at u = 3/4; max |chi''| = 40/sqrt(3) at s = 1/2 -+ 1/(2 sqrt 3)
CHI_BOUNDS = (15.0 / 4.0, 40.0 / np.sqrt(3.0))


# ---------------------------------------------------------------------------
# matching


def _offset(c, C, cp, Cp):
    if C <= 0 or Cp <= 0:
        raise MatchingError("log coefficients must be positive")
    return c / C + cp / Cp


def lambda_relation(eps_flat, c, C, cp, Cp):
    """Separation ``tau = Lambda(eps_flat)``."""
    e = np.asarray(eps_flat, float)
    return e * (2.0 * (np.log(2.0) - np.log(e)) - _offset(c, C, cp, Cp))


def lambda_derivative(eps_flat, c, C, cp, Cp):
    e = np.asarray(eps_flat, float)
    return 2.0 * (np.log(2.0) - np.log(e)) - 2.0 - _offset(c, C, cp, Cp)


def lambda_threshold(c, C, cp, Cp):
    """Scale where ``Lambda'`` vanishes; Lambda increases strictly below it."""
    return 2.0 * np.exp(-1.0 - 0.5 * _offset(c, C, cp, Cp))


@dataclass
class NeckSpec:
    """Optimally matched neck between two blocks, plus its deformation.

    ``deformation`` is ``(d1, d2, d3, eps, theta2, theta3)``.
    """

    eps_flat: float
    d_flat: float
    eps_i: float
    eps_prime: float
    tau: float
    constants: tuple
    deformation: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @property
    def cutoff_radius(self):
        return self.eps_flat ** 0.75

    def graph(self, side):
        return neck_graph(self.deformation, self.eps_flat, self.d_flat, side)


def match_neck(eps_i, c, C, cp, Cp, deformation=None):
    """Neck parameters matched to a block of weight ``eps_i`` and constants ``(c, C)``.

    Raises
    ------
    MatchingError
        If ``C * eps_i`` is not inside the monotone domain of Lambda.
    """
    if eps_i <= 0:
        raise MatchingError("block weight must be positive")
    eb = C * eps_i
    limit = DOMAIN_FRACTION * lambda_threshold(c, C, cp, Cp)
    if eb >= limit:
        raise MatchingError(f"neck scale {eb:.4g} beyond monotone limit {limit:.4g}")
    tau = float(lambda_relation(eb, c, C, cp, Cp))
    dfl = 0.5 * (cp / Cp - c / C)
    dfm = np.zeros(6) if deformation is None else np.asarray(deformation, float)
    return NeckSpec(eb, dfl, eps_i, eb / Cp, tau, (c, C, cp, Cp), dfm)


def invert_lambda(tau, c, C, cp, Cp, method="newton", rtol=1e-13):
    """Neck scale ``e`` with ``Lambda(e) = tau``, unique on the monotone domain.

    ``method`` is ``"newton"`` (safeguarded, from a bracketing start) or
    ``"bisection"`` (Brent on the bracket).
    """
    args = (c, C, cp, Cp)
    top = DOMAIN_FRACTION * lambda_threshold(*args)
    tmax = float(lambda_relation(top, *args))
    if not (0.0 < tau <= tmax):
        raise MatchingError(f"separation {tau:.4g} outside (0, {tmax:.4g}]")
    if method == "bisection":
        # brent works in log scale so tiny scales keep full relative accuracy
        def fun(le):
            return float(lambda_relation(np.exp(le), *args)) - tau
        return float(np.exp(brentq(fun, np.log(top) - 700.0, np.log(top), xtol=1e-15,
                                   rtol=4 * np.finfo(float).eps, maxiter=500)))
    if method != "newton":
        raise ValueError(f"unknown method {method!r}")
    lo, hi = 0.0, top
    # Lambda ~ 2 e log(1/e) suggests the start
    e = min(0.5 * top, tau / max(2.0 * np.log(2.0 / tau), 1.0))
    for _ in range(200):
        val = float(lambda_relation(e, *args)) - tau
        if val > 0:
            hi = e
        else:
            lo = e
        step = val / float(lambda_derivative(e, *args))
        new = e - step
        if not lo < new < hi:
            new = 0.5 * (lo + hi)
        if abs(new - e) <= rtol * new:
            return float(new)
        e = new
    raise MatchingError("Lambda inversion did not converge")


def pair_constants():
    """Per-unit-weight ``c`` of a block with two antipodal sources of equal weight.

    ``c = SELF_CONSTANT + K(-1)``; the degree-one compensator vanishes.
    """
    return SELF_CONSTANT + float(zonal_kernel(-1.0)), LOG_COEFFICIENT


# ---------------------------------------------------------------------------
# neck graphs


def rotation(theta2, theta3):
    """Rotation by ``theta2`` about ``x2`` followed by ``theta3`` about ``x3``."""
    c2, s2 = np.cos(theta2), np.sin(theta2)
    c3, s3 = np.cos(theta3), np.sin(theta3)
    r2 = np.array([[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]])
    r3 = np.array([[c3, -s3, 0.0], [s3, c3, 0.0], [0.0, 0.0, 1.0]])
    return r3 @ r2


def _catenoid(u, phi):
    u, phi = np.broadcast_arrays(u, phi)
    ch = np.cosh(u)
    return np.stack([u, ch * np.cos(phi), ch * np.sin(phi)], -1)


def neck_point(deformation, eps_flat, d_flat, u, phi):
    """Parametric point of the deformed neck ``(1+e) eb R (N + (db,0,0) + d)``."""
    d1, d2, d3, e, t2, t3 = np.asarray(deformation, float)
    shift = np.array([d_flat + d1, d2, d3])
    P = _catenoid(np.asarray(u, float), np.asarray(phi, float)) + shift
    return (1.0 + e) * eps_flat * P @ rotation(t2, t3).T


def neck_graph(deformation, eps_flat, d_flat, side, tol=1e-14, max_iter=60):
    """Graphing function ``y -> x1`` of one end of the deformed neck.

    Parameters
    ----------
    deformation : array_like, shape (6,)
        ``(d1, d2, d3, eps, theta2, theta3)``.
    side : {+1, -1}
        End of the catenoid, ``x1 > 0`` or ``x1 < 0`` when undeformed.

    Returns
    -------
    callable
        ``F(y)`` for points ``y`` of shape ``(..., 2)`` in the plane.  Raises
        :class:`GraphabilityError` where the end has a vertical tangent or
        does not cover ``y``.
    """
    d1, d2, d3, e, t2, t3 = np.asarray(deformation, float)
    scale = (1.0 + e) * eps_flat
    M = rotation(t2, t3)
    shift = np.array([d_flat + d1, d2, d3])
    sgn = 1.0 if side > 0 else -1.0
    simple = t2 == 0.0 and t3 == 0.0

    def F(y):
        y = np.asarray(y, float)
        yp = y / scale
        if simple:
            rho = np.hypot(yp[..., 0] - d2, yp[..., 1] - d3)
            if np.any(rho < 1.0):
                raise GraphabilityError("point inside the neck waist")
            return scale * (sgn * np.arccosh(rho) + shift[0])
        flat = yp.reshape(-1, 2)
        rho = np.hypot(flat[:, 0] - d2, flat[:, 1] - d3)
        u = sgn * np.arccosh(np.maximum(rho, 1.0 + 1e-12))
        phi = np.arctan2(flat[:, 1] - d3, flat[:, 0] - d2)
        for _ in range(max_iter):
            Q = (_catenoid(u, phi) + shift) @ M.T
            res = Q[:, 1:] - flat
            ch, sh = np.cosh(u), np.sinh(u)
            du = np.stack([np.ones_like(u), sh * np.cos(phi), sh * np.sin(phi)], -1) @ M.T
            dp = np.stack([np.zeros_like(u), -ch * np.sin(phi), ch * np.cos(phi)], -1) @ M.T
            jac = np.stack([du[:, 1:], dp[:, 1:]], -1)
            det = np.linalg.det(jac)
            if np.any(np.abs(det) < 1e-10 * ch**2):
                raise GraphabilityError("vertical tangent on the neck end")
            step = np.linalg.solve(jac, res[..., None])[..., 0]
            u, phi = u - step[:, 0], phi - step[:, 1]
            if np.max(np.abs(step)) < tol:
                break
        else:
            raise GraphabilityError("graph inversion did not converge")
        if np.any(sgn * u <= 0):
            raise GraphabilityError("point not covered by this end")
        Q = (_catenoid(u, phi) + shift) @ M.T
        return scale * Q[:, 0].reshape(y.shape[:-1])

    return F


def sphere_graph_model(tau, eps_i, c, C, side, curvature=True):
    """Leading expansion of a unit block near its neck, with the ``rho^2 / 2`` cap."""
    sgn = 1.0 if side > 0 else -1.0

    def F(y):
        rho = np.linalg.norm(np.asarray(y, float), axis=-1)
        val = 0.5 * tau + eps_i * (c + C * np.log(rho))
        if curvature:
            val = val + 0.5 * rho**2
        return sgn * val

    return F


def interpolant(side, neck, sphere, eps_flat):
    """Blend ``chi(rho / eb^{3/4}) F_neck + (1 - chi) F_sph``.

    Each graph is evaluated only where its weight is non-zero, so the blend
    equals the neck graph exactly for ``rho <= eb^{3/4} / 2`` and the sphere
    graph exactly for ``rho >= eb^{3/4}``.
    """
    rc = eps_flat ** 0.75

    def F(y):
        y = np.asarray(y, float)
        w = chi(np.linalg.norm(y, axis=-1) / rc)
        out = np.zeros(y.shape[:-1])
        inner, outer = w > 0, w < 1
        if np.any(inner):
            out[inner] += w[inner] * neck(y[inner])
        if np.any(outer):
            out[outer] += (1.0 - w[outer]) * sphere(y[outer])
        return out

    return F
