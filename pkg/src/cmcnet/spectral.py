"""Generating functions on the unit two-sphere.

Solves ``(Delta + 2) G = sum_i eps_i delta_{q_i} + J`` with ``G`` orthogonal
to the degree-one harmonics, where ``Delta`` is the (negative semi-definite)
Laplace-Beltrami operator, ``delta`` has unit mass, and ``J`` is the
degree-one function ``J(x) = J . x`` absorbing the degree-one content of the
sources.

Per unit source at ``q`` the solution is the zonal kernel

    K(t) = sum_{l != 1} (2l+1) / (4 pi (2 - l(l+1))) P_l(t),   t = q . x,

which sums to ``(t log(1-t) + 1 + (4/3 - log 2) t) / (4 pi)``.  Its
singular part ``s(t) = log((1-t)/2) / (4 pi)`` is kept in closed form and
only the regular remainder, whose Legendre coefficients decay like
``l^-3``, is band limited.  Near ``q`` this gives

    K ~ log(dist) / (2 pi) + (7/3 - 2 log 2) / (4 pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.polynomial import legendre
from scipy.special import sph_harm_y_all

__all__ = [
    "GeneratingFunction",
    "Expansion",
    "CapError",
    "solve_generating_function",
    "evaluate",
    "expand_near_singularity",
    "asymptotic_constants",
    "full_coefficients",
    "real_harmonics",
    "zonal_kernel",
    "zonal_series",
    "regular_coefficients",
    "singular_part",
    "sphere_distance",
    "LOG_COEFFICIENT",
    "SELF_CONSTANT",
]

LOG_COEFFICIENT = 1.0 / (2.0 * np.pi)
SELF_CONSTANT = (7.0 / 3.0 - 2.0 * np.log(2.0)) / (4.0 * np.pi)


class CapError(ValueError):
    """Evaluation requested inside an exclusion cap."""


# ---------------------------------------------------------------------------
# zonal pieces


def zonal_kernel(t):
    """Closed form of the per-unit-source kernel ``K(t)``."""
    t = np.asarray(t, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tl = np.where(t < 1.0, t * np.log1p(-np.minimum(t, 1.0 - 1e-300)), -np.inf)
    return (tl + 1.0 + (4.0 / 3.0 - np.log(2.0)) * t) / (4.0 * np.pi)


def kernel_coefficients(L):
    """Legendre coefficients of ``K`` truncated at degree ``L``."""
    ell = np.arange(L + 1, dtype=float)
    with np.errstate(divide="ignore"):
        out = (2 * ell + 1) / (4 * np.pi * (2 - ell * (ell + 1)))
    out[1] = 0.0
    return out


def singular_coefficients(L):
    """Legendre coefficients of ``s(t) = log((1-t)/2) / (4 pi)``."""
    ell = np.arange(L + 1, dtype=float)
    out = np.empty(L + 1)
    out[0] = -1.0 / (4 * np.pi)
    out[1:] = -(2 * ell[1:] + 1) / (4 * np.pi * ell[1:] * (ell[1:] + 1))
    return out


def regular_coefficients(L):
    """Legendre coefficients of ``K - s``; these decay like ``l^-3``."""
    return kernel_coefficients(L) - singular_coefficients(L)


def zonal_series(t, L):
    """Direct Legendre summation of ``K`` truncated at degree ``L``."""
    return legendre.legval(np.asarray(t, float), kernel_coefficients(L))


def singular_part(x, q):
    """``log(|x - q| / 2) / (2 pi)``, equal to ``s(q . x)`` for unit vectors."""
    d = np.linalg.norm(np.asarray(x, float) - q, axis=-1)
    with np.errstate(divide="ignore"):
        return np.log(d / 2.0) / (2.0 * np.pi)


def sphere_distance(x, q):
    """Great-circle distance between unit vectors."""
    d = np.linalg.norm(np.asarray(x, float) - q, axis=-1)
    return 2.0 * np.arcsin(np.clip(d / 2.0, 0.0, 1.0))


# ---------------------------------------------------------------------------
# real spherical harmonics


def real_harmonics(x, L):
    """Orthonormal real harmonics up to degree ``L`` at unit vectors ``x``.

    Returns shape ``(L+1, 2L+1, ...)`` with order ``m`` stored at index
    ``m mod (2L+1)``; entries with ``|m| > l`` are zero.
    """
    x = np.asarray(x, float)
    theta = np.arccos(np.clip(x[..., 2], -1.0, 1.0))
    phi = np.arctan2(x[..., 1], x[..., 0])
    y = sph_harm_y_all(L, L, theta, phi)
    m = np.arange(-L, L + 1)
    m = np.concatenate([m[L:], m[:L]])  # wraparound order
    sign = np.where(m % 2 == 0, 1.0, -1.0)
    shape = (1, 2 * L + 1) + (1,) * (y.ndim - 2)
    m = m.reshape(shape)
    sign = sign.reshape(shape)
    pos = np.sqrt(2.0) * sign * y.real
    # Y_l^{-|m|} = (-1)^m conj(Y_l^{|m|}), so Im Y_l^{|m|} = -(-1)^m Im Y_l^{-|m|}
    neg = -np.sqrt(2.0) * y.imag
    return np.where(m > 0, pos, np.where(m < 0, neg, y.real))


# ---------------------------------------------------------------------------


@dataclass
class GeneratingFunction:
    """Solution of the distributional equation for given sources.

    ``smooth_coeffs`` holds the real-harmonic coefficients of the regular
    part ``G - sum_i eps_i s(q_i . x)``; the singular part is exact.
    ``log_coefficients`` and ``constants`` are the per-unit-weight ``C_i``
    and ``c_i`` of ``G ~ eps_i (c_i + C_i log dist)`` near ``q_i``.
    """

    singular_points: np.ndarray
    weights: np.ndarray
    band_limit: int
    smooth_coeffs: np.ndarray
    compensator: np.ndarray
    cap_radii: np.ndarray
    log_coefficients: np.ndarray = field(default=None)
    constants: np.ndarray = field(default=None)

    @property
    def n_points(self):
        return len(self.weights)

    def __call__(self, x, **kw):
        return evaluate(self, x, **kw)


class Expansion(NamedTuple):
    c: float
    C: float
    K: float
    rms: float


def solve_generating_function(points, weights, L=96, cap_radii=None, min_separation=1e-8):
    """Solve for the generating function of weighted point sources.

    Parameters
    ----------
    points : (n, 3) array
        Unit vectors ``q_i``; normalised on input.
    weights : (n,) array
        Positive ``eps_i``.
    L : int
        Band limit of the regular part, at least 8.
    cap_radii : (n,) array, optional
        Exclusion caps; default ``eps_i ** 0.75``.
    """
    q = np.atleast_2d(np.asarray(points, float))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    eps = np.atleast_1d(np.asarray(weights, float))
    if len(eps) != len(q):
        raise ValueError("points and weights differ in length")
    if L < 8:
        raise ValueError("band limit must be at least 8")
    if len(eps) and np.min(eps) < 0:
        raise ValueError("weights must be non-negative")
    for i in range(len(q)):
        for j in range(i):
            if np.linalg.norm(q[i] - q[j]) < min_separation:
                raise ValueError(f"singular points {j} and {i} coincide")
    ylm = real_harmonics(q, L) if len(q) else np.zeros((L + 1, 2 * L + 1, 0))
    ell = np.arange(L + 1)
    reg = regular_coefficients(L) * 4 * np.pi / (2 * ell + 1)
    coeffs = reg[:, None] * (ylm @ eps)
    compensator = -(3.0 / (4.0 * np.pi)) * (eps @ q if len(q) else np.zeros(3))
    # the degree-one source content must be cancelled exactly by J
    resid = np.linalg.norm(eps @ q * 3 / (4 * np.pi) + compensator) if len(q) else 0.0
    if resid > 1e-12 * max(1.0, float(np.sum(eps))):
        raise RuntimeError(f"degree-one cancellation failed, residual {resid:.3e}")
    if cap_radii is None:
        cap_radii = eps ** 0.75
    G = GeneratingFunction(q, eps, L, coeffs, compensator,
                           np.broadcast_to(np.asarray(cap_radii, float), eps.shape).copy())
    C, c = asymptotic_constants(G)
    G.log_coefficients, G.constants = C, c
    return G


def full_coefficients(G):
    """Real-harmonic coefficients of ``G`` itself up to the band limit."""
    L = G.band_limit
    ell = np.arange(L + 1)
    sing = singular_coefficients(L) * 4 * np.pi / (2 * ell + 1)
    ylm = real_harmonics(G.singular_points, L)
    return G.smooth_coeffs + sing[:, None] * (ylm @ G.weights)


def _regular_zonal(G, x):
    coef = regular_coefficients(G.band_limit)
    t = np.einsum("...k,ik->...i", x, G.singular_points)
    return legendre.legval(t, coef) @ G.weights


def evaluate(G, x, method="harmonic", check_caps=True):
    """Evaluate ``G`` at unit vectors ``x``.

    ``method="harmonic"`` synthesises the regular part from
    ``smooth_coeffs``; ``method="zonal"`` sums Legendre series about each
    source instead (cheaper for many points, same band-limited function).
    """
    x = np.asarray(x, float)
    if G.n_points == 0:
        return np.zeros(x.shape[:-1])
    x = x / np.linalg.norm(x, axis=-1, keepdims=True)
    dist = np.stack([sphere_distance(x, q) for q in G.singular_points], -1)
    if check_caps and np.any(dist < G.cap_radii):
        raise CapError("evaluation point inside an exclusion cap")
    sing = sum(e * singular_part(x, q) for e, q in zip(G.weights, G.singular_points))
    if method == "harmonic":
        ylm = real_harmonics(x, G.band_limit)
        reg = np.einsum("lm,lm...->...", G.smooth_coeffs, ylm)
    elif method == "zonal":
        reg = _regular_zonal(G, x)
    else:
        raise ValueError(f"unknown method {method!r}")
    return sing + reg


def lipschitz_bound(G):
    """Upper bound for the Lipschitz constant of ``G`` outside the caps."""
    coef = np.abs(regular_coefficients(G.band_limit))
    ell = np.arange(G.band_limit + 1)
    reg = np.sum(coef * ell * (ell + 1) / 2.0)
    # |d/dgamma log sin(gamma/2)| / (2 pi) = cot(gamma/2) / (4 pi)
    sing = 1.0 / (4 * np.pi * np.tan(G.cap_radii / 2.0))
    return float(np.sum(G.weights * (reg + sing)))


def asymptotic_constants(G):
    """Exact ``(C_i, c_i)`` per unit weight from the representation."""
    n = G.n_points
    C = np.full(n, LOG_COEFFICIENT)
    c = np.zeros(n)
    for i in range(n):
        q = G.singular_points[i]
        # regular part of every source at q_i plus the other singular parts
        val = _regular_zonal(G, q[None])[0]
        for j in range(n):
            if j != i:
                val += G.weights[j] * singular_part(q, G.singular_points[j])
        # log(sin(gamma/2)) = log(gamma/2) + O(gamma^2)
        c[i] = val / G.weights[i] - np.log(2.0) / (2 * np.pi) if G.weights[i] > 0 else np.nan
    return C, c


def _local_frame(q):
    a = np.array([1.0, 0, 0]) if abs(q[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(q, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(q, e1)


def annulus_points(q, r0, r1, n_radial=24, n_azimuth=32):
    """Gauss nodes in distance times uniform azimuth on an annulus about ``q``."""
    u, w = np.polynomial.legendre.leggauss(n_radial)
    gam = 0.5 * (r1 - r0) * u + 0.5 * (r1 + r0)
    phi = 2 * np.pi * np.arange(n_azimuth) / n_azimuth
    e1, e2 = _local_frame(q)
    g, p = np.meshgrid(gam, phi, indexing="ij")
    x = (np.cos(g)[..., None] * q
         + np.sin(g)[..., None] * (np.cos(p)[..., None] * e1 + np.sin(p)[..., None] * e2))
    weights = np.broadcast_to((0.5 * (r1 - r0) * w * np.sin(gam))[:, None], g.shape)
    return x, g, weights


def expand_near_singularity(G, i, annulus=None, values=None, max_rms=None):
    """Fit ``G / eps_i = c + C log dist`` on an annulus about ``q_i``.

    The annulus defaults to ``[r, 2r]`` with ``r`` the cap radius.  Returns
    the fitted ``(c, C)``, the remainder constant ``K = max |res| / dist^2``
    and the area-weighted rms residual.  ``values`` may supply a callable
    replacing ``G`` (for oracle comparisons).
    """
    q = G.singular_points[i]
    r0, r1 = annulus if annulus is not None else (G.cap_radii[i], 2 * G.cap_radii[i])
    x, gam, w = annulus_points(q, r0, r1)
    f = (values(x) if values is not None else evaluate(G, x, method="zonal", check_caps=False))
    f = f / G.weights[i]
    a = np.stack([np.ones(gam.size), np.log(gam).ravel()], 1)
    sw = np.sqrt(w.ravel())
    coef, *_ = np.linalg.lstsq(a * sw[:, None], f.ravel() * sw, rcond=None)
    res = f.ravel() - a @ coef
    K = float(np.max(np.abs(res) / gam.ravel() ** 2))
    rms = float(np.sqrt(np.sum(w.ravel() * res**2) / np.sum(w)))
    if max_rms is not None and rms > max_rms:
        raise RuntimeError(f"log fit residual {rms:.3e} exceeds {max_rms:.3e}; raise the band limit")
    return Expansion(c=float(coef[0]), C=float(coef[1]), K=K, rms=rms)
