"""Ambient Riemannian geometry on a single coordinate chart.

A :class:`ChartMetric` wraps a vectorised callable returning the metric
components ``g_ij`` at chart points of shape ``(..., 3)``.  Derivatives come
from exact callbacks when the caller provides them and otherwise from
Richardson-extrapolated central differences.

Curvature sign convention
-------------------------
``CurvatureBundle.riemann`` follows the convention in which the metric in
normal coordinates reads ``g_ij = delta_ij + (1/3) R_iljm x^l x^m + ...``.
In this convention ``Rm(X, Y, X, Y) = -K |X ^ Y|^2`` for sectional curvature
``K``, so the round sphere has *negative* ``R_1212``.  Ricci and scalar
curvature carry the usual signs (positive on spheres); hence
``Ric_bd = -g^{ac} R_abcd``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline


__all__ = [
    "ChartMetric",
    "NormalChart",
    "CurvatureBundle",
    "ChartExitError",
    "DerivativeError",
    "InjectivityError",
    "christoffel",
    "scalar_curvature",
    "scalar_gradient",
    "fd_gradient",
    "fd_hessian",
    "curvature_at",
    "curvature_derivative_at",
    "geodesic",
    "geodesic_path",
    "exp_batch",
    "log_map",
    "distance",
    "normal_chart",
    "parallel_transport",
    "orthonormalize",
]


class ChartExitError(ValueError):
    """A point or trajectory left the chart domain."""


class DerivativeError(RuntimeError):
    """Finite-difference refinement did not converge."""


class InjectivityError(RuntimeError):
    """The exponential map degenerates inside the requested normal chart."""


# ---------------------------------------------------------------------------
# finite differences

_D1_OFF = np.array([-2.0, -1.0, 1.0, 2.0])
_D1_W = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_D2_OFF = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
_D2_W = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _stencil_d1(fun, x, h):
    """Fourth-order first derivatives; returns (N, 3, ...)."""
    n = x.shape[0]
    pts = x[:, None, None, :] + h * _D1_OFF[None, None, :, None] * np.eye(3)[None, :, None, :]
    vals = fun(pts.reshape(-1, 3))
    vals = vals.reshape((n, 3, 4) + vals.shape[1:])
    return np.tensordot(_D1_W, np.moveaxis(vals, 2, 0), axes=1) / h


def _stencil_d2(fun, x, h):
    """Fourth-order second derivatives; returns (N, 3, 3, ...)."""
    n = x.shape[0]
    eye = np.eye(3)
    # pure second derivatives
    pure = x[:, None, None, :] + h * _D2_OFF[None, None, :, None] * eye[None, :, None, :]
    # mixed: 4x4 grid for each pair k<l
    pairs = [(0, 1), (0, 2), (1, 2)]
    mixed = []
    for k, l in pairs:
        grid = (_D1_OFF[:, None, None] * eye[k][None, None, :]
                + _D1_OFF[None, :, None] * eye[l][None, None, :])
        mixed.append(x[:, None, None, :] + h * grid[None])
    mixed = np.stack(mixed, axis=1)  # (N, 3pairs, 4, 4, 3)
    allpts = np.concatenate([pure.reshape(-1, 3), mixed.reshape(-1, 3)], axis=0)
    vals = fun(allpts)
    tail = vals.shape[1:]
    npure = n * 3 * 5
    vp = vals[:npure].reshape((n, 3, 5) + tail)
    vm = vals[npure:].reshape((n, 3, 4, 4) + tail)
    dpure = np.tensordot(_D2_W, np.moveaxis(vp, 2, 0), axes=1) / h**2
    dmix = np.einsum("a,b,npab...->np...", _D1_W, _D1_W, vm) / h**2
    out = np.zeros((n, 3, 3) + tail)
    for i in range(3):
        out[:, i, i] = dpure[:, i]
    for p, (k, l) in enumerate(pairs):
        out[:, k, l] = dmix[:, p]
        out[:, l, k] = dmix[:, p]
    return out


def _richardson(stencil, fun, x, h, rtol):
    coarse = stencil(fun, x, h)
    fine = stencil(fun, x, h / 2)
    best = (16.0 * fine - coarse) / 15.0
    err = np.max(np.abs(fine - coarse))
    scale = max(np.max(np.abs(best)), 1.0)
    if not np.isfinite(err) or err > rtol * scale:
        raise DerivativeError(
            f"finite-difference refinement not converged (change {err:.3e}, scale {scale:.3e})")
    return best


def fd_gradient(fun, x, h=1e-2, rtol=1e-3):
    """Richardson-extrapolated gradient of a vectorised function.

    ``fun`` maps ``(M, 3)`` points to ``(M, ...)`` values; the result has
    shape ``(N, 3, ...)`` for ``x`` of shape ``(N, 3)``.
    """
    return _richardson(_stencil_d1, fun, np.atleast_2d(x), h, rtol)


def fd_hessian(fun, x, h=1e-2, rtol=1e-3):
    """Richardson-extrapolated Hessian, shape ``(N, 3, 3, ...)``."""
    return _richardson(_stencil_d2, fun, np.atleast_2d(x), h, rtol)


# ---------------------------------------------------------------------------
# metric


class ChartMetric:
    """Smooth metric tensor on a ball in chart coordinates.

    Parameters
    ----------
    metric_eval : callable
        Vectorised map ``(..., 3) -> (..., 3, 3)``.
    center, radius : domain ball.  Operations raise :class:`ChartExitError`
        outside it instead of extrapolating.
    dmetric, d2metric : callable, optional
        Exact derivatives ``d_k g_ij`` with shape ``(..., 3, 3, 3)`` and
        ``d_k d_l g_ij`` with shape ``(..., 3, 3, 3, 3)``.  When absent they
        are estimated by finite differences with step ``fd_step``.
    normal : bool
        Flags a geodesic normal chart centred at ``center``.
    flat : bool
        Declares the metric Euclidean; used only as a fast path.
    scalar_field : callable, optional
        Exact ``x -> (R, dR)`` with ``dR`` the covariant gradient.  Used by
        :meth:`scalar` and :meth:`grad_scalar`; :func:`curvature_at` always
        takes the generic route through the Christoffel symbols.
    """

    dimension = 3

    def __init__(self, metric_eval, center=None, radius=np.inf, dmetric=None,
                 d2metric=None, normal=False, flat=False, name="custom",
                 fd_step=1e-2, derivative_order_available=4, scalar_field=None):
        self.metric_eval = metric_eval
        self.center = np.zeros(3) if center is None else np.asarray(center, float)
        self.radius = float(radius)
        self.dmetric = dmetric
        self.d2metric = d2metric
        self.normal = normal
        self.flat = flat
        self.name = name
        self.fd_step = fd_step
        self.derivative_order_available = derivative_order_available
        self.scalar_field = scalar_field

    def __repr__(self):
        return f"ChartMetric({self.name!r}, radius={self.radius})"

    # domain -------------------------------------------------------------
    def contains(self, x):
        x = np.asarray(x, float)
        return np.linalg.norm(x - self.center, axis=-1) < self.radius

    def check(self, x):
        x = np.asarray(x, float)
        if not np.all(self.contains(x)):
            raise ChartExitError(f"point outside chart domain of {self.name}")
        return x

    # components ----------------------------------------------------------
    def g(self, x):
        return np.asarray(self.metric_eval(np.asarray(x, float)), float)

    def g_inv(self, x):
        return np.linalg.inv(self.g(x))

    def dg(self, x):
        """``d_k g_ij`` with the derivative index first: shape (..., 3, 3, 3)."""
        x = np.asarray(x, float)
        if self.dmetric is not None:
            return np.asarray(self.dmetric(x), float)
        flat = x.reshape(-1, 3)
        out = fd_gradient(self.g, flat, self.fd_step)
        return out.reshape(x.shape[:-1] + (3, 3, 3))

    def ddg(self, x):
        """``d_k d_l g_ij``: shape (..., 3, 3, 3, 3)."""
        x = np.asarray(x, float)
        if self.d2metric is not None:
            return np.asarray(self.d2metric(x), float)
        flat = x.reshape(-1, 3)
        if self.dmetric is not None:
            out = fd_gradient(self.dg, flat, self.fd_step)
        else:
            out = fd_hessian(self.g, flat, self.fd_step)
        return out.reshape(x.shape[:-1] + (3, 3, 3, 3))

    def scalar(self, x):
        """Scalar curvature ``R`` (vectorised)."""
        if self.scalar_field is not None:
            return self.scalar_field(np.asarray(x, float))[0]
        return scalar_curvature(self, x)

    def d_scalar(self, x):
        """Covariant gradient ``dR`` (vectorised)."""
        if self.scalar_field is not None:
            return self.scalar_field(np.asarray(x, float))[1]
        return scalar_gradient(self, x, raised=False)

    def grad_scalar(self, x):
        """Raised gradient ``nabla R``."""
        return np.einsum("...ij,...j->...i", self.g_inv(x), self.d_scalar(x))

    def norm(self, x, v):
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, self.g(x), v))

    def inner(self, x, u, v):
        return np.einsum("...i,...ij,...j->...", u, self.g(x), v)


def _raise_first(ginv, low):
    """``0.5 g^kl low_ijl`` arranged as ``[..., k, i, j]``."""
    return 0.5 * np.einsum("...kl,...ijl->...kij", ginv, low)


def _inv3(g):
    """Batched inverse of 3x3 matrices by cofactors (much faster than LAPACK here)."""
    if g.size <= 576:
        # small batches are dominated by call overhead
        return np.linalg.inv(g)
    a, b, c = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    d, e, f = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    p, q, s = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    c00, c01, c02 = e * s - f * q, f * p - d * s, d * q - e * p
    det = a * c00 + b * c01 + c * c02
    out = np.stack([np.stack([c00, c * q - b * s, b * f - c * e], -1),
                    np.stack([c01, a * s - c * p, c * d - a * f], -1),
                    np.stack([c02, b * p - a * q, a * e - b * d], -1)], -2)
    return out / det[..., None, None]


def christoffel(metric, x):
    """Christoffel symbols ``Gamma^k_ij`` with shape (..., 3, 3, 3) [k, i, j]."""
    x = np.asarray(x, float)
    if metric.flat:
        return np.zeros(x.shape[:-1] + (3, 3, 3))
    ginv = _inv3(metric.g(x))
    dg = metric.dg(x)
    # d_i g_jl + d_j g_il - d_l g_ij, indexed [i, j, l]
    low = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
    return _raise_first(ginv, low)


def _christoffel_and_derivative(metric, x):
    """Return ``(Gamma, dGamma)`` with ``dGamma[..., m, k, i, j] = d_m Gamma^k_ij``."""
    x = np.asarray(x, float)
    shape = x.shape[:-1]
    if metric.flat:
        return np.zeros(shape + (3, 3, 3)), np.zeros(shape + (3, 3, 3, 3))
    ginv = _inv3(metric.g(x))
    dg = metric.dg(x)
    ddg = metric.ddg(x)
    low = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
    gam = _raise_first(ginv, low)
    # d_m of the lower combination; ddg[..., m, a, i, j] = d_m d_a g_ij
    dlow = (ddg + np.swapaxes(ddg, -3, -2)
            - np.moveaxis(ddg, -3, -1))
    gi = ginv[..., None, :, :]
    dginv = -(gi @ dg @ gi)
    # d_m Gamma^k_ij = 0.5 (d_m g^kl low_ijl + g^kl d_m low_ijl), as flat batched matmuls
    low9 = low.reshape(shape + (1, 9, 3))
    t1 = low9 @ np.swapaxes(dginv, -1, -2)                      # [m, ij, k]
    t2 = dlow.reshape(shape + (27, 3)) @ np.swapaxes(ginv, -1, -2)  # [mij, k]
    t = (t1.reshape(shape + (3, 3, 3, 3)) + t2.reshape(shape + (3, 3, 3, 3)))
    dgam = 0.5 * np.moveaxis(t, -1, -3)
    return gam, dgam


@dataclass
class CurvatureBundle:
    """Curvature data at one chart point (see module docstring for signs)."""

    point: np.ndarray
    metric: np.ndarray
    christoffel: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    scalar: float
    grad_scalar: np.ndarray

    def check_symmetries(self, rtol=1e-8):
        """Largest violation of the algebraic Riemann identities, relative."""
        rm = self.riemann
        scale = max(np.max(np.abs(rm)), 1e-300)
        bianchi = rm + np.einsum("ijkl->iklj", rm) + np.einsum("ijkl->iljk", rm)
        viol = max(
            np.max(np.abs(rm + np.einsum("ijkl->jikl", rm))),
            np.max(np.abs(rm + np.einsum("ijkl->ijlk", rm))),
            np.max(np.abs(rm - np.einsum("ijkl->klij", rm))),
            np.max(np.abs(bianchi)),
        )
        if scale < 1e-14:
            return viol
        return viol / scale


def _riemann_from(g, gam, dgam):
    """Paper-convention Riemann tensor, Ricci tensor and scalar curvature."""
    # standard R^a_{bcd} = d_c G^a_db - d_d G^a_cb + G^a_ce G^e_db - G^a_de G^e_cb
    up = (np.einsum("...cadb->...abcd", dgam)
          - np.einsum("...dacb->...abcd", dgam)
          + np.einsum("...ace,...edb->...abcd", gam, gam)
          - np.einsum("...ade,...ecb->...abcd", gam, gam))
    std = np.einsum("...ae,...ebcd->...abcd", g, up)
    ginv = np.linalg.inv(g)
    ricci = np.einsum("...abad->...bd", up)
    ricci = 0.5 * (ricci + np.swapaxes(ricci, -1, -2))
    scalar = np.einsum("...bd,...bd->...", ginv, ricci)
    return -std, ricci, scalar


def scalar_curvature(metric, x):
    """Scalar curvature at one or many points (vectorised)."""
    x = np.asarray(x, float)
    if metric.flat:
        return np.zeros(x.shape[:-1])
    gam, dgam = _christoffel_and_derivative(metric, x)
    _, _, scalar = _riemann_from(metric.g(x), gam, dgam)
    return scalar


def scalar_gradient(metric, x, raised=True):
    """Gradient of the scalar curvature; covariant ``dR`` if ``raised`` is False."""
    x = np.asarray(x, float)
    shape = x.shape[:-1]
    if metric.flat:
        return np.zeros(shape + (3,))
    flat = x.reshape(-1, 3)
    dr = fd_gradient(lambda y: scalar_curvature(metric, y), flat, metric.fd_step)
    dr = dr.reshape(shape + (3,))
    if not raised:
        return dr
    return np.einsum("...ij,...j->...i", metric.g_inv(x), dr)


def curvature_at(metric, x):
    """Christoffel symbols, Riemann, Ricci, scalar curvature and its gradient.

    Raises :class:`ChartExitError` outside the domain and ``ValueError`` if
    the metric is not positive definite at ``x``.
    """
    x = metric.check(np.asarray(x, float).reshape(3))
    g = metric.g(x)
    if np.max(np.abs(g - g.T)) > 1e-12 * max(1.0, np.max(np.abs(g))):
        raise ValueError("metric matrix is not symmetric")
    if np.min(np.linalg.eigvalsh(g)) <= 0:
        raise ValueError("metric lost positive definiteness")
    gam, dgam = _christoffel_and_derivative(metric, x)
    rm, ric, scal = _riemann_from(g, gam, dgam)
    grad = scalar_gradient(metric, x[None])[0]
    return CurvatureBundle(point=x, metric=g, christoffel=gam, riemann=rm,
                           ricci=ric, scalar=float(scal), grad_scalar=grad)


def curvature_derivative_at(metric, x):
    """Covariant derivatives of Rm and Ric at ``x``.

    Returns ``(nabla_rm, nabla_ric)`` with the derivative index last:
    ``nabla_rm[i, j, k, l, n] = R_ijkl;n``.
    """
    x = metric.check(np.asarray(x, float).reshape(3))

    def rm_ric(pts):
        gam, dgam = _christoffel_and_derivative(metric, pts)
        rm, ric, _ = _riemann_from(metric.g(pts), gam, dgam)
        return np.concatenate([rm.reshape(len(pts), -1), ric.reshape(len(pts), -1)], axis=1)

    d = fd_gradient(rm_ric, x[None], metric.fd_step)[0]  # (3, 81 + 9)
    d_rm = np.moveaxis(d[:, :81].reshape(3, 3, 3, 3, 3), 0, -1)
    d_ric = np.moveaxis(d[:, 81:].reshape(3, 3, 3), 0, -1)
    gam, dgam = _christoffel_and_derivative(metric, x)
    rm, ric, _ = _riemann_from(metric.g(x), gam, dgam)
    nrm = (d_rm
           - np.einsum("pni,pjkl->ijkln", gam, rm)
           - np.einsum("pnj,ipkl->ijkln", gam, rm)
           - np.einsum("pnk,ijpl->ijkln", gam, rm)
           - np.einsum("pnl,ijkp->ijkln", gam, rm))
    nric = (d_ric
            - np.einsum("pni,pj->ijn", gam, ric)
            - np.einsum("pnj,ip->ijn", gam, ric))
    return nrm, nric


# ---------------------------------------------------------------------------
# geodesics


def geodesic_path(metric, p, v, t, rtol=1e-10, atol=1e-12, max_step=np.inf):
    """Integrate a geodesic with DOP853; returns the ``solve_ivp`` result.

    The state is ``(x, xdot)``.  Leaving the chart domain terminates the
    integration and raises :class:`ChartExitError`.
    """
    p = metric.check(np.asarray(p, float))
    v = np.asarray(v, float)

    def rhs(_, y):
        x, w = y[:3], y[3:]
        gam = christoffel(metric, x)
        return np.concatenate([w, -np.einsum("kij,i,j->k", gam, w, w)])

    def leave(_, y):
        return metric.radius - np.linalg.norm(y[:3] - metric.center)

    leave.terminal = True
    sol = solve_ivp(rhs, (0.0, t), np.concatenate([p, v]), method="DOP853",
                    rtol=rtol, atol=atol, events=leave, dense_output=True,
                    max_step=max_step)
    if sol.status == 1:
        raise ChartExitError(f"geodesic left the chart at t={sol.t_events[0][0]:.6g}")
    if sol.status < 0:
        raise RuntimeError(f"geodesic integration failed: {sol.message}")
    return sol


def geodesic(metric, p, v, t, unit_tol=1e-10):
    """Follow the unit-speed geodesic from ``p`` along ``v`` for arclength ``t``.

    Returns the end point and the end tangent.
    """
    p = np.asarray(p, float)
    v = np.asarray(v, float)
    speed = metric.norm(p, v)
    if abs(speed - 1.0) > unit_tol:
        raise ValueError(f"initial tangent is not unit length (|v|_g = {speed!r})")
    if t == 0:
        return p.copy(), v.copy()
    sol = geodesic_path(metric, p, v, t)
    y = sol.y[:, -1]
    return y[:3], y[3:]


def exp_batch(metric, p, v, steps=64, jacobian=False, transport=None):
    """Batched exponential map with a fixed-step RK4 integrator.

    Fixed steps keep ``exp_p(v)`` a smooth function of ``v`` so it can be
    differentiated numerically.  ``p`` is ``(3,)`` or ``(N, 3)``; ``v`` is
    ``(N, 3)``.  With ``jacobian=True`` also returns ``d exp_p(v) / dv`` of
    shape ``(N, 3, 3)``.  ``transport`` is an optional ``(N, 3, m)`` array of
    vectors parallel transported along each geodesic.
    """
    v = np.atleast_2d(np.asarray(v, float))
    n = v.shape[0]
    p = np.broadcast_to(np.asarray(p, float), (n, 3)).copy()
    metric.check(p)
    h = 1.0 / steps
    use_var = jacobian and not metric.flat
    extra = transport is not None
    if metric.flat:
        y = p + v
        out = [y]
        if jacobian:
            out.append(np.broadcast_to(np.eye(3), (n, 3, 3)).copy())
        if extra:
            out.append(np.array(transport, float))
        return tuple(out) if len(out) > 1 else y

    def rhs(state):
        x, w = state[0], state[1]
        if use_var:
            gam, dgam = _christoffel_and_derivative(metric, x)
        else:
            gam = christoffel(metric, x)
        # gw[n, k, j] = Gamma^k_ij w^i
        gw = (w[:, None, None, :] @ gam)[:, :, 0, :]
        res = [w, -(gw @ w[:, :, None])[:, :, 0]]
        if use_var:
            ymat, wmat = state[2], state[3]
            res.append(wmat)
            # dww[n, l, k] = d_l Gamma^k_ij w^i w^j
            dww = ((w[:, None, None, None, :] @ dgam) @ w[:, None, None, :, None])[..., 0, 0]
            res.append(-(np.swapaxes(dww, 1, 2) @ ymat) - 2.0 * (gw @ wmat))
        if extra:
            res.append(-(gw @ state[-1]))
        return res

    state = [p, v.copy()]
    if use_var:
        state += [np.zeros((n, 3, 3)), np.broadcast_to(np.eye(3), (n, 3, 3)).copy()]
    if extra:
        state.append(np.array(transport, float))
    for _ in range(steps):
        k1 = rhs(state)
        k2 = rhs([s + 0.5 * h * k for s, k in zip(state, k1)])
        k3 = rhs([s + 0.5 * h * k for s, k in zip(state, k2)])
        k4 = rhs([s + h * k for s, k in zip(state, k3)])
        state = [s + h / 6.0 * (a + 2 * b + 2 * c + d)
                 for s, a, b, c, d in zip(state, k1, k2, k3, k4)]
        if not np.all(metric.contains(state[0])):
            raise ChartExitError("geodesic left the chart domain")
    out = [state[0]]
    if jacobian:
        out.append(state[2])
    if extra:
        out.append(state[-1])
    return tuple(out) if len(out) > 1 else state[0]


def log_map(metric, p, y, steps=64, tol=1e-13, max_iter=30, v0=None):
    """Inverse exponential map by Newton shooting; returns ``v`` with ``exp_p(v) = y``.

    ``v0`` is an optional starting guess (default: the second-order inverse
    ``d + Gamma(d, d) / 2`` with ``d = y - p``).  Newton steps start with the
    Jacobian of that expansion and switch to the exact variational Jacobian
    whenever the residual drops by less than a factor of ten.
    """
    y = np.atleast_2d(np.asarray(y, float))
    p = np.asarray(p, float)
    base = np.broadcast_to(p, y.shape)
    v = y - base
    if metric.flat:
        return v
    if v0 is not None:
        v = np.array(np.broadcast_to(v0, y.shape), float)
    else:
        v = v + 0.5 * np.einsum("nkij,ni,nj->nk", christoffel(metric, base), v, v)
    scale = max(np.max(np.abs(y - base)), 1e-300)
    # derivative of the second-order expansion p + v - Gamma(v, v) / 2
    gam = christoffel(metric, base)
    jac = np.eye(3) - np.einsum("nkij,ni->nkj", gam, v)
    end = exp_batch(metric, base, v, steps=steps)
    last = np.inf
    for _ in range(max_iter):
        res = end - y
        err = np.max(np.abs(res))
        if err < tol * max(scale, 1.0):
            return v
        if err > 0.1 * last:
            end, jac = exp_batch(metric, base, v, steps=steps, jacobian=True)
            res = end - y
        last = err
        v = v - np.linalg.solve(jac, res[..., None])[..., 0]
        end = exp_batch(metric, base, v, steps=steps)
    if np.max(np.abs(end - y)) > 1e3 * tol * max(scale, 1.0):
        raise RuntimeError("log map Newton iteration did not converge")
    return v


def distance(metric, p, y, steps=64):
    """Geodesic distance from ``p`` to each row of ``y`` (short geodesics)."""
    v = log_map(metric, p, y, steps=steps)
    base = np.broadcast_to(np.asarray(p, float), v.shape)
    return metric.norm(base, v)


def orthonormalize(metric, x, vectors):
    """Gram-Schmidt in the metric at ``x``; columns of ``vectors`` in order."""
    g = metric.g(np.asarray(x, float))
    out = np.array(vectors, float)
    for i in range(out.shape[1]):
        for j in range(i):
            out[:, i] -= (out[:, j] @ g @ out[:, i]) * out[:, j]
        out[:, i] /= np.sqrt(out[:, i] @ g @ out[:, i])
    return out


# ---------------------------------------------------------------------------
# normal charts


class NormalChart(ChartMetric):
    """Geodesic normal coordinates ``x -> exp_p(x^i E_i)`` of a source metric.

    The metric is the pull-back ``D^T g(exp) D`` with ``D`` obtained from the
    variational equations of the geodesic flow.  Degeneration of ``D``
    (conjugate points) raises :class:`InjectivityError`.
    """

    def __init__(self, base, point, frame, radius, steps=48, fd_step=2e-2):
        self.base = base
        self.point = np.asarray(point, float)
        self.frame = np.asarray(frame, float)
        self.steps = steps
        flat = base.flat
        super().__init__(self._pullback, center=np.zeros(3), radius=radius,
                         normal=True, flat=False, name=f"normal({base.name})",
                         fd_step=fd_step,
                         scalar_field=self._pulled_scalar if base.scalar_field else None)
        if flat:
            # pull-back of a flat metric under an affine isometry
            self.flat = bool(np.allclose(self.frame.T @ base.g(self.point) @ self.frame,
                                         np.eye(3), atol=1e-12))

    def to_base(self, x, jacobian=False):
        x = np.asarray(x, float)
        shape = x.shape[:-1]
        v = x.reshape(-1, 3) @ self.frame.T
        if jacobian:
            y, jac = exp_batch(self.base, self.point, v, steps=self.steps, jacobian=True)
            d = jac @ self.frame
            return y.reshape(shape + (3,)), d.reshape(shape + (3, 3))
        y = exp_batch(self.base, self.point, v, steps=self.steps)
        return y.reshape(shape + (3,))

    def from_base(self, y):
        y = np.asarray(y, float)
        shape = y.shape[:-1]
        v = log_map(self.base, self.point, y.reshape(-1, 3), steps=self.steps)
        x = np.linalg.solve(self.frame, v.T).T
        return x.reshape(shape + (3,))

    def audit(self, directions, samples=24):
        """Walk rays out to the chart radius looking for conjugate points.

        A Jacobi field vanishing at a conjugate point reverses direction, so
        ``D_k^T g D_{k+1}`` between consecutive samples acquires a negative
        eigenvalue.  This also catches conjugate points of even multiplicity
        where ``det D`` only touches zero.
        """
        directions = np.atleast_2d(np.asarray(directions, float))
        t = self.radius * np.arange(1, samples + 1) / (samples + 0.5)
        x = t[:, None, None] * directions[None]
        y, d = self.to_base(x, jacobian=True)
        g = self.base.g(y)
        cross = np.swapaxes(d[:-1], -1, -2) @ g[:-1] @ d[1:]
        cross = 0.5 * (cross + np.swapaxes(cross, -1, -2))
        lam = np.linalg.eigvalsh(cross)[..., 0]
        if np.any(lam <= 0):
            k, j = np.argwhere(lam <= 0)[0]
            raise InjectivityError(
                f"conjugate point near |x| = {t[k + 1]:.4g} along direction {directions[j]}")

    def _pulled_scalar(self, x):
        x = np.asarray(x, float)
        shape = x.shape[:-1]
        y, d = self.to_base(x.reshape(-1, 3), jacobian=True)
        rval, dr = self.base.scalar_field(y)
        dr = (np.swapaxes(d, -1, -2) @ dr[..., None])[..., 0]
        return rval.reshape(shape), dr.reshape(shape + (3,))

    def _pullback(self, x):
        x = np.asarray(x, float)
        shape = x.shape[:-1]
        flat = x.reshape(-1, 3)
        y, d = self.to_base(flat, jacobian=True)
        det = np.linalg.det(d)
        if np.any(det <= 1e-10):
            raise InjectivityError("exponential map degenerates (conjugate point) inside chart")
        g = np.swapaxes(d, -1, -2) @ self.base.g(y) @ d
        g = 0.5 * (g + np.swapaxes(g, -1, -2))
        return g.reshape(shape + (3, 3))


def normal_chart(metric, p, frame, radius=None, steps=48):
    """Normal coordinate chart of ``metric`` at ``p`` with orthonormal ``frame``.

    ``frame`` holds the vectors ``E_1, E_2, E_3`` as columns.  ``radius``
    defaults to a fraction of the distance from ``p`` to the source chart
    boundary.  The radius is audited by sampling the exponential map on a
    sphere of that radius; a conjugate point raises
    :class:`InjectivityError` rather than silently truncating the chart.
    """
    p = metric.check(np.asarray(p, float))
    frame = np.asarray(frame, float)
    gram = frame.T @ metric.g(p) @ frame
    if np.max(np.abs(gram - np.eye(3))) > 1e-10:
        raise ValueError("frame is not orthonormal at p")
    if radius is None:
        room = metric.radius - np.linalg.norm(p - metric.center)
        radius = 0.5 * room if np.isfinite(room) else 1.0
    chart = NormalChart(metric, p, frame, radius, steps=steps)
    chart.audit(_fibonacci_sphere(26))
    return chart


def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


# ---------------------------------------------------------------------------
# parallel transport


def parallel_transport(metric, curve, v, rtol=1e-11, atol=1e-13):
    """Transport ``v`` along a densely sampled path ``curve`` (shape (N, 3))."""
    curve = np.asarray(curve, float)
    v = np.asarray(v, float)
    metric.check(curve)
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    if curve.shape[0] < 2 or np.sum(seg) == 0.0:
        return v.copy()
    keep = np.concatenate([[True], seg > 0])
    curve = curve[keep]
    s = np.concatenate([[0.0], np.cumsum(seg[seg > 0])])
    closed = np.allclose(curve[0], curve[-1])
    spline = CubicSpline(s, curve, bc_type="periodic" if closed and len(s) > 3 else "not-a-knot")
    dspline = spline.derivative()

    def rhs(si, vec):
        x = spline(si)
        gam = christoffel(metric, x)
        return -np.einsum("kij,i,j->k", gam, dspline(si), vec)

    sol = solve_ivp(rhs, (0.0, s[-1]), v, method="DOP853", rtol=rtol, atol=atol)
    if sol.status != 0:
        raise RuntimeError(sol.message)
    return sol.y[:, -1]
