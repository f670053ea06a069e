"""Condensation curves: the pair (gamma, f) with nabla_T (f T) = Omega r^2 grad R.

Along an arclength-parametrised curve the system reads

    f nabla_T T = Omega r^2 (grad R)^perp,      f' = Omega r^2 <grad R, T>,

so ``f - Omega r^2 (R + c)`` is a first integral.  ``f`` is carried as an
ODE state and the first integral is monitored rather than imposed.

Reparametrising by ``ds = dt / f`` gives ``sigma' = f T`` and

    nabla_{sigma'} sigma' = Omega^2 r^4 (R + c) grad R,

the Euler-Lagrange equation of ``int |sigma'|^2 + Omega^2 r^4 (R + c)^2 ds``.
The functional and residual helpers below work in this ``s`` parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .manifold import (ChartExitError, _christoffel_and_derivative, christoffel,
                       fd_gradient, fd_hessian)

__all__ = [
    "CondensateCurve",
    "NetworkGraph",
    "CurveBlowUp",
    "TerminalError",
    "TerminalSeries",
    "shoot_curve",
    "terminal_start_expansion",
    "vertex_balance_residual",
    "vertex_balance_residual_componentwise",
    "functional_value",
    "euler_lagrange_residual",
    "nondegeneracy_spectrum",
    "s_parametrization",
    "chord",
]


class CurveBlowUp(RuntimeError):
    """``f`` reached zero inside the curve; ``partial`` holds what was computed."""

    def __init__(self, message, t_fail, partial=None):
        super().__init__(message)
        self.t_fail = t_fail
        self.partial = partial


class TerminalError(ValueError):
    """Terminal launch undefined because ``grad R`` vanishes."""


@dataclass
class CondensateCurve:
    """Sampled solution ``(gamma, f)`` in arclength ``t``.

    ``state(t)`` evaluates ``(x, T, f, s)`` anywhere on ``[0, length]``;
    ``s`` is the ``ds = dt/f`` parameter, measured from ``s_origin`` (the
    series hand-off point for terminal launches, else 0).
    """

    t: np.ndarray
    points: np.ndarray
    tangents: np.ndarray
    f: np.ndarray
    s: np.ndarray
    c: float
    r: float
    omega: float
    metric: object = field(repr=False)
    _dense: object = field(repr=False, default=None)
    terminal: bool = False
    series: object = field(repr=False, default=None)

    @property
    def length(self):
        return float(self.t[-1])

    def state(self, t):
        """Point, tangent, f and s at arclength(s) ``t``."""
        t = np.atleast_1d(np.asarray(t, float))
        out = np.empty((len(t), 8))
        lo = t < (self.series.delta if self.series is not None else -1.0)
        if np.any(~lo):
            out[~lo] = self._dense(t[~lo]).T
        if np.any(lo):
            x, tan = self.series.evaluate(t[lo])
            out[lo, :3], out[lo, 3:6] = x, tan
            out[lo, 6] = self.omega * self.r**2 * (self.metric.scalar(x) + self.c)
            out[lo, 7] = np.nan
        return out[:, :3], out[:, 3:6], out[:, 6], out[:, 7]

    def unit_speed_error(self):
        return float(np.max(np.abs(self.metric.norm(self.points, self.tangents) - 1.0)))

    def conservation_error(self):
        pred = self.omega * self.r**2 * (self.metric.scalar(self.points) + self.c)
        return float(np.max(np.abs(self.f - pred)))

    def reversed(self):
        """Same curve traversed from the other end (``s`` is not kept)."""
        L = self.length
        dense = self._dense

        def rev(t):
            y = dense(L - np.asarray(t))
            y = np.array(y)
            y[3:6] *= -1
            y[7] = np.nan
            return y

        return CondensateCurve(L - self.t[::-1], self.points[::-1], -self.tangents[::-1],
                               self.f[::-1], np.full_like(self.s, np.nan), self.c, self.r,
                               self.omega, self.metric, rev)


@dataclass
class NetworkGraph:
    """Curves (edges) and the vertices joining them.

    ``vertices`` is a list of ``(point, [(edge_index, at_start), ...])``.
    """

    edges: list
    vertices: list

    def validate(self, tol=1e-8, colinear_tol=1e-6):
        for point, incident in self.vertices:
            tangents = []
            for e, at_start in incident:
                curve = self.edges[e]
                end = curve.points[0] if at_start else curve.points[-1]
                if np.linalg.norm(end - point) > tol:
                    raise ValueError(f"edge {e} does not reach its vertex")
                tangents.append(curve.tangents[0] if at_start else -curve.tangents[-1])
            g = curve.metric.g(point)
            for i in range(len(tangents)):
                for j in range(i):
                    if abs(tangents[i] @ g @ tangents[j]) >= 1 - colinear_tol:
                        raise ValueError("incident tangents are co-linear at a vertex")
        return True


# ---------------------------------------------------------------------------
# shooting


def _rhs(metric, k):
    def rhs(_, y):
        x, T, f = y[:3], y[3:6], y[6]
        gam = christoffel(metric, x)
        dr = metric.d_scalar(x)
        g = metric.g(x)
        grad = np.linalg.solve(g, dr)
        a = dr @ T
        # project with |T|^2 so rounding drift in |T| is not amplified by 1/f
        acc = -np.einsum("kij,i,j->k", gam, T, T) + k * (grad - a / (T @ g @ T) * T) / f
        return np.concatenate([T, acc, [k * a, 1.0 / f]])

    return rhs


@dataclass
class TerminalSeries:
    """Power series launch ``x = p + x1 t + x2 t^2 + x3 t^3`` off a terminal point."""

    point: np.ndarray
    direction: np.ndarray
    coefficients: np.ndarray
    c: float
    delta: float = 0.0

    def evaluate(self, t):
        t = np.asarray(t, float)[..., None]
        x1, x2, x3 = self.coefficients
        x = self.point + x1 * t + x2 * t**2 + x3 * t**3
        tan = x1 + 2 * x2 * t + 3 * x3 * t**2
        return x, tan


def terminal_start_expansion(metric, p, r, omega, order=3):
    """Direction ``-grad R / |grad R|`` and a local series for the curve.

    ``f(0) = 0`` makes the curve equation singular at ``p``; the series
    matches powers of ``t`` in ``f (x'' + Gamma(x', x')) = Omega r^2 (grad R -
    <grad R, x'> x')`` using ``<grad R, x'> = d/dt R(x(t))``.
    """
    p = metric.check(np.asarray(p, float))
    g0 = metric.g(p)
    dr = metric.d_scalar(p[None])[0]
    grad0 = np.linalg.solve(g0, dr)
    norm = np.sqrt(dr @ grad0)
    scale = max(abs(metric.scalar(p[None])[0]), 1.0)
    if norm < 1e-10 * scale:
        raise TerminalError("grad R vanishes at the terminal point")
    x1 = -grad0 / norm
    a = dr @ x1  # = -|grad R|
    h = metric.fd_step

    def grad_field(y):
        return np.linalg.solve(metric.g(y), metric.d_scalar(y)[..., None])[..., 0]

    d2r = fd_gradient(metric.d_scalar, p[None], h)[0]          # [i, k] = d_i d_k R
    dgrad = fd_gradient(grad_field, p[None], h)[0]             # [i, k] = d_i G^k
    gam, dgam = _christoffel_and_derivative(metric, p)
    # order t: 4a x2 + 2 (dR . x2) x1 = G1 - a Gamma(x1,x1) - D2R[x1,x1] x1
    lin = 4 * a * np.eye(3) + 2 * np.outer(x1, dr)
    rhs2 = (x1 @ dgrad - a * np.einsum("kij,i,j->k", gam, x1, x1)
            - (x1 @ d2r @ x1) * x1)
    x2 = np.linalg.solve(lin, rhs2)
    coeffs = [x1, x2, np.zeros(3)]
    if order >= 3:
        d3r = fd_hessian(metric.d_scalar, p[None], h, rtol=1e-2)[0]   # [i, j, k]
        d2grad = fd_hessian(grad_field, p[None], h, rtol=1e-2)[0]     # [i, j, k] = d_i d_j G^k
        f2 = dr @ x2 + 0.5 * x1 @ d2r @ x1
        g2 = x2 @ dgrad + 0.5 * np.einsum("ijk,i,j->k", d2grad, x1, x1)
        dgam_x1 = np.einsum("m,mkij->kij", x1, dgam)
        rhs3 = (g2 - 4 * a * np.einsum("kij,i,j->k", gam, x1, x2)
                - a * np.einsum("kij,i,j->k", dgam_x1, x1, x1)
                - f2 * (6 * x2 + np.einsum("kij,i,j->k", gam, x1, x1))
                - 3 * (x1 @ d2r @ x2 + np.einsum("ijk,i,j,k->", d3r, x1, x1, x1) / 6.0) * x1)
        lin3 = 9 * a * np.eye(3) + 3 * np.outer(x1, dr)
        coeffs[2] = np.linalg.solve(lin3, rhs3)
    c = -float(metric.scalar(p[None])[0])
    return TerminalSeries(point=p, direction=x1, coefficients=np.array(coeffs), c=c)


def shoot_curve(metric, start, direction, f0, r, omega, length, n_samples=201,
                delta=None, rtol=1e-12, atol=1e-13, order=3, events=None):
    """Integrate the curve system from ``start`` for arclength ``length``.

    ``f0 = 0`` requests a terminal launch: ``direction`` must then be the
    unit vector ``-grad R / |grad R|`` (up to round-off) and a series of
    the given ``order`` carries the solution to ``delta`` (default
    ``1e-3 * length``) where the ODE takes over.

    Raises
    ------
    CurveBlowUp
        If ``f`` reaches zero; ``exc.partial`` is the curve up to there.
    ChartExitError
        If the curve leaves the chart.
    """
    start = metric.check(np.asarray(start, float))
    direction = np.asarray(direction, float)
    k = omega * r**2
    series = None
    if f0 == 0:
        series = terminal_start_expansion(metric, start, r, omega, order=order)
        grad_dir = series.direction
        if np.linalg.norm(direction - grad_dir) > 1e-6 * max(1.0, np.linalg.norm(direction)):
            raise ValueError("terminal launch direction must be -grad R/|grad R|")
        if k * (metric.d_scalar(start[None])[0] @ grad_dir) <= 0:
            raise CurveBlowUp("terminal launch gives f <= 0: Omega <grad R, T> must be positive",
                              0.0)
        delta = 1e-3 * length if delta is None else delta
        series.delta = delta
        x0, tan0 = series.evaluate(np.array([delta]))
        x0, tan0 = x0[0], tan0[0]
        tan0 = tan0 / metric.norm(x0, tan0)
        c = series.c
        fstart = k * (metric.scalar(x0[None])[0] + c)
        t0 = delta
    else:
        if f0 < 0:
            raise ValueError("f0 must be non-negative")
        speed = metric.norm(start, direction)
        if abs(speed - 1.0) > 1e-10:
            raise ValueError(f"direction is not unit length (|v|_g = {speed!r})")
        x0, tan0, fstart, t0 = start, direction, float(f0), 0.0
        c = f0 / k - float(metric.scalar(start[None])[0]) if k != 0 else 0.0

    f_floor = 1e-10 * max(abs(fstart), abs(k))

    def f_zero(_, y):
        return y[6] - f_floor

    f_zero.terminal = True

    def leave(_, y):
        return metric.radius - np.linalg.norm(y[:3] - metric.center)

    leave.terminal = True
    evs = [f_zero, leave] + list(events or [])
    y0 = np.concatenate([x0, tan0, [fstart, 0.0]])
    if k == 0:
        def rhs(_, y):
            x, T = y[:3], y[3:6]
            gam = christoffel(metric, x)
            return np.concatenate([T, -np.einsum("kij,i,j->k", gam, T, T),
                                   [0.0, 1.0 / y[6]]])
    else:
        rhs = _rhs(metric, k)
    sol = solve_ivp(rhs, (t0, length), y0, method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True, events=evs)
    t_end = sol.t[-1]
    tt = np.linspace(0.0, t_end, n_samples)
    if series is not None:
        tt = tt[tt >= t0]
        tt = np.concatenate([[0.0], tt]) if tt[0] > 0 else tt
    curve = _assemble(metric, sol, tt, c, r, omega, series, t0)
    if sol.status == 1:
        if len(sol.t_events[0]):
            raise CurveBlowUp(f"f reached zero at t = {t_end:.6g}", t_end, curve)
        if len(sol.t_events[1]):
            raise ChartExitError(f"curve left the chart at t = {t_end:.6g}")
    if sol.status < 0:
        if abs(sol.y[6, -1]) < 1e-6 * max(abs(fstart), abs(k)):
            raise CurveBlowUp(f"f collapsed to zero near t = {t_end:.6g}", t_end, curve)
        raise RuntimeError(sol.message)
    curve.events = sol.t_events[2:]
    return curve


def _assemble(metric, sol, tt, c, r, omega, series, t0):
    dense = sol.sol
    tt = np.clip(tt, 0.0, sol.t[-1])
    body = tt >= t0
    ys = np.empty((len(tt), 8))
    ys[body] = dense(tt[body]).T
    if np.any(~body):
        x, tan = series.evaluate(tt[~body])
        ys[~body, :3], ys[~body, 3:6] = x, tan
        ys[~body, 6] = omega * r**2 * (metric.scalar(x) + c)
        ys[~body, 7] = np.nan
    return CondensateCurve(tt, ys[:, :3], ys[:, 3:6], ys[:, 6], ys[:, 7], c, r, omega,
                           metric, dense, terminal=series is not None, series=series)


# ---------------------------------------------------------------------------
# vertex balance


def vertex_balance_residual(metric, p, tangents, f0s, r, omega):
    """``sum_i (f_i + Omega r^3 <grad R, T_i>) T_i - Omega r^3 grad R`` at ``p``."""
    p = np.asarray(p, float)
    tangents = np.atleast_2d(np.asarray(tangents, float))
    f0s = np.asarray(f0s, float)
    dr = metric.d_scalar(p[None])[0]
    grad = np.linalg.solve(metric.g(p), dr)
    k = omega * r**3
    coef = f0s + k * (tangents @ dr)
    return coef @ tangents - k * grad


def vertex_balance_residual_componentwise(metric, p, tangents, f0s, r, omega):
    """Second implementation path of :func:`vertex_balance_residual`."""
    p = np.asarray(p, float)
    g = metric.g(p)
    ginv = np.linalg.inv(g)
    dr = metric.d_scalar(p[None])[0]
    grad = [sum(ginv[i, j] * dr[j] for j in range(3)) for i in range(3)]
    out = [0.0, 0.0, 0.0]
    for T, f in zip(tangents, f0s):
        inner = sum(g[i, j] * grad[i] * T[j] for i in range(3) for j in range(3))
        for comp in range(3):
            out[comp] += (f + omega * r**3 * inner) * T[comp]
    for comp in range(3):
        out[comp] -= omega * r**3 * grad[comp]
    return np.array(out)


# ---------------------------------------------------------------------------
# functional in the s parameter


def s_parametrization(curve, n=4001):
    """Spline ``sigma(s)`` of a curve in the ``ds = dt/f`` parameter."""
    t0 = curve.series.delta if curve.series is not None else 0.0
    tt = np.linspace(t0, curve.length, n)
    x, _, _, s = curve.state(tt)
    return CubicSpline(s - s[0], x), float(s[-1] - s[0])


def chord(sigma, S):
    """Straight coordinate chord with the endpoints of ``sigma`` over ``[0, S]``."""
    a, b = sigma(0.0), sigma(S)
    return CubicSpline([0.0, S / 2, S], [a, 0.5 * (a + b), b])


def functional_value(metric, sigma, S, r, omega, c, panels=200, nodes=8):
    """``int_0^S |sigma'|^2 + Omega^2 r^4 (R(sigma) + c)^2 ds`` by panel Gauss rules."""
    u, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(0.0, S, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    s = (mid[:, None] + half[:, None] * u).ravel()
    ws = (half[:, None] * w).ravel()
    x = sigma(s)
    v = sigma(s, 1)
    kin = np.einsum("ni,nij,nj->n", v, metric.g(x), v)
    pot = (omega * r**2 * (metric.scalar(x) + c)) ** 2
    return float(ws @ (kin + pot))


def _bump(s, center, width):
    u = (s - center) / width
    return np.where(np.abs(u) < 1, (1 - u**2) ** 4, 0.0)


def euler_lagrange_residual(metric, sigma, S, r, omega, c, n_fields=32, seed=0, h=1e-4,
                            panels=400):
    """Largest normalised first variation over seeded bump perturbations.

    Each field is ``V(s) = b(s) v`` with a compact bump ``b`` inside
    ``(0, S)`` and a random coordinate direction ``v``.  The derivative of
    the functional along ``sigma + e V`` is taken by central differences
    and divided by the L2 norm of ``V``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    ss = np.linspace(0.0, S, 2001)
    base = sigma(ss)
    for _ in range(n_fields):
        width = S * rng.uniform(0.08, 0.25)
        center = rng.uniform(width, S - width)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        bump = _bump(ss, center, width)
        vals = []
        for sgn in (1.0, -1.0):
            pert = CubicSpline(ss, base + sgn * h * bump[:, None] * v)
            vals.append(functional_value(metric, pert, S, r, omega, c, panels=panels))
        deriv = (vals[0] - vals[1]) / (2 * h)
        vnorm = np.sqrt(np.trapezoid(bump**2, ss))
        worst = max(worst, abs(deriv) / vnorm)
    return worst


# ---------------------------------------------------------------------------
# nondegeneracy


def _discrete_gradient(metric, x, h, r, omega, c):
    """Gradient of the midpoint-rule functional over nodal positions ``x``."""
    d = np.diff(x, axis=0)
    m = 0.5 * (x[1:] + x[:-1])
    g = metric.g(m)
    dg = metric.dg(m)
    rval = metric.scalar(m)
    dr = metric.d_scalar(m)
    k = omega * r**2
    gd = np.einsum("nij,nj->ni", g, d)
    dmid = np.einsum("nkij,ni,nj->nk", dg, d, d) / h + h * 2 * k**2 * (rval + c)[:, None] * dr
    grad = np.zeros_like(x)
    grad[1:] += 2 * gd / h + 0.5 * dmid
    grad[:-1] += -2 * gd / h + 0.5 * dmid
    return grad


def nondegeneracy_spectrum(metric, curve, bc="fixed_endpoint", n=64, step=1e-6):
    """Singular values of the linearised curve operator on normal fields.

    The curve is resampled at ``n + 1`` nodes uniform in ``s``; the Hessian
    of the discretised functional is formed by coloured central differences
    of its exact gradient, scaled by the node spacing, and restricted to
    ``g``-orthonormal normal directions.  ``bc`` is ``"fixed_endpoint"`` or
    ``"balanced_vertex"`` (free endpoints).
    """
    if bc not in ("fixed_endpoint", "balanced_vertex"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    sigma, S = s_parametrization(curve)
    h = S / n
    x = sigma(np.linspace(0.0, S, n + 1))
    args = (h, curve.r, curve.omega, curve.c)
    free = np.arange(n + 1) if bc == "balanced_vertex" else np.arange(1, n)
    nv = 3 * len(free)
    hess = np.zeros((nv, nv))
    pos = {node: i for i, node in enumerate(free)}
    for color in range(3):
        nodes = free[free % 3 == color]
        for a in range(3):
            xp, xm = x.copy(), x.copy()
            xp[nodes, a] += step
            xm[nodes, a] -= step
            dgrad = (_discrete_gradient(metric, xp, *args)
                     - _discrete_gradient(metric, xm, *args)) / (2 * step)
            for node in nodes:
                col = 3 * pos[node] + a
                for nb in (node - 1, node, node + 1):
                    if nb in pos:
                        hess[3 * pos[nb]:3 * pos[nb] + 3, col] = dgrad[nb]
    hess = 0.5 * (hess + hess.T) / h
    tang = np.gradient(x, axis=0)
    q = np.zeros((nv, 2 * len(free)))
    for i, node in enumerate(free):
        g = metric.g(x[node])
        t = tang[node] / np.sqrt(tang[node] @ g @ tang[node])
        basis = [t]
        for e in np.eye(3):
            v = e - sum((b @ g @ e) * b for b in basis)
            nv_ = np.sqrt(v @ g @ v)
            if nv_ > 1e-6:
                basis.append(v / nv_)
            if len(basis) == 3:
                break
        q[3 * i:3 * i + 3, 2 * i] = basis[1]
        q[3 * i:3 * i + 3, 2 * i + 1] = basis[2]
    reduced = q.T @ hess @ q
    return np.sort(np.abs(np.linalg.eigvalsh(0.5 * (reduced + reduced.T))))
