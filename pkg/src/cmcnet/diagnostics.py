"""Numerical audits of the glued surface.

Mean curvature comes from a per-vertex cubic height fit in a normal chart.
The fit gives the Euclidean (chart) quantities ``h0, B0, N0, H0``; the
metric ones follow from the closed-form corrections in ``P = g - I`` and
its first derivatives, which are exact in any normal chart.  An independent
route recomputes everything in the base chart from the Christoffel symbols.

Sign conventions: ``N`` is the outward unit normal and
``B_ij = -g(nabla_{E_i} E_j, N)``, so a round sphere of radius ``r`` has
``H = 2 / r``.

Balance diagnostics follow the finite-dimensional reduction of the gluing
construction: per-bead residuals, projections of ``H - 2/r`` against the
approximate co-kernel, and the six-by-six neck matrix.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .gluing import chi, chi_derivatives
from .manifold import (christoffel, curvature_at, curvature_derivative_at, exp_batch,
                       log_map)
from .mesh import check_watertight, sigma_radii, triangle_areas

__all__ = [
    "DegenerateNeighbourhood",
    "SingularMatrixError",
    "QuadratureError",
    "SurfaceGeometrySample",
    "BalanceReport",
    "neighbourhoods",
    "vertex_normals",
    "chart_jet",
    "chart_geometry",
    "discrete_mean_curvature",
    "weighted_sup_norm",
    "bead_balance_residual",
    "integrate",
    "projection_integrals",
    "neck_balance_matrix",
    "solve_neck_deformation",
    "synthetic_offset",
    "analytic_geometry",
    "cokernel_gram",
    "estimate_omega",
    "balance_report",
    "NeckMatrix",
    "ProjectionResult",
    "expansion_terms",
    "expansion_check",
    "fit_order",
    "write_sweep_csv",
]

MIN_NEIGHBOURS = 9
# neck matrix pattern: row s couples to deformation columns (i, i + 3)
PATTERN = np.zeros((3, 6), bool)
PATTERN[0, [0, 3]] = PATTERN[1, [1, 4]] = PATTERN[2, [2, 5]] = True
# a_i^- = PARITY_i a_i^+
PARITY = np.array([-1.0, 1.0, 1.0, 1.0, -1.0, -1.0])


class DegenerateNeighbourhood(ValueError):
    """A vertex neighbourhood cannot support the quadric fit."""

    def __init__(self, message, vertices=()):
        super().__init__(message)
        self.vertices = list(vertices)


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message, condition=np.inf):
        super().__init__(message)
        self.condition = condition


class QuadratureError(RuntimeError):
    """Projection integrals did not settle under refinement."""


# ---------------------------------------------------------------------------
# geometry samples


@dataclass
class SurfaceGeometrySample:
    """Per-vertex geometry in the chart each vertex was fitted in.

    Array fields are stacked over ``vertex``.  ``h0, B0, N0, H0`` are the
    Euclidean chart quantities, ``h, B, N, H`` the metric ones.
    """

    vertex: np.ndarray
    h: np.ndarray
    B: np.ndarray
    N: np.ndarray
    H: np.ndarray
    norm_B: np.ndarray
    h0: np.ndarray = None
    B0: np.ndarray = None
    N0: np.ndarray = None
    H0: np.ndarray = None
    chart: np.ndarray = None
    g: np.ndarray = None

    def __len__(self):
        return len(self.vertex)

    def full(self, n, fill=np.nan):
        """Mean curvature scattered into an array over all ``n`` vertices."""
        out = np.full(n, fill)
        out[self.vertex] = self.H
        return out


def neighbourhoods(triangles, n, rings=2):
    """Padded array of the ``rings``-ring neighbours of every vertex (pad = -1)."""
    t = np.asarray(triangles)
    i = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 1], t[:, 2], t[:, 0]])
    j = np.concatenate([t[:, 1], t[:, 2], t[:, 0], t[:, 0], t[:, 1], t[:, 2]])
    A = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    A.data[:] = 1.0
    R = A.copy()
    for _ in range(rings - 1):
        R = R + R @ A
    R = R.tolil()
    R.setdiag(0)
    R = R.tocsr()
    R.eliminate_zeros()
    R.sort_indices()
    counts = np.diff(R.indptr)
    out = np.full((n, max(int(counts.max()), 1)), -1)
    rows = np.repeat(np.arange(n), counts)
    cols = np.arange(len(R.indices)) - np.repeat(R.indptr[:-1], counts)
    out[rows, cols] = R.indices
    return out


def vertex_normals(positions, triangles):
    """Area-weighted vertex normals (coordinate cross products), unit length."""
    p = positions[triangles]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    vn = np.zeros_like(positions)
    for k in range(3):
        np.add.at(vn, triangles[:, k], fn)
    return vn / np.linalg.norm(vn, axis=1, keepdims=True)


def _tangent_frame(n):
    axes = np.eye(3)[np.argmin(np.abs(n), axis=1)]
    t1 = axes - np.sum(axes * n, axis=1, keepdims=True) * n
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    return t1, np.cross(n, t1)


def _height_fit(x, nb, n0, ids=None):
    """Cubic height fit ``z(u, v)`` over the tangent plane of ``n0``.

    ``x`` (m, 3) vertex coordinates, ``nb`` (m, K, 3) neighbours with NaN
    padding.  Returns the tangent frame and ``(z_u, z_v, z_uu, z_uv, z_vv)``.
    """
    t1, t2 = _tangent_frame(n0)
    d = nb - x[:, None, :]
    valid = np.isfinite(d[..., 0])
    d = np.where(valid[..., None], d, 0.0)
    scale = np.sum(np.linalg.norm(d, axis=-1), axis=1) / np.maximum(valid.sum(1), 1)
    d = d / scale[:, None, None]
    u = np.einsum("mkc,mc->mk", d, t1)
    v = np.einsum("mkc,mc->mk", d, t2)
    w = np.einsum("mkc,mc->mk", d, n0)
    A = np.stack([u, v, 0.5 * u * u, u * v, 0.5 * v * v,
                  u**3, u * u * v, u * v * v, v**3], -1) * valid[..., None]
    M = np.einsum("mki,mkj->mij", A, A)
    rhs = np.einsum("mki,mk->mi", A, w)
    ev = np.linalg.eigvalsh(M)
    bad = (valid.sum(1) < MIN_NEIGHBOURS) | (ev[:, 0] <= 1e-10 * ev[:, -1])
    if np.any(bad):
        who = np.nonzero(bad)[0] if ids is None else np.asarray(ids)[bad]
        raise DegenerateNeighbourhood(
            f"{int(bad.sum())} vertex neighbourhoods cannot support a quadric fit "
            f"(first: {int(who[0])})", who)
    c = np.linalg.solve(M, rhs[..., None])[..., 0]
    s = scale
    return t1, t2, n0, (c[:, 0], c[:, 1], c[:, 2] / s, c[:, 3] / s, c[:, 4] / s)


def _flat_geometry(t1, t2, n, z):
    zu, zv, zuu, zuv, zvv = z
    E = np.stack([t1 + zu[:, None] * n, t2 + zv[:, None] * n], 1)
    root = np.sqrt(1.0 + zu**2 + zv**2)
    N0 = (n - zu[:, None] * t1 - zv[:, None] * t2) / root[:, None]
    Z = np.stack([np.stack([zuu, zuv], -1), np.stack([zuv, zvv], -1)], -2)
    h0 = np.einsum("mia,mja->mij", E, E)
    B0 = -Z / root[:, None, None]
    return E, Z, N0, h0, B0


def chart_jet(metric, point, frame, x, steps=16, h=None):
    """``P = g_chart - I`` and ``dP[m, k, a, b] = d_k P_ab`` of the normal chart.

    The chart is ``x -> exp_point(frame @ x)``; its metric is the pull-back
    through the variational equations, differentiated by central
    differences with step ``h`` (default ``1e-3`` of the largest ``|x|``).
    """
    x = np.atleast_2d(np.asarray(x, float))
    m = len(x)
    frame = np.asarray(frame, float)
    if metric.flat:
        gp = frame.T @ metric.g(np.asarray(point, float)) @ frame
        P = np.broadcast_to(gp - np.eye(3), (m, 3, 3)).copy()
        return P, np.zeros((m, 3, 3, 3))
    if h is None:
        h = 1e-3 * max(float(np.max(np.linalg.norm(x, axis=1))), 1e-3)
    offs = np.concatenate([np.zeros((1, 3)), h * np.eye(3), -h * np.eye(3)])
    pts = (x[:, None, :] + offs[None]).reshape(-1, 3)
    y, jac = exp_batch(metric, point, pts @ frame.T, steps=steps, jacobian=True)
    D = jac @ frame
    g = np.swapaxes(D, -1, -2) @ metric.g(y) @ D
    g = 0.5 * (g + np.swapaxes(g, -1, -2))
    g = g.reshape(m, 7, 3, 3)
    P = g[:, 0] - np.eye(3)
    dP = (g[:, 1:4] - g[:, 4:7]) / (2.0 * h)
    return P, dP


def chart_geometry(E, Z, N0, h0, B0, P, dP):
    """Metric ``h, B, N, H, |B|`` from chart data and ``P``, ``dP``.

    With ``Pij = P(E_i, E_j)``, ``P0j = P(N0, E_j)``, ``P00 = P(N0, N0)`` and
    the lowered Christoffel combinations ``Pijt``, ``Pij0`` of ``P``:
    ``h = h0 + Pij``, ``N = (N0 - h^ij P0j E_i) / sqrt(D)`` with
    ``D = 1 + P00 - h^ij P0i P0j`` and
    ``B = sqrt(D) B0 - (Pij0 - h^kl P0k Pijl) / sqrt(D)``.
    """
    Pij = np.einsum("nia,nab,njb->nij", E, P, E)
    P0 = np.einsum("na,nab,njb->nj", N0, P, E)
    P00 = np.einsum("na,nab,nb->n", N0, P, N0)
    dPE = np.einsum("nik,nkab->niab", E, dP)
    dPN = np.einsum("nk,nkab->nab", N0, dP)
    T1 = np.einsum("niab,nja,ntb->nijt", dPE, E, E)
    Pijt = 0.5 * (T1 + np.swapaxes(T1, 1, 2) - np.moveaxis(T1, 1, 3))
    T2 = np.einsum("niab,nja,nb->nij", dPE, E, N0)
    Pij0 = 0.5 * (T2 + np.swapaxes(T2, 1, 2) - np.einsum("nab,nia,njb->nij", dPN, E, E))
    h = h0 + Pij
    hinv = np.linalg.inv(h)
    D = 1.0 + P00 - np.einsum("ni,nij,nj->n", P0, hinv, P0)
    sD = np.sqrt(D)
    w = -np.einsum("nij,nj->ni", hinv, P0)
    N = (N0 + np.einsum("ni,nia->na", w, E)) / sD[:, None]
    corr = Pij0 - np.einsum("nkl,nk,nijl->nij", hinv, P0, Pijt)
    B = sD[:, None, None] * B0 - corr / sD[:, None, None]
    H = np.einsum("nij,nij->n", hinv, B)
    nB = np.sqrt(np.einsum("nik,njl,nij,nkl->n", hinv, hinv, B, B))
    return h, B, N, H, nB


def _base_geometry(metric, x, E, Z, n):
    """Independent route: everything in base coordinates with Christoffels."""
    g = metric.g(x)
    gam = christoffel(metric, x)
    h = np.einsum("nia,nab,njb->nij", E, g, E)
    co = np.cross(E[:, 0], E[:, 1])
    co *= np.sign(np.sum(co * n, axis=1))[:, None]
    N = np.linalg.solve(g, co[..., None])[..., 0]
    N /= np.sqrt(np.einsum("na,nab,nb->n", N, g, N))[:, None]
    acc = Z[..., None] * n[:, None, None, :] + np.einsum("nkab,nia,njb->nijk", gam, E, E)
    B = -np.einsum("nijk,nkl,nl->nij", acc, g, N)
    hinv = np.linalg.inv(h)
    H = np.einsum("nij,nij->n", hinv, B)
    nB = np.sqrt(np.einsum("nik,njl,nij,nkl->n", hinv, hinv, B, B))
    return h, B, N, H, nB


def _chart_coords(metric, mesh, c, ids):
    """Coordinates of vertices ``ids`` in chart ``c`` (normal, not rescaled)."""
    out = np.empty((len(ids), 3))
    own = mesh.chart[ids] == c
    out[own] = mesh.local[ids[own]]
    if np.any(~own):
        point, frame = mesh.frames[c]
        v = log_map(metric, point, mesh.positions[ids[~own]], steps=mesh.resolution.steps)
        out[~own] = np.linalg.solve(frame, v.T).T
    return out


def _sample_in_chart(metric, mesh, c, vids, nbrs, normals, route):
    """Geometry of vertices ``vids`` fitted in chart ``c``."""
    need = np.unique(np.concatenate([vids, nbrs[vids][nbrs[vids] >= 0]]))
    lookup = np.full(mesh.n_vertices, -1)
    lookup[need] = np.arange(len(need))
    if route == "base":
        X = mesh.positions[need]
        n0 = normals[vids]
    else:
        X = _chart_coords(metric, mesh, c, need)
        point, frame = mesh.frames[c]
        # normals are covectors; the frame is orthonormal at the chart centre
        n0 = normals[vids] @ (metric.g(np.asarray(point, float)) @ frame)
        n0 /= np.linalg.norm(n0, axis=1, keepdims=True)
    nb_idx = nbrs[vids]
    nb = np.where((nb_idx >= 0)[..., None], X[np.maximum(lookup[nb_idx], 0)], np.nan)
    x = X[lookup[vids]]
    t1, t2, n, z = _height_fit(x, nb, n0, vids)
    E, Z, N0, h0, B0 = _flat_geometry(t1, t2, n, z)
    H0 = np.einsum("nij,nij->n", np.linalg.inv(h0), B0)
    if route == "base":
        h, B, N, H, nB = _base_geometry(metric, x, E, Z, n)
        g = metric.g(x)
    else:
        P, dP = chart_jet(metric, point, frame, x, steps=mesh.resolution.steps)
        h, B, N, H, nB = chart_geometry(E, Z, N0, h0, B0, P, dP)
        g = np.eye(3) + P
    return SurfaceGeometrySample(np.asarray(vids), h, B, N, H, nB, h0, B0, N0, H0,
                                 np.full(len(vids), c), g)


def _concat(samples, order):
    out = {}
    for name in ("vertex", "h", "B", "N", "H", "norm_B", "h0", "B0", "N0", "H0", "chart", "g"):
        out[name] = np.concatenate([getattr(s, name) for s in samples])
    pos = np.argsort(out["vertex"], kind="stable")
    return SurfaceGeometrySample(**{k: v[pos] for k, v in out.items()})


def discrete_mean_curvature(mesh, metric, vertices=None, route="chart", chart=None,
                            check=True, rings=2):
    """Per-vertex metric geometry of a triangulated surface.

    Parameters
    ----------
    mesh : GluedSurfaceMesh
        Watertight unless ``check`` is False (open test patches).
    vertices : array of int, optional
        Subset to evaluate (default all).
    route : {"chart", "base"}
        ``"chart"`` fits in each vertex's normal chart (or in ``chart`` when
        given) and applies the closed-form metric corrections;
        ``"base"`` fits in base coordinates and uses the Christoffel symbols
        directly.
    chart : int, optional
        Evaluate every vertex in this chart.

    Raises
    ------
    DegenerateNeighbourhood
        If a neighbourhood has fewer than nine points or is nearly collinear.
    """
    if check:
        check_watertight(mesh.triangles, mesh.n_vertices)
    n = mesh.n_vertices
    vids = np.arange(n) if vertices is None else np.asarray(vertices, int)
    nbrs = neighbourhoods(mesh.triangles, n, rings)
    normals = vertex_normals(mesh.positions, mesh.triangles)
    if route == "base":
        return _sample_in_chart(metric, mesh, -1, vids, nbrs, normals, "base")
    if route != "chart":
        raise ValueError(f"unknown route {route!r}")
    if chart is not None:
        return _sample_in_chart(metric, mesh, int(chart), vids, nbrs, normals, route)
    groups = [vids[mesh.chart[vids] == c] for c in np.unique(mesh.chart[vids])]
    return _concat([_sample_in_chart(metric, mesh, int(mesh.chart[g[0]]), g, nbrs, normals,
                                     route) for g in groups], None)


def weighted_sup_norm(mesh, H, nu=1.5, r=None):
    """``max zeta^(2 - nu) |H - 2/r|`` over the vertices where ``H`` is finite."""
    if not 1.0 < nu < 2.0:
        raise ValueError("nu must lie in (1, 2)")
    r = mesh.r if r is None else r
    H = np.asarray(H, float)
    ok = np.isfinite(H)
    return float(np.max(mesh.zeta[ok] ** (2.0 - nu) * np.abs(H[ok] - 2.0 / r)))


# ---------------------------------------------------------------------------
# bead balance


def bead_balance_residual(network, metric, omega, q):
    """``sum_necks weight * eta - Omega r^3 grad R`` at bead ``q``, frame components.

    ``eta`` is the unit direction from the bead toward each adjoining neck and
    ``weight`` the block weight of that neck.
    """
    bead = network.beads[q]
    F = np.asarray(bead.frame, float)
    total = np.zeros(3)
    for k, d in zip(bead.necks, bead.directions):
        total += network.necks[k].weight * np.linalg.solve(F, d)
    dR = metric.d_scalar(np.asarray(bead.point, float)[None])[0]
    return total - omega * network.r**3 * (F.T @ dR)


# ---------------------------------------------------------------------------
# quadrature and projections


def integrate(metric, mesh, values, areas=None):
    """Per-triangle rule: area times the mean of the vertex values.

    Exact for integrands linear on each triangle; the midpoint and vertex
    three-point rules coincide on such data.  ``values`` has the vertex
    count as leading dimension.
    """
    values = np.asarray(values, float)
    if areas is None:
        areas = triangle_areas(metric, mesh.positions, mesh.triangles)
    mean = values[mesh.triangles].mean(axis=1)
    return np.tensordot(areas, mean, axes=(0, 0))


def _bead_members(mesh, q, network):
    """Vertices whose sphere partition weight belongs to bead ``q``."""
    nb = len(network.beads)
    own = mesh.chart == q
    for k, nk in enumerate(network.necks):
        if q not in nk.beads:
            continue
        inchart = mesh.chart == nb + k
        x1 = mesh.local[:, 0]
        if nk.beads[0] == q:
            own |= inchart & (x1 < 0)
        if nk.beads[1] == q:
            own |= inchart & (x1 >= 0)
    return np.nonzero(own & (mesh.chi_sph > 0))[0]


def _sphere_model(x, side, tau, r, sigma):
    """Angles and cut-off jets of the model sphere behind one side of a neck.

    ``x`` are neck-chart points; the bead centre is ``-side (1 + tau/2) r e1``
    and ``gamma`` is measured from the direction toward the neck.
    """
    A = 1.0 + 0.5 * tau
    nu = -float(side)
    c = -A * r * nu * np.array([1.0, 0.0, 0.0])
    th = x - c
    th /= np.linalg.norm(th, axis=1, keepdims=True)
    cg = np.clip(nu * th[:, 0], -1.0, 1.0)
    sg = np.sqrt(np.maximum(1.0 - cg * cg, 0.0))
    phi = np.arctan2(th[:, 2], th[:, 1])
    d = r * np.sqrt(np.maximum(A * A + 1.0 - 2.0 * A * cg, 0.0))
    dd = np.where(d > 0, r * r * A * sg / np.where(d > 0, d, 1.0), 0.0)
    cot_dd = np.where(d > 0, r * r * A * cg / np.where(d > 0, d, 1.0), 0.0)
    ddd = np.where(d > 0, (r * r * A * cg - dd * dd) / np.where(d > 0, d, 1.0), 0.0)
    c0 = chi(d / sigma)
    c1, c2 = chi_derivatives(d / sigma)
    jet = (c0, c1 * dd / sigma, c2 * (dd / sigma) ** 2 + c1 * ddd / sigma, c1 * cot_dd / sigma)
    return dict(cg=cg, sg=sg, phi=phi, d=d, jet=jet, nu=nu, A=A)


def _lsph(model, psi, dpsi, ddpsi, lpsi, m, r):
    """``(Delta + 2/r^2)`` of ``chi * psi(gamma) * Y_m(phi)`` on the model sphere.

    ``lpsi`` is the analytic ``psi'' + cot psi' - m^2 psi / sin^2 + 2 psi``;
    the cut-off terms use ``cot(gamma) chi'`` in closed form.
    """
    c0, c1, c2, cot_c1 = model["jet"]
    radial = c0 * lpsi + c2 * psi + 2.0 * c1 * dpsi + cot_c1 * psi
    return radial / r**2


def _ell_fields(model, r):
    """``L_sph`` of the cut-off co-kernel fields ``chi * (1, x^2, x^3)``."""
    cg, sg, phi = model["cg"], model["sg"], model["phi"]
    one, zero = np.ones_like(cg), np.zeros_like(cg)
    l0 = _lsph(model, one, zero, zero, 2.0 * one, 0, r)
    l1 = _lsph(model, r * sg, r * cg, -r * sg, zero, 1, r)
    return np.stack([l0, l1 * np.cos(phi), l1 * np.sin(phi)], -1)


def _deformation_fields(model, r):
    """``L_sph`` of ``chi * g(X_i, N)`` for translations, dilation and rotations."""
    cg, sg, phi, nu, A = model["cg"], model["sg"], model["phi"], model["nu"], model["A"]
    zero = np.zeros_like(cg)
    t1 = _lsph(model, nu * cg, -nu * sg, -nu * cg, zero, 0, r)
    tt = _lsph(model, sg, cg, -sg, zero, 1, r)
    dil = _lsph(model, r * (1.0 - A * cg), r * A * sg, r * A * cg, 2.0 * r * np.ones_like(cg),
                0, r)
    rot = -nu * A * r * tt
    cp, sp = np.cos(phi), np.sin(phi)
    return np.stack([t1, tt * cp, tt * sp, dil, rot * cp, rot * sp], -1)


def _neck_sides(mesh, metric, network, k, sigma):
    """Vertex ids and neck-chart coordinates near neck ``k``, split by side."""
    nk = network.necks[k]
    r = network.r
    near = np.nonzero((mesh.nearest_neck == k)
                      & (mesh.neck_distance < 1.5 * sigma + nk.tau * r))[0]
    x = _chart_coords(metric, mesh, len(network.beads) + k, near)
    out = {}
    for side in (1, -1):
        m = (x[:, 0] >= 0) if side > 0 else (x[:, 0] < 0)
        out[side] = (near[m], x[m])
    return out


def _check_support(nk, r, sigma):
    if 0.5 * nk.tau * r >= 0.5 * sigma:
        raise ValueError(
            f"neck cut-off radius {sigma:.4g} does not exceed the gap tau r = {nk.tau * r:.4g}")


@dataclass
class ProjectionResult:
    """Projection values, optional refined values and Richardson error."""

    values: np.ndarray
    refined: np.ndarray = None
    error: np.ndarray = None

    @property
    def extrapolated(self):
        if self.refined is None:
            return self.values
        return self.refined + (self.refined - self.values) / 3.0


def _bead_projection(mesh, metric, network, q, H, sigma):
    ids = _bead_members(mesh, q, network)
    chi_sph = mesh.partitions[sigma][0] if sigma in mesh.partitions else mesh.chi_sph
    geo = discrete_mean_curvature(mesh, metric, vertices=ids, chart=q, check=False)
    J = np.einsum("nab,nb->na", geo.g, geo.N)
    vals = np.zeros((mesh.n_vertices, 3))
    Hq = geo.H if H is None else np.asarray(H)[ids]
    vals[ids] = ((Hq - 2.0 / network.r) * chi_sph[ids])[:, None] * J
    return integrate(metric, mesh, vals)


def _neck_projection(mesh, metric, network, k, H, sigma):
    nk = network.necks[k]
    _check_support(nk, network.r, sigma)
    out = np.zeros(6)
    e = np.asarray(H, float) - 2.0 / network.r
    for j, (side, (ids, x)) in enumerate(_neck_sides(mesh, metric, network, k, sigma).items()):
        model = _sphere_model(x, side, nk.tau, network.r, sigma)
        vals = np.zeros((mesh.n_vertices, 3))
        vals[ids] = e[ids, None] * _ell_fields(model, network.r)
        out[3 * j:3 * j + 3] = integrate(metric, mesh, vals)
    return out


def projection_integrals(mesh, metric, network, target, H=None, sigma=None, refined=None,
                         rtol=None, atol=0.0):
    """Projections of ``H - 2/r`` against the co-kernel of a bead or neck.

    Parameters
    ----------
    target : ("bead", q) or ("neck", k)
        Beads give ``pi_s = int (H - 2/r) chi_sph J_s`` (three values, ``J_s``
        the ``g``-component of the normal along the bead's chart axes).
        Necks give ``int (H - 2/r) L_sph(chi ell_s)`` on the plus then the
        minus side (six values, ``ell = 1, x^2, x^3``).
    H : array, optional
        Mean curvature per vertex (computed when absent).
    sigma : float, optional
        Cut-off radius; defaults to ``r/4`` for beads and ``r/32`` for necks.
    refined : (mesh, H or None), optional
        The same surface at the next resolution; enables the Richardson error
        ``|I_fine - I_coarse| / 3`` of the second-order rule.
    rtol, atol : float, optional
        Raise :class:`QuadratureError` when the error estimate exceeds
        ``atol + rtol * |I_fine|``.
    """
    kind, idx = target
    radii = sigma_radii(network.r)

    def run(m, h):
        if kind == "bead":
            return _bead_projection(m, metric, network, idx, h, radii[3] if sigma is None
                                    else sigma)
        if kind == "neck":
            if h is None:
                h = discrete_mean_curvature(m, metric).H
            return _neck_projection(m, metric, network, idx, h,
                                    radii[0] if sigma is None else sigma)
        raise ValueError(f"unknown projection target {target!r}")

    coarse = run(mesh, H)
    if refined is None:
        return ProjectionResult(coarse)
    fine = run(*refined)
    err = np.abs(fine - coarse) / 3.0
    if rtol is not None and np.any(err > atol + rtol * np.abs(fine)):
        raise QuadratureError(f"projection of {target} not converged: error {err.max():.3g}")
    return ProjectionResult(coarse, fine, err)


# ---------------------------------------------------------------------------
# neck balance matrix


@dataclass
class NeckMatrix:
    """Six-by-six neck matrix with rows ``(s, +)`` then ``(s, -)``.

    ``plus`` and ``minus`` are the 3 x 6 side blocks; ``condition`` is the
    2-norm condition number; ``off_pattern`` the largest entry outside the
    coupling pattern relative to the largest entry; ``parity`` the largest
    violation of ``M^-_is = PARITY_i M^+_is`` (relative).
    """

    matrix: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    condition: float
    off_pattern: float
    parity: float
    sigma: float


def neck_balance_matrix(mesh, metric, network, k, sigma=None, max_condition=1e12):
    """Quadrature of ``r int L_sph(chi g(X_i, N)) L_sph(chi ell_s)`` on both sides.

    ``X_1..X_3`` translate along the neck frame, ``X_4`` dilates about the
    neck centre, ``X_5, X_6`` rotate the neck axis toward ``E_2, E_3``.  All
    fields are pulled back radially from the model sphere of each side.

    Raises
    ------
    SingularMatrixError
        If the condition number exceeds ``max_condition``.
    """
    nk = network.necks[k]
    r = network.r
    sigma = sigma_radii(r)[0] if sigma is None else float(sigma)
    _check_support(nk, r, sigma)
    areas = triangle_areas(metric, mesh.positions, mesh.triangles)
    blocks = {}
    for side, (ids, x) in _neck_sides(mesh, metric, network, k, sigma).items():
        model = _sphere_model(x, side, nk.tau, r, sigma)
        ell = _ell_fields(model, r)
        phi = _deformation_fields(model, r)
        vals = np.zeros((mesh.n_vertices, 3, 6))
        vals[ids] = r * ell[:, :, None] * phi[:, None, :]
        blocks[side] = integrate(metric, mesh, vals, areas)
    M = np.vstack([blocks[1], blocks[-1]])
    big = np.max(np.abs(M))
    pattern = np.vstack([PATTERN, PATTERN])
    off = float(np.max(np.abs(M[~pattern])) / big)
    parity = float(np.max(np.abs(blocks[-1] - PARITY * blocks[1])) / big)
    cond = float(np.linalg.cond(M))
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularMatrixError(f"neck {k} matrix is singular (condition {cond:.3g})", cond)
    return NeckMatrix(M, blocks[1], blocks[-1], cond, off, parity, sigma)


def solve_neck_deformation(matrix, projections, r, reference=None):
    """Deformation ``a`` with ``M a = -r (pi - pi_ref)``.

    Under a normal displacement ``sum a_i chi g(X_i, N)`` the mean curvature
    changes by ``-L_sph`` of it, so ``a`` is the deformation carried by the
    surface relative to the reference; ``-a`` cancels it.
    """
    M = matrix.matrix if isinstance(matrix, NeckMatrix) else np.asarray(matrix, float)
    pi = np.asarray(projections, float)
    if reference is not None:
        pi = pi - np.asarray(reference, float)
    return np.linalg.solve(M, -r * pi)


def synthetic_offset(mesh, metric, network, k, a, sigma=None):
    """Linearised change ``-L_sph(sum a_i chi g(X_i, N))`` of ``H`` per vertex."""
    nk = network.necks[k]
    r = network.r
    sigma = sigma_radii(r)[0] if sigma is None else float(sigma)
    out = np.zeros(mesh.n_vertices)
    for side, (ids, x) in _neck_sides(mesh, metric, network, k, sigma).items():
        model = _sphere_model(x, side, nk.tau, r, sigma)
        out[ids] = -_deformation_fields(model, r) @ np.asarray(a, float)
    return out


# ---------------------------------------------------------------------------
# curvature expansion of H in a normal chart


def _frame_tensors(metric, point, frame):
    bundle = curvature_at(metric, point)
    F = np.asarray(frame, float)
    rm = np.einsum("abcd,ai,bj,ck,dl->ijkl", bundle.riemann, F, F, F, F)
    ric = F.T @ bundle.ricci @ F
    if metric.flat:
        return rm, ric, np.zeros((3,) * 5), np.zeros((3,) * 3)
    nrm, nric = curvature_derivative_at(metric, point)
    nrm = np.einsum("abcde,ai,bj,ck,dl,em->ijklm", nrm, F, F, F, F, F)
    nric = np.einsum("abc,ai,bj,ck->ijk", nric, F, F, F)
    return rm, ric, nrm, nric


# coefficient of nabla_N Rm(N, Y, N, Y) in the expansion: +1/12 from the
# third-order normal-coordinate metric; -1/6 is kept for comparison
NABLA_N_RM = 1.0 / 12.0
ALTERNATIVE_NABLA_N_RM = -1.0 / 6.0


def expansion_terms(tensors, Y, N0, E, h0, B0, nabla_n_rm=NABLA_N_RM):
    """Curvature expansion of ``H - H0`` through second order in ``Y``.

    ``H = (1 + Rm(N,Y,N,Y)/6 + nabla_Y Rm(N,Y,N,Y)/12) H0
    - (Rm(E_i,Y,E_j,Y)/3 + nabla_Y Rm(E_i,Y,E_j,Y)/6) B0^ij
    - 2/3 Ric(Y,N) - 1/2 nabla_Y Ric(Y,N) + 1/12 nabla_N Ric(Y,Y)
    + c nabla_N Rm(N,Y,N,Y)`` with ``c = nabla_n_rm``.

    Returns ``(leading, total)``: the ``Rm``/``Ric`` terms alone and with the
    covariant-derivative terms added, both excluding ``H0`` itself.
    """
    rm, ric, nrm, nric = tensors
    hinv = np.linalg.inv(h0)
    Bup = np.einsum("nik,njl,nkl->nij", hinv, hinv, B0)
    H0 = np.einsum("nij,nij->n", hinv, B0)
    rNYNY = np.einsum("abcd,na,nb,nc,nd->n", rm, N0, Y, N0, Y)
    drNYNY = np.einsum("abcde,na,nb,nc,nd,ne->n", nrm, N0, Y, N0, Y, Y)
    rEYEY = np.einsum("abcd,nia,nb,njc,nd->nij", rm, E, Y, E, Y)
    drEYEY = np.einsum("abcde,nia,nb,njc,nd,ne->nij", nrm, E, Y, E, Y, Y)
    ricYN = np.einsum("ab,na,nb->n", ric, Y, N0)
    dricYN = np.einsum("abc,na,nb,nc->n", nric, Y, N0, Y)
    dricYY_N = np.einsum("abc,na,nb,nc->n", nric, Y, Y, N0)
    drN_NYNY = np.einsum("abcde,na,nb,nc,nd,ne->n", nrm, N0, Y, N0, Y, N0)
    leading = (rNYNY / 6.0) * H0 - np.einsum("nij,nij->n", rEYEY / 3.0, Bup) \
        - 2.0 / 3.0 * ricYN
    total = leading + (drNYNY / 12.0) * H0 - np.einsum("nij,nij->n", drEYEY / 6.0, Bup) \
        - 0.5 * dricYN + dricYY_N / 12.0 + nabla_n_rm * drN_NYNY
    return leading, total


def _test_surface(kind, size, n=12, axis=None):
    """Analytic patch with derivatives: ``(X, Xu, Xv, Xuu, Xuv, Xvv, outward)``.

    ``size`` is the diameter.  Kinds: ``sphere`` (centred at the origin),
    ``disk`` (through the origin, normal ``axis``), ``graph`` (a cubic graph
    through the origin) and ``catenoid`` (waist ``size / 4`` about the origin).
    """
    s = 0.5 * size
    if kind == "sphere":
        th = np.arccos(np.linspace(0.9, -0.9, n))
        ph = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        T, P = [a.ravel() for a in np.meshgrid(th, ph, indexing="ij")]
        st, ct, sp, cp = np.sin(T), np.cos(T), np.sin(P), np.cos(P)
        X = s * np.stack([st * cp, st * sp, ct], -1)
        Xu = s * np.stack([ct * cp, ct * sp, -st], -1)
        Xv = s * np.stack([-st * sp, st * cp, 0 * st], -1)
        Xuu = -X
        Xuv = s * np.stack([-ct * sp, ct * cp, 0 * st], -1)
        Xvv = s * np.stack([-st * cp, -st * sp, 0 * st], -1)
        return X, Xu, Xv, Xuu, Xuv, Xvv, X / s
    if kind in ("disk", "graph"):
        a = np.array([0.0, 0.0, 1.0]) if axis is None else np.asarray(axis, float)
        a = a / np.linalg.norm(a)
        t1 = np.cross(a, np.eye(3)[np.argmin(np.abs(a))])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(a, t1)
        rho = s * np.linspace(0.2, 1.0, n)
        ph = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        R, P = [v.ravel() for v in np.meshgrid(rho, ph, indexing="ij")]
        u, v = R * np.cos(P), R * np.sin(P)
        if kind == "disk":
            z = zu = zv = zuu = zuv = zvv = 0.0 * u
        else:
            # curvature scale comparable to 1 / size
            k = 1.0 / size
            z = k * (u * u - 0.5 * v * v) + k * k * u * u * v
            zu, zv = 2 * k * u + 2 * k * k * u * v, -k * v + k * k * u * u
            zuu, zuv, zvv = 2 * k + 2 * k * k * v, 2 * k * k * u, -k + 0 * u
        o = np.ones_like(u)
        X = u[:, None] * t1 + v[:, None] * t2 + z[:, None] * a
        Xu = t1 * o[:, None] + zu[:, None] * a
        Xv = t2 * o[:, None] + zv[:, None] * a
        return (X, Xu, Xv, zuu[:, None] * a, zuv[:, None] * a, zvv[:, None] * a,
                np.broadcast_to(a, X.shape))
    if kind == "catenoid":
        w = 0.25 * size
        U = np.arccosh(2.0)
        uu = np.linspace(-U, U, n)
        ph = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        Uu, P = [v.ravel() for v in np.meshgrid(uu, ph, indexing="ij")]
        ch, sh, c, sn = np.cosh(Uu), np.sinh(Uu), np.cos(P), np.sin(P)
        X = w * np.stack([Uu, ch * c, ch * sn], -1)
        Xu = w * np.stack([np.ones_like(Uu), sh * c, sh * sn], -1)
        Xv = w * np.stack([0 * Uu, -ch * sn, ch * c], -1)
        Xuu = w * np.stack([0 * Uu, ch * c, ch * sn], -1)
        Xuv = w * np.stack([0 * Uu, -sh * sn, sh * c], -1)
        Xvv = w * np.stack([0 * Uu, -ch * c, -ch * sn], -1)
        out = np.stack([-sh, c, sn], -1)
        return X, Xu, Xv, Xuu, Xuv, Xvv, out
    raise ValueError(f"unknown test surface {kind!r}")


def analytic_geometry(metric, point, frame, kind, size, n=12, axis=None, steps=48):
    """Exact chart and metric geometry of an analytic test patch.

    Returns ``(Y, E, N0, h0, B0, H0, H)`` where ``H`` is the full metric mean
    curvature from the closed-form corrections with the exact chart metric.
    """
    X, Xu, Xv, Xuu, Xuv, Xvv, out = _test_surface(kind, size, n, axis)
    E = np.stack([Xu, Xv], 1)
    N0 = np.cross(Xu, Xv)
    N0 /= np.linalg.norm(N0, axis=1, keepdims=True)
    N0 *= np.sign(np.sum(N0 * out, axis=1))[:, None]
    Xij = np.stack([np.stack([Xuu, Xuv], 1), np.stack([Xuv, Xvv], 1)], 1)
    h0 = np.einsum("nia,nja->nij", E, E)
    B0 = -np.einsum("nija,na->nij", Xij, N0)
    H0 = np.einsum("nij,nij->n", np.linalg.inv(h0), B0)
    P, dP = chart_jet(metric, point, frame, X, steps=steps)
    _, _, _, H, _ = chart_geometry(E, None, N0, h0, B0, P, dP)
    return X, E, N0, h0, B0, H0, H


def expansion_check(metric, point, frame, kind="sphere", diameters=None, n=12, axis=None,
                    steps=48, min_order=2.7, nabla_n_rm=NABLA_N_RM):
    """Remainder of the curvature expansion of ``H`` over a dyadic diameter sweep.

    Returns a dict with per-diameter rows ``(D, max |H - H0|, leading error,
    remainder)`` and the fitted exponent of the remainder.  The remainder is
    ``max |H - H0 - total|`` with ``total`` from :func:`expansion_terms`.
    """
    diameters = (0.4, 0.2, 0.1, 0.05) if diameters is None else diameters
    tensors = _frame_tensors(metric, np.asarray(point, float), frame)
    rows = []
    for D in diameters:
        Y, E, N0, h0, B0, H0, H = analytic_geometry(metric, point, frame, kind, D, n, axis,
                                                    steps)
        lead, total = expansion_terms(tensors, Y, N0, E, h0, B0, nabla_n_rm)
        rows.append((float(D), float(np.max(np.abs(H - H0))),
                     float(np.max(np.abs(H - H0 - lead))),
                     float(np.max(np.abs(H - H0 - total)))))
    rows = np.array(rows)
    # a remainder at round-off level (flat metric, totally geodesic patches) has no order
    if np.all(rows[:, 3] <= 1e-9 / np.min(rows[:, 0])):
        return {"kind": kind, "rows": rows, "order": np.inf, "passed": True}
    try:
        order = fit_order(rows[:, 0], rows[:, 3])
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise RuntimeError(f"expansion fit failed on rows {rows.tolist()}") from exc
    return {"kind": kind, "rows": rows, "order": order, "passed": bool(order >= min_order)}


def fit_order(h, err):
    """Least-squares slope of ``log err`` against ``log h``."""
    h, err = np.asarray(h, float), np.asarray(err, float)
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


# ---------------------------------------------------------------------------
# co-kernel structure and constant fits


def cokernel_gram(mesh, metric, network, sigma=None):
    """Gram matrix of ``pi_{q,s}`` applied to ``chi_sph J_{q',s'}``.

    Rows and columns run over ``(bead, s)``.  Each bead's fields are
    evaluated in its own chart.
    """
    sigma = sigma_radii(network.r)[3] if sigma is None else sigma
    chi_sph = mesh.partitions[sigma][0] if sigma in mesh.partitions else mesh.chi_sph
    nb = len(network.beads)
    fields = np.zeros((mesh.n_vertices, 3 * nb))
    for q in range(nb):
        ids = _bead_members(mesh, q, network)
        geo = discrete_mean_curvature(mesh, metric, vertices=ids, chart=q, check=False)
        fields[ids, 3 * q:3 * q + 3] = chi_sph[ids, None] * np.einsum("nab,nb->na", geo.g,
                                                                      geo.N)
    # pi_{q,s}(chi J_{q',s'}) = int chi J_{q,s} chi J_{q',s'}
    prod = fields[:, :, None] * fields[:, None, :]
    return integrate(metric, mesh, prod)


def estimate_omega(rows):
    """Fit ``pi_s = C1 r sum(eps X_s) - C2 r^4 dR_s`` over sweep samples.

    ``rows`` are ``(r, eps_x (3,), dR (3,), pi (3,))`` per bead.  Returns
    ``(C1, C2, Omega_hat = C2 / C1, rms residual)``.
    """
    A, b = [], []
    for r, ex, dR, pi in rows:
        for s in range(3):
            A.append([r * ex[s], -(r**4) * dR[s]])
            b.append(pi[s])
    A, b = np.array(A), np.array(b)
    (c1, c2), *_ = np.linalg.lstsq(A, b, rcond=None)
    res = float(np.sqrt(np.mean((A @ [c1, c2] - b) ** 2)))
    return float(c1), float(c2), float(c2 / c1), res


# ---------------------------------------------------------------------------
# reports


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


@dataclass
class BalanceReport:
    """Balance diagnostics of one network and (optionally) its mesh.

    Lists are indexed by bead or neck id; a neck whose cut-off cannot reach
    the sphere carries ``None`` entries and a note.
    """

    r: float
    omega: float
    bead_residuals: list
    bead_projections: list = None
    neck_projections: list = None
    neck_matrices: list = None
    neck_deformations: list = None
    sup_norm: float = None
    sweeps: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=lambda: {"off_pattern": 1e-3,
                                                      "cokernel_off_diagonal": 1e-2,
                                                      "cokernel_cross_bead": 1e-3})

    def to_dict(self):
        return _plain({k: getattr(self, k) for k in self.__dataclass_fields__})

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def check(self, n_beads, n_necks):
        """Every bead and neck appears exactly once."""
        ok = len(self.bead_residuals) == n_beads
        for name in ("bead_projections",):
            v = getattr(self, name)
            ok &= v is None or len(v) == n_beads
        for name in ("neck_projections", "neck_matrices", "neck_deformations"):
            v = getattr(self, name)
            ok &= v is None or len(v) == n_necks
        return bool(ok)


def balance_report(network, metric, omega, mesh=None, H=None, nu=1.5, necks=True):
    """Assemble a :class:`BalanceReport`; mesh-based parts need ``mesh``."""
    res = [bead_balance_residual(network, metric, omega, q) for q in range(len(network.beads))]
    rep = BalanceReport(network.r, omega, res)
    if mesh is None:
        return rep
    if H is None:
        H = discrete_mean_curvature(mesh, metric).H
    rep.sup_norm = weighted_sup_norm(mesh, H, nu, network.r)
    rep.bead_projections = [projection_integrals(mesh, metric, network, ("bead", q), H).values
                            for q in range(len(network.beads))]
    if necks:
        rep.neck_projections, rep.neck_matrices, rep.neck_deformations = [], [], []
        for k in range(len(network.necks)):
            try:
                pi = projection_integrals(mesh, metric, network, ("neck", k), H).values
                M = neck_balance_matrix(mesh, metric, network, k)
            except (ValueError, SingularMatrixError) as exc:
                rep.notes[f"neck {k}"] = str(exc)
                rep.neck_projections.append(None)
                rep.neck_matrices.append(None)
                rep.neck_deformations.append(None)
                continue
            rep.neck_projections.append(pi)
            rep.neck_matrices.append(M.matrix)
            rep.neck_deformations.append(solve_neck_deformation(M, pi, network.r))
            rep.notes[f"neck {k} off_pattern"] = M.off_pattern
    return rep


def write_sweep_csv(rows, path=None, columns=None):
    """Write sweep rows (dicts) as CSV; returns the text.

    ``columns`` defaults to the keys of the first row.  Floats are written
    with ``repr`` so identical runs give identical bytes.
    """
    columns = list(rows[0].keys()) if columns is None else list(columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(row[c])) if isinstance(row.get(c), (float, np.floating))
                    else row.get(c, "") for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
