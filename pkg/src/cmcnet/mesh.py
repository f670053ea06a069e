"""Triangulated model of the glued surface.

Every piece is meshed in its own rescaled normal chart (lengths divided by
``r``): blocks in the bead chart, necks and transition annuli in the neck
midpoint chart.  Pieces share their boundary rings, so welding is an index
identification and the result is watertight by construction.

Blocks are the graphs ``(1 - G(theta)) theta`` over the unit sphere minus
caps of angular radius ``eps_i^{3/4}``.  Necks are the deformed catenoids
over ``rho <= eb^{3/4}``.  Between the neck ring and the block cap ring a
transition annulus blends the neck graph into the block surface with the
quintic cut-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull

from .gluing import GraphabilityError, NeckSpec, chi, neck_graph, neck_point, rotation
from .manifold import exp_batch, log_map
from .spectral import evaluate, solve_generating_function

__all__ = [
    "SPHERE",
    "NECK",
    "TRANSITION_MINUS",
    "TRANSITION_PLUS",
    "MeshError",
    "Resolution",
    "MeshPatch",
    "GluedSurfaceMesh",
    "icosphere",
    "sigma_radii",
    "zeta_profile",
    "build_block_mesh",
    "build_neck_mesh",
    "neck_spec",
    "assemble",
    "chart_surface",
    "triangle_areas",
    "surface_area",
    "euler_characteristic",
    "cycle_rank",
    "edge_list",
    "check_watertight",
    "write_obj",
    "write_ply",
]

SPHERE, NECK, TRANSITION_MINUS, TRANSITION_PLUS = 0, 1, 2, 3
# catenoid parameter beyond which neck rings are checked as graphs (rho = 2 x waist)
GRAPH_U = float(np.arccosh(2.0))
REGION_NAMES = {SPHERE: "sphere", NECK: "neck", TRANSITION_MINUS: "transition-",
                TRANSITION_PLUS: "transition+"}


class MeshError(ValueError):
    """Degenerate block graph, colliding caps or a failed weld."""


@dataclass(frozen=True)
class Resolution:
    """Sampling parameters.

    ``n_phi`` angular samples on every neck ring, ``level`` icosahedral
    subdivision of the blocks, ``grading`` growth factor of the polar rings
    around caps, ``band_limit`` of the block generating functions and
    ``steps`` of the fixed-step exponential map.
    """

    n_phi: int = 64
    level: int = 4
    grading: float = 0.35
    band_limit: int = 48
    steps: int = 16

    def refined(self):
        return replace(self, n_phi=2 * self.n_phi, level=self.level + 1)


@dataclass
class MeshPatch:
    """One chart's piece: rescaled chart coordinates, ambient positions, triangles.

    ``rings`` lists ordered boundary loops (vertex indices), one per cap for
    a block and ``(minus, plus)`` for a neck.
    """

    kind: str
    local: np.ndarray
    positions: np.ndarray
    triangles: np.ndarray
    rings: list
    data: dict = field(default_factory=dict)


@dataclass
class GluedSurfaceMesh:
    """Welded mesh of the glued surface.

    ``local`` holds normal coordinates (not rescaled) in chart ``chart``;
    charts ``0 .. n_beads - 1`` are bead charts and ``n_beads + k`` is the
    chart of neck ``k``.  ``owner`` is the bead or neck a region label refers
    to.  ``partitions`` maps each sigma radius to ``(chi_sph, chi_neck)``.
    ``frames`` lists ``(point, frame)`` of every chart.
    """

    positions: np.ndarray
    triangles: np.ndarray
    chart: np.ndarray
    local: np.ndarray
    region: np.ndarray
    owner: np.ndarray
    chi_sph: np.ndarray
    chi_neck: np.ndarray
    zeta: np.ndarray
    r: float
    sigma: float
    resolution: Resolution
    n_beads: int
    partitions: dict = field(default_factory=dict)
    neck_distance: np.ndarray = None
    waist_distance: np.ndarray = None
    nearest_neck: np.ndarray = None
    patch: np.ndarray = None
    frames: list = None

    @property
    def n_vertices(self):
        return len(self.positions)


# ---------------------------------------------------------------------------
# small helpers


def icosphere(level):
    """Unit icosphere after ``level`` midpoint subdivisions."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    verts = list(v / np.linalg.norm(v, axis=1, keepdims=True))
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(new)
    return np.array(verts), f


def _icosphere_spacing(level):
    # edge length of the level-0 icosahedron is about 1.107 rad
    return 1.1071487 / 2**level


def sigma_radii(r):
    """``(sigma_1, sigma_2, sigma_3, sigma_4) = (r/32, r/16, r/8, r/4)``."""
    return (r / 32.0, r / 16.0, r / 8.0, r / 4.0)


def zeta_profile(x):
    """Monotone C^1 map equal to ``x`` below 1/4 and to 1 above 1.

    The slope rises linearly from 1 to 3/2 on ``[1/4, 5/8]`` and falls
    linearly to 0 on ``[5/8, 1]``.
    """
    x = np.asarray(x, float)
    a, b = 0.25, 0.375
    t1 = np.clip(x - a, 0.0, b)
    t2 = np.clip(x - a - b, 0.0, b)
    out = np.minimum(x, a) + t1 + 0.25 * t1**2 / b + 1.5 * t2 - 0.75 * t2**2 / b
    return np.where(x >= 1.0, 1.0, out)


def _perp_frame(q, hint=None):
    q = q / np.linalg.norm(q)
    if hint is None or np.linalg.norm(hint - (hint @ q) * q) < 1e-8:
        hint = np.eye(3)[np.argmin(np.abs(q))]
    a = hint - (hint @ q) * q
    a /= np.linalg.norm(a)
    return a, np.cross(q, a)


def _cap_points(q, a, b, gamma, phi):
    gamma, phi = np.broadcast_arrays(np.asarray(gamma, float), np.asarray(phi, float))
    return (np.cos(gamma)[..., None] * q
            + np.sin(gamma)[..., None] * (np.cos(phi)[..., None] * a + np.sin(phi)[..., None] * b))


def _angles(n):
    return 2.0 * np.pi * np.arange(n) / n


def _strip(inner, outer, flip):
    """Triangles between two rings of equal length, wrapping around."""
    inner, outer = np.asarray(inner), np.asarray(outer)
    i0, i1 = inner, np.roll(inner, -1)
    o0, o1 = outer, np.roll(outer, -1)
    t = np.concatenate([np.stack([i0, i1, o0], 1), np.stack([i1, o1, o0], 1)])
    return t[:, ::-1] if flip else t


def _to_ambient(metric, point, frame, local, r, steps):
    v = (r * local.reshape(-1, 3)) @ np.asarray(frame).T
    return exp_batch(metric, point, v, steps=steps).reshape(local.shape)


def _from_ambient(metric, point, frame, y, r, steps):
    v = log_map(metric, point, y.reshape(-1, 3), steps=steps)
    return (np.linalg.solve(frame, v.T).T / r).reshape(y.shape)


# ---------------------------------------------------------------------------
# blocks


def _cap_rings(gamma_c, n_phi, h, grading):
    """Polar rings ``(gamma, n, phase)`` grading from the cap out to spacing ``h``."""
    rings = [(gamma_c, n_phi, 0.0)]
    g, n = gamma_c, n_phi
    s = 2.0 * np.pi * np.sin(g) / n
    k = 0
    while s < h:
        g += 0.87 * s
        s = min(h, s * (1.0 + grading))
        n = int(min(n, max(6, round(2.0 * np.pi * np.sin(g) / s))))
        k += 1
        rings.append((g, n, np.pi * k / n))
    return rings, g + 0.6 * h


def build_block_mesh(metric, bead, G, r, resolution=None, ring_frames=None):
    """Triangulate the block ``(1 - G(theta)) theta`` of bead ``bead``.

    ``G`` lives on the unit sphere of the bead frame.  Caps of angular
    radius ``G.cap_radii`` are removed; the cap boundary loops are returned
    in ``rings`` in the order of ``G.singular_points`` and start at angle 0
    of ``ring_frames[j] = (a, b)``.

    Raises
    ------
    MeshError
        When ``1 - G <= 0`` on the block or two caps' graded zones collide.
    """
    res = resolution or Resolution()
    h = _icosphere_spacing(res.level)
    ico, _ = icosphere(res.level)
    q = G.singular_points
    frames = []
    keep = np.ones(len(ico), bool)
    ring_pts, ring_idx, zones = [], [], []
    for j in range(len(q)):
        if ring_frames is not None and ring_frames[j] is not None:
            a, b = ring_frames[j]
        else:
            a, b = _perp_frame(q[j])
        frames.append((a, b))
        rings, keep_out = _cap_rings(G.cap_radii[j], res.n_phi, h, res.grading)
        zones.append(keep_out)
        keep &= ico @ q[j] < np.cos(keep_out)
        for g, n, ph in rings:
            ring_pts.append(_cap_points(q[j], a, b, g, _angles(n) + ph))
            ring_idx.append((j, len(ring_pts) - 1))
    for i in range(len(q)):
        for j in range(i):
            sep = np.arccos(np.clip(q[i] @ q[j], -1.0, 1.0))
            if sep < zones[i] + zones[j]:
                raise MeshError(f"caps {j} and {i} too close for the block mesh "
                                f"(separation {sep:.3g} rad)")
    base = ico[keep]
    pts = [base] + ring_pts + [q]
    offsets = np.cumsum([0] + [len(p) for p in pts])
    allpts = np.concatenate(pts)
    hull = ConvexHull(allpts)
    tri = hull.simplices.copy()
    centre_ids = offsets[-2] + np.arange(len(q))
    cap_rings = []
    for j in range(len(q)):
        # ring 0 of cap j is the first ring block appended for that cap
        first = next(k for jj, k in ring_idx if jj == j)
        ring = offsets[1 + first] + np.arange(len(ring_pts[first]))
        fan = np.any(tri == centre_ids[j], axis=1)
        nbrs = set(np.unique(tri[fan])) - {centre_ids[j]}
        if nbrs != set(ring.tolist()):
            raise MeshError(f"cap {j} boundary does not match its ring")
        cap_rings.append(ring)
    tri = tri[~np.any(np.isin(tri, centre_ids), axis=1)]
    # outward orientation on the convex hull
    p0, p1, p2 = allpts[tri[:, 0]], allpts[tri[:, 1]], allpts[tri[:, 2]]
    inward = np.einsum("ij,ij->i", np.cross(p1 - p0, p2 - p0), p0 + p1 + p2) < 0
    tri[inward] = tri[inward][:, ::-1]
    if np.linalg.det(bead.frame) < 0:
        # a left-handed frame mirrors the chart
        tri = tri[:, ::-1]
    theta = allpts[: offsets[-2]]
    val = evaluate(G, theta, method="zonal", check_caps=False)
    if np.any(1.0 - val <= 0):
        raise MeshError("block graph degenerate: 1 - G <= 0")
    local = (1.0 - val)[:, None] * theta
    positions = _to_ambient(metric, bead.point, bead.frame, local, r, res.steps)
    return MeshPatch("block", local, positions, tri, cap_rings,
                     {"theta": theta, "G": G, "frames": frames})


def block_point(G, q, a, b, gamma, phi):
    """Rescaled block point ``(1 - G) theta`` at polar angles about ``q``."""
    theta = _cap_points(q, a, b, gamma, phi)
    return (1.0 - evaluate(G, theta, method="zonal", check_caps=False))[..., None] * theta


# ---------------------------------------------------------------------------
# necks


def neck_spec(network, k):
    """:class:`NeckSpec` of neck ``k`` of a bead network."""
    nk = network.necks[k]
    c, C, cp, Cp = network.constants
    return NeckSpec(nk.eps_flat, 0.5 * (cp / Cp - c / C), nk.weight, nk.eps_flat / Cp,
                    nk.tau, tuple(network.constants), np.asarray(nk.deformation, float))


def _neck_u(spec, n_phi):
    e = spec.deformation[3]
    scale = (1.0 + e) * spec.eps_flat
    U = np.arccosh(max(spec.cutoff_radius / scale, 1.0 + 1e-9))
    m = max(2, int(np.ceil(U / (2.0 * np.pi / n_phi))))
    return np.linspace(-U, U, 2 * m + 1)


def build_neck_mesh(metric, neck, resolution=None, r=1.0, midpoint=None, frame=None):
    """Triangulate a deformed catenoid neck over ``rho <= eb^{3/4}``.

    ``neck`` is a :class:`NeckSpec`.  The tube is sampled on rings of
    constant catenoid parameter ``u`` (the waist is ``u = 0``), uniform in
    ``u`` so the ring radii grow geometrically.  Rings with ``cosh u >= 2``
    are verified against :func:`neck_graph`; ``data["graph"]`` lists their
    vertices.  The chart is centred at
    ``midpoint`` with orthonormal ``frame`` (default: origin, identity).

    Raises
    ------
    GraphabilityError
        If either end is not a graph over the midpoint plane.
    """
    res = resolution or Resolution()
    midpoint = np.zeros(3) if midpoint is None else np.asarray(midpoint, float)
    frame = np.eye(3) if frame is None else np.asarray(frame, float)
    u = _neck_u(neck, res.n_phi)
    phi = _angles(res.n_phi)
    U, P = np.meshgrid(u, phi, indexing="ij")
    local = neck_point(neck.deformation, neck.eps_flat, neck.d_flat, U, P)
    mid = len(u) // 2
    # a tilted neck is vertical near its waist; the graphs are needed only
    # from twice the waist radius outwards
    graph_rows = np.abs(u) >= GRAPH_U
    for side in (-1, 1):
        F = neck_graph(neck.deformation, neck.eps_flat, neck.d_flat, side)
        pts = local[graph_rows & (np.sign(u) == side)].reshape(-1, 3)
        if np.max(np.abs(F(pts[:, 1:]) - pts[:, 0])) > 1e-9 * neck.eps_flat:
            raise GraphabilityError("neck end is not the graph of its own graphing function")
    idx = np.arange(len(u) * res.n_phi).reshape(len(u), res.n_phi)
    tri = np.concatenate([_strip(idx[k], idx[k + 1], flip=np.linalg.det(frame) < 0)
                          for k in range(len(u) - 1)])
    flat = local.reshape(-1, 3)
    positions = _to_ambient(metric, midpoint, frame, flat, r, res.steps)
    return MeshPatch("neck", flat, positions, tri, [idx[0], idx[-1]],
                     {"u": u, "phi": phi, "spec": neck, "waist": idx[mid],
                      "graph": idx[graph_rows].ravel()})


# ---------------------------------------------------------------------------
# assembly


def _waist_distance(spec, x):
    d1, d2, d3, e, t2, t3 = spec.deformation
    R = rotation(t2, t3)
    scale = (1.0 + e) * spec.eps_flat
    centre = scale * R @ np.array([spec.d_flat + d1, d2, d3])
    normal = R[:, 0]
    rel = x - centre
    axial = rel @ normal
    radial = np.linalg.norm(rel - axial[..., None] * normal, axis=-1)
    return np.hypot(axial, radial - scale)


def _bead_caps(network, b):
    """Cap directions, weights and ring frames of bead ``b`` in its own frame.

    Ring angles are measured in the neck frame's ``(E2, E3)`` so neck rings
    and cap rings line up on both sides of every neck.
    """
    bead = network.beads[b]
    q = np.array([np.linalg.solve(bead.frame, d) for d in bead.directions])
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w = np.array([network.necks[k].weight for k in bead.necks])
    frames = []
    for qj, k in zip(q, bead.necks):
        E = np.linalg.solve(bead.frame, network.necks[k].frame[:, 1:])
        a = E[:, 0] - (E[:, 0] @ qj) * qj
        a /= np.linalg.norm(a)
        c = E[:, 1] - (E[:, 1] @ qj) * qj - (E[:, 1] @ a) * a
        frames.append((a, c / np.linalg.norm(c)))
    return q, w, frames


def assemble(metric, network, resolution=None, sigma=None):
    """Weld blocks, necks and transition annuli into one watertight mesh.

    Region labels and the partition of unity use the radius ``sigma``
    (default ``r / 4``); values for all four sigma radii are kept in
    ``partitions``.

    Raises
    ------
    MeshError
        On a degenerate block, colliding caps, a weld mismatch or
        overlapping neck regions.
    """
    res = resolution or Resolution()
    r = network.r
    sigma = sigma_radii(r)[3] if sigma is None else float(sigma)
    nb = len(network.beads)
    verts, charts, locals_, patch_ids, owners = [], [], [], [], []
    tris = []
    count = 0

    def add(patch_pos, local, chart, owner, pid):
        nonlocal count
        verts.append(patch_pos)
        locals_.append(r * local)
        charts.append(np.full(len(patch_pos), chart))
        owners.append(np.full(len(patch_pos), owner))
        patch_ids.append(np.full(len(patch_pos), pid))
        start = count
        count += len(patch_pos)
        return start

    blocks, block_start, caps = [], [], []
    for b, bead in enumerate(network.beads):
        q, w, frames = _bead_caps(network, b)
        G = solve_generating_function(q, w, L=res.band_limit)
        patch = build_block_mesh(metric, bead, G, r, res, frames)
        blocks.append(patch)
        caps.append((q, frames, G))
        s = add(patch.positions, patch.local, b, b, len(block_start))
        block_start.append(s)
        tris.append(patch.triangles + s)

    necks, neck_start, specs = [], [], []
    pid = nb
    for k, nk in enumerate(network.necks):
        spec = neck_spec(network, k)
        patch = build_neck_mesh(metric, spec, res, r, nk.midpoint, nk.frame)
        specs.append(spec)
        necks.append(patch)
        s = add(patch.positions, patch.local, nb + k, k, pid)
        pid += 1
        neck_start.append(s)
        tris.append(patch.triangles + s)

    trans = []
    for k, nk in enumerate(network.necks):
        spec = specs[k]
        for side, b in ((-1, nk.beads[0]), (1, nk.beads[1])):
            bead = network.beads[b]
            j = [i for i, kk in enumerate(bead.necks) if kk == k]
            # a bead meeting the same neck twice only arises for two-bead loops
            j = j[0] if side < 0 or len(j) == 1 else j[1]
            q, frames, G = caps[b]
            a, bb = frames[j]
            n_phi = res.n_phi
            phi = _angles(n_phi)
            gamma_c = G.cap_radii[j]
            rho_c = spec.cutoff_radius
            outer = block_point(G, q[j], a, bb, gamma_c, phi)
            rho_cap = np.linalg.norm(np.cross(outer, q[j]), axis=-1)
            if np.min(rho_cap) <= 1.05 * rho_c:
                raise MeshError(f"neck {k} cut-off radius reaches the block cap")
            K = max(2, int(np.ceil(np.log(np.mean(rho_cap) / rho_c) / (2.0 * np.pi / n_phi))))
            frac = np.arange(1, K) / K
            rho_t = rho_c * (rho_cap[None, :] / rho_c) ** frac[:, None]
            gam = np.arcsin(np.clip(rho_t, 0.0, 1.0))
            for _ in range(4):
                X = block_point(G, q[j], a, bb, gam, phi[None, :])
                gam = np.arcsin(np.clip(rho_t / np.linalg.norm(X, axis=-1), 0.0, 1.0))
            X = block_point(G, q[j], a, bb, gam, phi[None, :])
            amb = _to_ambient(metric, bead.point, bead.frame, X, r, res.steps)
            B = _from_ambient(metric, nk.midpoint, nk.frame, amb, r, res.steps)
            F = neck_graph(spec.deformation, spec.eps_flat, spec.d_flat, side)
            wts = chi(0.5 + 0.5 * frac)[:, None]
            x1 = wts * F(B[..., 1:]) + (1.0 - wts) * B[..., 0]
            loc = np.concatenate([x1[..., None], B[..., 1:]], -1).reshape(-1, 3)
            pos = _to_ambient(metric, nk.midpoint, nk.frame, loc, r, res.steps)
            s = add(pos, loc, nb + k, k, pid)
            pid += 1
            inner_ring = necks[k].rings[0 if side < 0 else 1] + neck_start[k]
            outer_ring = blocks[b].rings[j] + block_start[b]
            rings = [inner_ring] + [s + np.arange(n_phi) + i * n_phi for i in range(K - 1)] \
                + [outer_ring]
            # minus side rings run against the tube's u direction
            flip = (side < 0) != (np.linalg.det(nk.frame) < 0)
            for r0, r1 in zip(rings[:-1], rings[1:]):
                tris.append(_strip(r0, r1, flip))
            trans.append((k, side, s, K - 1))

    positions = np.concatenate(verts)
    triangles = np.concatenate(tris).astype(np.int64)
    local = np.concatenate(locals_)
    chart = np.concatenate(charts)
    owner = np.concatenate(owners)
    patch = np.concatenate(patch_ids)
    check_watertight(triangles, len(positions))

    # distances to neck midpoints (normal coordinates give them exactly)
    n = len(positions)
    dist = np.full(n, np.inf)
    wdist = np.full(n, np.inf)
    nearest = np.full(n, -1)
    zeta = np.full(n, r)
    partitions = {s: np.zeros(n) for s in sigma_radii(r) + (sigma,)}
    for k, nk in enumerate(network.necks):
        spec = specs[k]
        ids, xs = [], []
        s = neck_start[k]
        ids.append(s + np.arange(len(necks[k].local)))
        xs.append(necks[k].local)
        for kk, side, st, rows in trans:
            if kk == k:
                ids.append(st + np.arange(rows * res.n_phi))
                xs.append(local[ids[-1]] / r)
        for side, b in ((-1, nk.beads[0]), (1, nk.beads[1])):
            bead = network.beads[b]
            j = bead.necks.index(k)
            q = caps[b][0][j]
            est = np.linalg.norm(blocks[b].local - (1.0 + 0.5 * nk.tau) * q, axis=1)
            sel = np.nonzero(est < 1.3)[0]
            if len(sel):
                ids.append(block_start[b] + sel)
                xs.append(_from_ambient(metric, nk.midpoint, nk.frame,
                                        blocks[b].positions[sel], r, res.steps))
        ids = np.concatenate(ids)
        xs = np.concatenate(xs)
        d = r * np.linalg.norm(xs, axis=1)
        wd = r * _waist_distance(spec, xs)
        scale = r * (1.0 + spec.deformation[3]) * spec.eps_flat
        z = r * zeta_profile(np.sqrt(scale**2 + wd**2) / r)
        zeta[ids] = np.minimum(zeta[ids], z)
        for sg in partitions:
            cval = chi(d / sg)
            if sg == max(partitions) and np.any((partitions[sg][ids] > 0) & (cval > 0)):
                raise MeshError(f"neck {k} region overlaps another neck region")
            partitions[sg][ids] += cval
        closer = d < dist[ids]
        dist[ids[closer]] = d[closer]
        wdist[ids[closer]] = wd[closer]
        nearest[ids[closer]] = k

    chi_neck = partitions[sigma]
    chi_sph = 1.0 - chi_neck
    region = np.full(n, SPHERE)
    region[chi_neck >= 1.0] = NECK
    blend = (chi_neck > 0) & (chi_neck < 1)
    label_owner = owner.copy()
    for k, nk in enumerate(network.necks):
        m = (nearest == k) & (chi_neck > 0)
        label_owner[m] = k
    # ahead of the midpoint along the edge is the plus side
    axial = np.zeros(n)
    for k, nk in enumerate(network.necks):
        m = np.nonzero((nearest == k) & blend)[0]
        if len(m):
            in_chart = chart[m] == nb + k
            ax = np.empty(len(m))
            ax[in_chart] = local[m[in_chart], 0]
            other = m[~in_chart]
            if len(other):
                ax[~in_chart] = _from_ambient(metric, nk.midpoint, nk.frame,
                                              positions[other], r, res.steps)[:, 0]
            axial[m] = ax
    region[blend & (axial < 0)] = TRANSITION_MINUS
    region[blend & (axial >= 0)] = TRANSITION_PLUS
    parts = {s: (1.0 - v, v) for s, v in partitions.items() if s in sigma_radii(r)}
    return GluedSurfaceMesh(positions, triangles, chart, local, region, label_owner,
                            chi_sph, chi_neck, zeta, r, sigma, res, nb, parts,
                            dist, wdist, nearest, patch,
                            [(b.point, b.frame) for b in network.beads]
                            + [(nk.midpoint, nk.frame) for nk in network.necks])


def chart_surface(metric, point, frame, local, triangles, r=1.0, steps=16):
    """Wrap a surface given in one normal chart as a :class:`GluedSurfaceMesh`.

    Every vertex is labelled sphere with ``chi_sph = 1`` and ``zeta = r``.
    Used for analytic test surfaces.
    """
    local = np.asarray(local, float)
    point = np.asarray(point, float)
    frame = np.asarray(frame, float)
    pos = _to_ambient(metric, point, frame, local / r, r, steps)
    n = len(local)
    return GluedSurfaceMesh(pos, np.asarray(triangles, np.int64), np.zeros(n, int), local,
                            np.full(n, SPHERE), np.zeros(n, int), np.ones(n), np.zeros(n),
                            np.full(n, float(r)), float(r), float(r), Resolution(steps=steps),
                            1, frames=[(point, frame)])


# ---------------------------------------------------------------------------
# audits and measures


def edge_list(triangles):
    """Directed edges of all triangles, shape ``(3F, 2)``."""
    t = np.asarray(triangles)
    return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])


def check_watertight(triangles, n_vertices=None):
    """Raise :class:`MeshError` unless every edge has two oppositely oriented triangles."""
    e = edge_list(triangles)
    if np.any(e[:, 0] == e[:, 1]):
        raise MeshError("degenerate triangle with a repeated vertex")
    key = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts != 2):
        raise MeshError(f"{np.sum(counts != 2)} edges are not shared by exactly two triangles")
    forward = e[:, 0] < e[:, 1]
    per_edge = np.bincount(inv.ravel(), weights=forward, minlength=len(uniq))
    if np.any(per_edge != 1):
        raise MeshError("inconsistent triangle orientation")
    if n_vertices is not None:
        used = np.unique(np.asarray(triangles))
        if len(used) != n_vertices:
            raise MeshError("mesh has unreferenced vertices")


def euler_characteristic(mesh_or_triangles, n_vertices=None):
    t = mesh_or_triangles.triangles if hasattr(mesh_or_triangles, "triangles") \
        else np.asarray(mesh_or_triangles)
    if n_vertices is None:
        n_vertices = len(np.unique(t))
    edges = len(np.unique(np.sort(edge_list(t), axis=1), axis=0))
    return int(n_vertices - edges + len(t))


def cycle_rank(network):
    """First Betti number of the bead graph."""
    parent = list(range(len(network.beads)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for nk in network.necks:
        a, b = find(nk.beads[0]), find(nk.beads[1])
        parent[a] = b
    comps = len({find(i) for i in range(len(parent))})
    return len(network.necks) - len(network.beads) + comps


def triangle_areas(metric, positions, triangles):
    """Areas in ``metric`` with the metric frozen at each triangle's centroid."""
    p = np.asarray(positions)[np.asarray(triangles)]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    g = metric.g(p.mean(axis=1))
    a = np.einsum("ni,nij,nj->n", e1, g, e1)
    b = np.einsum("ni,nij,nj->n", e1, g, e2)
    c = np.einsum("ni,nij,nj->n", e2, g, e2)
    return 0.5 * np.sqrt(np.maximum(a * c - b * b, 0.0))


def surface_area(metric, mesh):
    return float(np.sum(triangle_areas(metric, mesh.positions, mesh.triangles)))


# ---------------------------------------------------------------------------
# export


def write_obj(mesh, path):
    """OBJ with region labels as ``# region`` comment lines."""
    with open(path, "w") as fh:
        fh.write(f"# cmcnet glued surface, r = {mesh.r!r}, sigma = {mesh.sigma!r}\n")
        for code, name in REGION_NAMES.items():
            fh.write(f"# region {code} {name}\n")
        for i, (x, y, z) in enumerate(mesh.positions):
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
            fh.write(f"# region {int(mesh.region[i])} owner {int(mesh.owner[i])}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


def write_ply(mesh, path):
    """ASCII PLY with per-vertex ``zeta``, ``chi_sph``, ``chi_neck`` and ``region``."""
    n, f = len(mesh.positions), len(mesh.triangles)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {n}\n")
        for name in ("x", "y", "z", "zeta", "chi_sph", "chi_neck"):
            fh.write(f"property double {name}\n")
        fh.write("property int region\n")
        fh.write(f"element face {f}\nproperty list uchar int vertex_indices\nend_header\n")
        for p, z, cs, cn, rg in zip(mesh.positions, mesh.zeta, mesh.chi_sph,
                                    mesh.chi_neck, mesh.region):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {z:.17g} {cs:.17g} {cn:.17g} {int(rg)}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
