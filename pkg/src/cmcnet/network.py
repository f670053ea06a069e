"""Bead networks: sphere centres placed along condensation curves.

Consecutive centres on an edge are joined by geodesic segments of length
``(2 + tau) r``; the neck sits at the segment midpoint.  The separation
``tau`` follows the neck-size function ``f`` of the curve: the block weight
of the neck at arclength ``t`` is ``f(t) r / h = f(t) / (2 + tau)`` (so the
bead balance discretises ``nabla_T (f T) = Omega r^2 grad R``), the neck
scale is ``C`` times that weight, and ``tau = Lambda(scale)``.

Whatever the origin of the centres, a network stores the separation that
the centres actually realise and derives the neck scale from it through the
inverse of Lambda, so placement and perturbation share one rebuild path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from .gluing import invert_lambda, lambda_relation, lambda_threshold, pair_constants
from .manifold import distance, exp_batch, geodesic_path, log_map, orthonormalize

__all__ = [
    "Bead",
    "Neck",
    "BeadNetwork",
    "EdgePlacement",
    "RadiusInterval",
    "PlacementError",
    "DeltaViolation",
    "NetworkInvariantError",
    "tau_schedule",
    "place_beads",
    "admissible_radii",
    "admissible_radius_near",
    "consistent_radius",
    "build_network",
    "network_from_chains",
    "apply_perturbation",
    "audit_network",
    "default_constants",
]

BAND = 0.2
RATIO_BAND = (1.0, 3.0)


class PlacementError(ValueError):
    """Beads cannot be placed on an edge at this radius."""

    def __init__(self, message, edge=None, closing_tau=None):
        super().__init__(message)
        self.edge = edge
        self.closing_tau = closing_tau


class DeltaViolation(ValueError):
    """Perturbation in the excluded set: opposed neighbours or coincident necks."""


class NetworkInvariantError(AssertionError):
    pass


def default_constants():
    """Matching constants ``(c, C, c', C')`` of interior blocks with antipodal necks."""
    c, C = pair_constants()
    return (c, C, c, C)


@dataclass
class Bead:
    point: np.ndarray
    frame: np.ndarray
    necks: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    edge: int = -1
    t: float = np.nan
    vertex: int | None = None
    W: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class Neck:
    beads: tuple
    edge: int
    midpoint: np.ndarray
    frame: np.ndarray
    length: float
    tau: float
    eps_flat: float
    weight: float
    deformation: np.ndarray = field(default_factory=lambda: np.zeros(6))


@dataclass
class BeadNetwork:
    """Beads, necks and the chains (one per edge) that order them.

    ``frame`` arrays hold the orthonormal frame vectors as columns; the first
    column of a neck frame is the segment direction from ``beads[0]`` to
    ``beads[1]``.
    """

    beads: list
    necks: list
    r: float
    constants: tuple
    chains: list
    closed: list
    graph: object = field(default=None, repr=False)
    closing: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)

    @property
    def points(self):
        return np.array([b.point for b in self.beads])

    @property
    def vertex_beads(self):
        return [i for i, b in enumerate(self.beads) if b.vertex is not None]

    def interior_beads(self):
        """Beads with exactly two necks that are not graph vertices."""
        return [i for i, b in enumerate(self.beads) if b.vertex is None and len(b.necks) == 2]


class EdgePlacement(NamedTuple):
    t: np.ndarray
    points: np.ndarray
    targets: np.ndarray
    closing_tau: float


class RadiusInterval(NamedTuple):
    lo: float
    hi: float
    n_gaps: int


# ---------------------------------------------------------------------------
# separation schedule


def tau_schedule(curve, r, constants=None):
    """Target separation ``tau(t)`` from the curve's neck-size function."""
    c, C, cp, Cp = default_constants() if constants is None else constants
    top = 0.8 * lambda_threshold(c, C, cp, Cp)

    def tau(t):
        t = np.atleast_1d(np.asarray(t, float))
        f = curve.state(t)[2]
        if np.any(~(f > 0)):
            raise PlacementError("neck-size function is not positive")
        val = np.zeros_like(f)
        for _ in range(50):
            scale = C * f / (2.0 + val)
            if np.any(scale >= top):
                raise PlacementError("neck scale outside the monotone range of Lambda")
            new = lambda_relation(scale, c, C, cp, Cp)
            if np.max(np.abs(new - val)) <= 1e-15 * np.max(np.abs(new)):
                break
            val = new
        return new

    return tau


def _scheduler(curve, r, tau, constants):
    if tau is None:
        return tau_schedule(curve, r, constants)
    if tau <= 0:
        raise PlacementError("separation must be positive")
    return lambda t: np.full(np.shape(np.atleast_1d(t)), float(tau))


def _point(curve, t):
    return curve.state([t])[0][0]


def _dist(metric, p, q):
    return float(distance(metric, p, q[None])[0])


def _advance(metric, curve, tk, qk, r, sched, L, steps=32):
    """Next bead: smallest ``t > tk`` at distance ``(2 + tau) r`` from ``qk``.

    Secant iteration from the chord estimate; the shooting vector of the
    previous iterate warm-starts each distance evaluation.
    """
    cache = {}

    def gap(t):
        x = _point(curve, t)
        guess = None
        if "v" in cache:
            guess = cache["v"] + (x - cache["x"])
        v = log_map(metric, qk, x[None], steps=steps, v0=guess)[0]
        cache["v"], cache["x"] = v, x
        return float(metric.norm(qk, v)) - (2.0 + sched(0.5 * (tk + t))[0]) * r

    t0 = tk + (2.0 + float(sched(min(tk + r, L))[0])) * r
    if t0 > L:
        raise PlacementError("edge ends before the next bead fits")
    g0 = gap(t0)
    t1 = min(t0 - g0, L)
    for _ in range(40):
        if t1 == t0:
            break
        g1 = gap(t1)
        if g1 == g0:
            break
        t0, g0, t1 = t1, g1, t1 - g1 * (t1 - t0) / (g1 - g0)
        if not tk < t1 <= L:
            raise PlacementError("edge ends before the next bead fits")
        if abs(t1 - t0) <= 1e-15 * max(1.0, L):
            break
    else:
        raise PlacementError("bead placement iteration did not converge")
    return t1, _point(curve, t1)


def place_beads(metric, curve, r, tau=None, constants=None, band=BAND, edge=None):
    """Inductive bead placement along one edge.

    Parameters
    ----------
    metric : ChartMetric
    curve : CondensateCurve
    r : float
        Sphere radius.
    tau : float, optional
        Uniform separation overriding the schedule derived from ``f``.
    band : float
        Admissible relative deviation of the closing separation.

    Returns
    -------
    EdgePlacement
        Bead arclengths and points (first and last are the edge ends), the
        target separation of every gap and the realised closing separation.

    Raises
    ------
    PlacementError
        If the closing separation falls outside the band.
    """
    L = curve.length
    sched = _scheduler(curve, r, tau, constants)
    end = _point(curve, L)
    ts, pts, targets = [0.0], [_point(curve, 0.0)], []
    while True:
        tk, qk = ts[-1], pts[-1]
        tt = float(sched(0.5 * (tk + L))[0])
        reach = (2.0 + (1.0 + band) * tt) * r
        # chords of admissible edges are at least 2/3 of the arc at bead scale
        D = _dist(metric, qk, end) if L - tk <= 1.5 * reach else np.inf
        if D <= reach:
            closing = D / r - 2.0
            if abs(closing - tt) > band * tt:
                raise PlacementError(
                    f"edge {edge}: closing separation {closing:.6g} outside band around "
                    f"{tt:.6g}", edge, closing)
            ts.append(L)
            pts.append(end)
            targets.append(tt)
            return EdgePlacement(np.array(ts), np.array(pts), np.array(targets), closing)
        t, q = _advance(metric, curve, tk, qk, r, sched, L)
        targets.append(float(sched(0.5 * (tk + t))[0]))
        ts.append(t)
        pts.append(q)


def _closing_excess(metric, curve, r, n_gaps, sched, L, end):
    """``closing / target - 1`` after ``n_gaps - 1`` regular gaps."""
    tk, qk = 0.0, _point(curve, 0.0)
    try:
        for _ in range(n_gaps - 1):
            tk, qk = _advance(metric, curve, tk, qk, r, sched, L)
    except PlacementError:
        return -1e9
    tt = float(sched(0.5 * (tk + L))[0])
    return (_dist(metric, qk, end) / r - 2.0) / tt - 1.0


def admissible_radii(metric, curve, r_lo, r_hi, tau=None, constants=None, band=BAND,
                     xtol=1e-12):
    """Maximal radius intervals in ``[r_lo, r_hi]`` on which placement succeeds.

    For a fixed number of gaps the closing separation decreases with ``r``,
    so each gap count contributes at most one interval; its ends solve
    ``closing = (1 -+ band) target``.  Intervals are returned sorted by
    radius, so the gap counts are non-increasing.
    """
    if not 0 < r_lo < r_hi:
        raise ValueError("need 0 < r_lo < r_hi")
    L = curve.length
    end = _point(curve, L)
    out = []
    tmid = float(_scheduler(curve, r_hi, tau, constants)(0.5 * L)[0])
    n_max = int(np.ceil(L / ((2.0 + tmid) * r_lo))) + 2
    n_min = max(1, int(np.floor(L / ((2.0 + 4.0 * tmid) * r_hi))) - 1)
    for n in range(n_max, n_min - 1, -1):
        def excess(r):
            return _closing_excess(metric, curve, r, n, _scheduler(curve, r, tau, constants),
                                   L, end)

        # window where the gap count can close, padded
        a = max(r_lo, L / ((2.0 + 2.0 * tmid) * (n + 0.7)))
        b = min(r_hi, L / (2.0 * max(n - 0.7, 0.3)))
        if a >= b:
            continue
        ea, eb = excess(a), excess(b)
        if ea < -band or eb > band:
            continue
        lo = a if ea <= band else brentq(lambda r: excess(r) - band, a, b, xtol=xtol)
        hi = b if eb >= -band else brentq(lambda r: excess(r) + band, lo, b, xtol=xtol)
        if hi > lo:
            out.append(RadiusInterval(lo, hi, n))
    out.sort(key=lambda iv: iv.lo)
    return out


def admissible_radius_near(metric, curve, r, tau=None, constants=None, xtol=1e-13):
    """Radius near ``r`` whose closing separation equals its target exactly."""
    L = curve.length
    end = _point(curve, L)
    tt = float(_scheduler(curve, r, tau, constants)(0.5 * L)[0])
    n = max(1, int(round(L / ((2.0 + tt) * r))))

    def excess(s):
        return _closing_excess(metric, curve, s, n, _scheduler(curve, s, tau, constants),
                               L, end)

    a, b = L / ((2.0 + tt) * (n + 0.4)), L / ((2.0 + tt) * (n - 0.4))
    return brentq(excess, a, b, xtol=xtol * r), n


def consistent_radius(metric, shoot, r, tau=None, constants=None, xtol=1e-13):
    """Admissible radius near ``r`` for a curve that itself depends on the radius.

    ``shoot(s)`` returns the curve solved with radius ``s`` (the neck-size
    function scales with it).  The closing excess is a function of ``s``
    through both the placement and the curve, and one root-find handles
    both.  Returns ``(radius, n_gaps)``.
    """
    curve = shoot(r)
    tt = float(_scheduler(curve, r, tau, constants)(0.5 * curve.length)[0])
    n = max(1, int(round(curve.length / ((2.0 + tt) * r))))

    def excess(s):
        c = shoot(s)
        return _closing_excess(metric, c, s, n, _scheduler(c, s, tau, constants), c.length,
                               _point(c, c.length))

    L = curve.length
    a, b = L / ((2.0 + tt) * (n + 0.4)), L / ((2.0 + tt) * (n - 0.4))
    return brentq(excess, a, b, xtol=xtol * r), n


# ---------------------------------------------------------------------------
# networks


def _seed_frame(metric, x, e1):
    g = metric.g(x)
    axes = np.eye(3)
    k = int(np.argmin(np.abs(axes @ g @ e1)))
    rest = [axes[(k + i) % 3] for i in range(2)]
    return orthonormalize(metric, x, np.stack([e1] + rest, 1))


def network_from_chains(metric, points, chains, r, closed=None, constants=None,
                        vertex_ids=None, deformations=None, W=None, graph=None,
                        ts=None, edge_of=None):
    """Build a network whose beads sit at ``points`` and whose edges follow ``chains``.

    Separations are read off the realised segment lengths and neck scales
    follow from the inverse of Lambda.  Frames: the first vector points back
    along the incoming segment (forward along the first segment at the start
    of a chain); the rest are parallel transported from the previous bead.
    """
    points = np.asarray(points, float)
    constants = default_constants() if constants is None else tuple(constants)
    closed = [False] * len(chains) if closed is None else list(closed)
    vertex_ids = {} if vertex_ids is None else vertex_ids
    beads = [Bead(p.copy(), None, vertex=vertex_ids.get(i)) for i, p in enumerate(points)]
    if W is not None:
        for b, w in zip(beads, np.asarray(W, float)):
            b.W = w.copy()
    if ts is not None:
        for i, t in ts.items():
            beads[i].t = t
    necks = []
    C = constants[1]
    for e, chain in enumerate(chains):
        pairs = list(zip(chain[:-1], chain[1:]))
        if closed[e]:
            pairs.append((chain[-1], chain[0]))
        for a, b in pairs:
            pa, pb = beads[a].point, beads[b].point
            if beads[a].edge < 0:
                beads[a].edge = e
            if beads[b].edge < 0:
                beads[b].edge = e
            v = log_map(metric, pa, pb[None])[0]
            length = float(metric.norm(pa, v))
            tau = length / r - 2.0
            if tau <= 0:
                raise PlacementError(f"edge {e}: beads {a} and {b} overlap (tau = {tau:.4g})",
                                     e, tau)
            u = v / length
            if beads[a].frame is None:
                beads[a].frame = _seed_frame(metric, pa, u)
            Fa = beads[a].frame
            carried = np.stack([u, Fa[:, 1], Fa[:, 2]], 1)[None]
            mid, tmid = exp_batch(metric, pa, 0.5 * v[None], transport=carried)
            end, tend = exp_batch(metric, pa, v[None], transport=carried)
            mid, tmid, tend = mid[0], tmid[0], tend[0]
            back = -tend[:, 0] / metric.norm(pb, tend[:, 0])
            if beads[b].frame is None:
                beads[b].frame = orthonormalize(metric, pb, np.stack([back, tend[:, 1],
                                                                      tend[:, 2]], 1))
            eps_flat = invert_lambda(tau, *constants)
            k = len(necks)
            dfm = np.zeros(6) if deformations is None else np.asarray(deformations[k], float)
            necks.append(Neck((a, b), e, mid, orthonormalize(metric, mid, tmid), length, tau,
                              eps_flat, eps_flat / C, dfm.copy()))
            beads[a].necks.append(k)
            beads[a].directions.append(u)
            beads[b].necks.append(k)
            beads[b].directions.append(back)
    for i, b in enumerate(beads):
        if b.frame is None:
            b.frame = orthonormalize(metric, b.point, np.eye(3))
    return BeadNetwork(beads, necks, r, constants, [list(c) for c in chains], closed, graph)


def build_network(metric, graph, r, tau=None, constants=None, band=BAND):
    """Place beads on every edge of a :class:`NetworkGraph` and join them.

    Graph vertices become beads shared by their incident edges; edge ends
    that no vertex lists become terminal vertices of their own.
    """
    ends = {}
    points, vertex_ids = [], {}
    for vid, (point, incident) in enumerate(graph.vertices):
        bid = len(points)
        points.append(np.asarray(point, float))
        vertex_ids[bid] = vid
        for e, at_start in incident:
            ends[(e, 0 if at_start else 1)] = bid
    next_vid = len(graph.vertices)
    chains, closed, closing, targets, ts = [], [], {}, {}, {}
    for e, curve in enumerate(graph.edges):
        pl = place_beads(metric, curve, r, tau=tau, constants=constants, band=band, edge=e)
        closing[e], targets[e] = pl.closing_tau, pl.targets
        for side, idx in ((0, 0), (1, -1)):
            if (e, side) not in ends:
                ends[(e, side)] = len(points)
                points.append(pl.points[idx])
                vertex_ids[len(points) - 1] = next_vid
                next_vid += 1
        first, last = ends[(e, 0)], ends[(e, 1)]
        ts.setdefault(first, 0.0)
        ts.setdefault(last, float(pl.t[-1]))
        chain = [first]
        for t, p in zip(pl.t[1:-1], pl.points[1:-1]):
            ts[len(points)] = float(t)
            chain.append(len(points))
            points.append(p)
        loop = first == last
        if not loop:
            chain.append(last)
        chains.append(chain)
        closed.append(loop)
    net = network_from_chains(metric, np.array(points), chains, r, closed, constants,
                              vertex_ids, graph=graph, ts=ts)
    net.closing, net.targets = closing, targets
    return net


# ---------------------------------------------------------------------------
# perturbation


def apply_perturbation(metric, network, W=None, Xi=None, w_max=0.5, xi_max=0.1,
                       anti_tol=1e-6):
    """Move bead ``q`` to ``exp_q(r W_q)``, re-join by geodesics and set neck deformations.

    ``W`` holds chart components of tangent vectors, one row per bead;
    ``Xi`` one six-vector per neck.

    Raises
    ------
    DeltaViolation
        If the transported unit displacements of two neighbouring beads are
        opposite, or two necks at a bead leave in the same direction.
    """
    n, m = len(network.beads), len(network.necks)
    W = np.zeros((n, 3)) if W is None else np.asarray(W, float).reshape(n, 3)
    Xi = np.zeros((m, 6)) if Xi is None else np.asarray(Xi, float).reshape(m, 6)
    pts = network.points
    norms = metric.norm(pts, W)
    if np.any(norms > w_max):
        raise ValueError(f"|W| exceeds {w_max}")
    if np.any(np.linalg.norm(Xi, axis=1) > xi_max):
        raise ValueError(f"|Xi| exceeds {xi_max}")
    for neck in network.necks:
        a, b = neck.beads
        if norms[a] > 0 and norms[b] > 0:
            pa = pts[a]
            v = log_map(metric, pa, pts[b][None])
            _, moved = exp_batch(metric, pa, v, transport=(W[a] / norms[a])[None, :, None])
            wa = moved[0, :, 0]
            cos = metric.inner(pts[b], wa, W[b]) / (metric.norm(pts[b], wa) * norms[b])
            if cos <= -1.0 + anti_tol:
                raise DeltaViolation(f"beads {a} and {b} are displaced in opposite directions")
    new = exp_batch(metric, pts, network.r * W) if np.any(norms > 0) else pts.copy()
    vertex_ids = {i: b.vertex for i, b in enumerate(network.beads) if b.vertex is not None}
    ts = {i: b.t for i, b in enumerate(network.beads)}
    net = network_from_chains(metric, new, network.chains, network.r, network.closed,
                              network.constants, vertex_ids, Xi, W, network.graph, ts)
    for i, b in enumerate(net.beads):
        for j in range(len(b.directions)):
            for k in range(j):
                cos = metric.inner(b.point, b.directions[j], b.directions[k])
                if cos >= 1.0 - anti_tol:
                    raise DeltaViolation(f"necks {b.necks[k]} and {b.necks[j]} coincide at bead {i}")
    net.closing, net.targets = dict(network.closing), dict(network.targets)
    return net


# ---------------------------------------------------------------------------
# audit


def _shoot_distance(metric, p, q, length):
    """Endpoint gap of the DOP853 geodesic from ``p`` towards ``q`` of given length."""
    v = log_map(metric, p, q[None])[0]
    v = v / metric.norm(p, v)
    if metric.flat:
        return float(np.linalg.norm(p + length * v - q))
    sol = geodesic_path(metric, p, v, length, rtol=1e-12, atol=1e-14)
    return float(np.linalg.norm(sol.y[:3, -1] - q))


def audit_network(metric, network, tol=1e-8, ratio_band=RATIO_BAND):
    """Check the network invariants; returns a dict of worst-case values.

    Spacing and midpoint placement are re-measured by integrating each
    segment geodesic independently with an adaptive integrator.
    """
    r = network.r
    worst = {"spacing": 0.0, "midpoint": 0.0, "ratio_min": np.inf, "ratio_max": 0.0}
    for k, neck in enumerate(network.necks):
        a, b = neck.beads
        pa, pb = network.beads[a].point, network.beads[b].point
        if neck.tau <= 0:
            raise NetworkInvariantError(f"neck {k} has non-positive separation")
        gap = _shoot_distance(metric, pa, pb, (2.0 + neck.tau) * r)
        worst["spacing"] = max(worst["spacing"], gap / r)
        da = _shoot_distance(metric, pa, neck.midpoint, (1.0 + neck.tau / 2) * r)
        db = _shoot_distance(metric, pb, neck.midpoint, (1.0 + neck.tau / 2) * r)
        worst["midpoint"] = max(worst["midpoint"], da / r, db / r)
        e = neck.eps_flat
        ratio = neck.tau / (e * np.log(1.0 / e))
        worst["ratio_min"] = min(worst["ratio_min"], ratio)
        worst["ratio_max"] = max(worst["ratio_max"], ratio)
    if worst["spacing"] > tol:
        raise NetworkInvariantError(f"spacing error {worst['spacing']:.3e} r")
    if worst["midpoint"] > tol:
        raise NetworkInvariantError(f"midpoint error {worst['midpoint']:.3e} r")
    if network.necks and not (ratio_band[0] <= worst["ratio_min"]
                              and worst["ratio_max"] <= ratio_band[1]):
        raise NetworkInvariantError("tau / (eps log(1/eps)) outside its band")
    if network.graph is not None:
        for point, _ in network.graph.vertices:
            if np.min(np.linalg.norm(network.points - np.asarray(point), axis=1)) > tol:
                raise NetworkInvariantError("a graph vertex carries no bead")
    return worst
