"""Acceptance criteria 1-9, one test each.

Every criterion prints a single ``criterion N: PASS|FAIL`` line (collected
by ``conftest.py`` into the terminal summary) and fails if it exceeds its
runtime budget.  Run directly with ``python tests/test_acceptance.py``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from cmcnet import cli
from cmcnet import diagnostics as D
from cmcnet.catalog import conformal, conformal_scalar_curvature, euclidean, round_sphere
from cmcnet.catalog import round_sphere_normal
from cmcnet.config import parse_config
from cmcnet.curves import NetworkGraph, chord, euler_lagrange_residual, s_parametrization
from cmcnet.curves import shoot_curve
from cmcnet.gluing import invert_lambda, lambda_relation, match_neck, neck_graph, pair_constants
from cmcnet.manifold import curvature_at, orthonormalize
from cmcnet.mesh import (Resolution, assemble, build_neck_mesh, chart_surface,
                         check_watertight, euler_characteristic, icosphere)
from cmcnet.network import build_network, default_constants, network_from_chains

PHI = "0.1*x1 + 0.2*sin(x2)*x3 - 0.05*x1^2"
RESULTS = {}


def record(n, budget, fun):
    t0 = time.perf_counter()
    ok, detail = fun()
    dt = time.perf_counter() - t0
    ok = bool(ok) and dt < budget
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({dt:.1f} s of {budget:g} s) {detail}"
    RESULTS[n] = line
    print(line)
    return ok, line


# ---------------------------------------------------------------------------


def criterion_1():
    flat = np.max(np.abs(curvature_at(euclidean(), [0.3, -1.0, 2.0]).scalar))
    rel = []
    for a in (0.5, 1.0, 3.0):
        for x in ([0.0, 0.0, 0.0], [0.4 * a, -0.3 * a, 0.9 * a]):
            rel.append(abs(curvature_at(round_sphere(a), x).scalar * a**2 / 6.0 - 1))
    rng = np.random.default_rng(1)
    m = conformal(PHI)
    dual = 0.0
    for x in rng.uniform(-0.6, 0.6, size=(10, 3)):
        num = curvature_at(m, x).scalar
        ref = conformal_scalar_curvature(PHI, x)
        dual = max(dual, abs(num - ref) / max(abs(ref), 1.0))
    ok = flat <= 1e-10 and max(rel) <= 1e-6 and dual <= 1e-6
    return ok, f"flat {flat:.1e}, sphere rel {max(rel):.1e}, conformal dual {dual:.1e}"


def criterion_2():
    worst = 0.0
    for m, f0 in ((euclidean(), 1.0), (round_sphere_normal(1.0), 0.5), (round_sphere(2.0), 0.7)):
        cv = shoot_curve(m, np.zeros(3), np.array([0.0, 1.0, 0.0]), f0, 1.0, 1.0, 1.5)
        worst = max(worst, np.max(np.abs(cv.f - f0)))
    m = conformal(PHI, radius=2.0)
    p = np.array([-0.3, 0.1, 0.0])
    d = np.array([1.0, 0.2, 0.1])
    d /= m.norm(p, d)
    sol = shoot_curve(m, p, d, 0.3, 1.0, 1.0, 1.0)
    sigma, S = s_parametrization(sol)
    res = euler_lagrange_residual(m, sigma, S, 1.0, 1.0, sol.c)
    res_chord = euler_lagrange_residual(m, chord(sigma, S), S, 1.0, 1.0, sol.c)
    ok = worst <= 1e-8 and res <= 1e-5 and res_chord >= 10 * res
    return ok, f"constant f {worst:.1e}, EL residual {res:.1e}, chord/solution {res_chord / res:.0f}"


def criterion_3():
    args = pair_constants() * 2
    trip = 0.0
    for eb in np.logspace(-6, -2, 9):
        trip = max(trip, abs(invert_lambda(lambda_relation(eb, *args), *args) / eb - 1))
    ratios = []
    for eb in (1e-2, 1e-3, 1e-4):
        rho = eb**0.75
        exact = neck_graph(np.zeros(6), eb, 0.0, +1)(np.array([rho, 0.0]))
        asym = eb * (np.log(2) - np.log(eb) + np.log(rho))
        ratios.append(abs(exact - asym) / (2 * eb**1.5))
    ok = trip <= 1e-12 and max(ratios) <= 1.0
    return ok, f"round trip {trip:.1e}, mismatch/bound {max(ratios):.2f}"


def criterion_4():
    m = euclidean()
    cv = shoot_curve(m, np.zeros(3), np.array([1.0, 0.0, 0.0]), 1.0, 1.0, 1.0, 2.1)
    net = build_network(m, NetworkGraph([cv], []), 1.0, tau=0.1)
    mesh = assemble(m, net)
    check_watertight(mesh.triangles, mesh.n_vertices)
    chi2 = euler_characteristic(mesh)
    pou = np.max(np.abs(mesh.chi_sph + mesh.chi_neck - 1))
    for cs, cn in mesh.partitions.values():
        pou = max(pou, np.max(np.abs(cs + cn - 1)))
    k = 8
    ang = 2 * np.pi * np.arange(k) / k
    R = 2.1 / (2 * np.sin(np.pi / k))
    pts = np.stack([R * np.cos(ang), R * np.sin(ang), 0 * ang], 1)
    loop = network_from_chains(m, pts, [list(range(k))], 1.0, closed=[True])
    lm = assemble(m, loop)
    check_watertight(lm.triangles, lm.n_vertices)
    chi0 = euler_characteristic(lm)
    pou = max(pou, np.max(np.abs(lm.chi_sph + lm.chi_neck - 1)))
    ok = chi2 == 2 and chi0 == 0 and pou <= 1e-12
    return ok, f"two-bead χ = {chi2}, {k}-bead loop χ = {chi0}, partition {pou:.1e}"


def _sphere_mesh(metric, level, radius, point=None, frame=None):
    point = np.zeros(3) if point is None else point
    frame = np.eye(3) if frame is None else frame
    v, f = icosphere(level)
    return chart_surface(metric, point, frame, radius * v, f, r=radius)


def criterion_5():
    m, r = euclidean(), 0.7
    errs = []
    for level in (3, 4, 5):
        H = D.discrete_mean_curvature(_sphere_mesh(m, level, r), m).H
        errs.append(np.max(np.abs(H * r / 2 - 1)))
    order = D.fit_order([4.0, 2.0, 1.0], errs)
    spec = match_neck(0.01, *default_constants())
    patch = build_neck_mesh(m, spec, Resolution())
    cat = chart_surface(m, np.zeros(3), np.eye(3), patch.local, patch.triangles)
    n_phi = len(patch.data["phi"])
    inner = np.arange(2 * n_phi, len(patch.local) - 2 * n_phi)
    cat_err = np.max(np.abs(D.discrete_mean_curvature(cat, m, vertices=inner, check=False).H))
    cat_err *= spec.eps_flat
    a, rad = 1.0, 0.3
    S = round_sphere(a)
    p = np.array([0.3, 0.1, -0.2])
    H = D.discrete_mean_curvature(_sphere_mesh(S, 4, rad, p, orthonormalize(S, p, np.eye(3))),
                                  S).H
    s3 = np.max(np.abs(H * a * np.tan(rad / a) / 2 - 1))
    ok = errs[1] <= 0.01 and order >= 1.8 and cat_err <= 0.01 and s3 <= 0.01
    return ok, (f"sphere {errs[1]:.2%} (order {order:.2f}), catenoid {cat_err:.2%}, "
                f"S³ sphere {s3:.2%}")


def criterion_6():
    m = euclidean()
    # dyadic spacing 2 + 1/16 is exact in binary, so equal weights are bitwise equal
    pts = np.arange(6)[:, None] * np.array([2.0625, 0.0, 0.0])
    net = network_from_chains(m, pts, [list(range(6))], 1.0)
    flat = max(np.max(np.abs(D.bead_balance_residual(net, m, 1.0, q)))
               for q in net.interior_beads())
    data = {"metric": {"name": "conformal", "expr": PHI, "radius": 2.0},
            "run": {"r": 0.04, "omega": -1.0, "adjust_r": True, "mesh": False},
            "edges": [{"id": "e0", "start": [-0.3, 0.1, 0.05], "direction": [1.0, 0.2, -0.1],
                       "length": 0.6, "f0_hat": 0.5}]}
    cfg = parse_config(data)
    rows = [cli.sweep_point(cfg, r0) for r0 in (0.04, 0.02, 0.01)]
    good = [row for row in rows if "error" not in row and np.isfinite(row["residual_rel"])]
    cli.add_orders(good)
    order = good[0]["fitted_order"] if len(good) >= 3 else float("nan")
    ok = flat == 0.0 and len(good) >= 3 and order >= 1.0
    rel = ", ".join(f"{row['r']:.4f}: {row['residual_rel']:.2e}" for row in good)
    return ok, f"flat {flat:.1e}, residual/r³ [{rel}], order {order:.2f}"


def criterion_7():
    orders = {}
    S = round_sphere(1.0)
    p = np.array([0.3, 0.1, -0.2])
    F = orthonormalize(S, p, np.eye(3))
    for kind in ("sphere", "graph", "catenoid"):
        orders[f"S³ {kind}"] = D.expansion_check(S, p, F, kind)["order"]
    C = conformal(PHI)
    q = np.array([0.1, 0.05, -0.1])
    G = orthonormalize(C, q, np.eye(3))
    for kind in ("disk", "graph", "catenoid", "sphere"):
        orders[f"conformal {kind}"] = D.expansion_check(C, q, G, kind)["order"]
    ok = min(orders.values()) >= 2.7
    return ok, ", ".join(f"{k} {v:.2f}" for k, v in orders.items())


def _seeded_pair(rng):
    tau = rng.uniform(0.005, 0.02)
    r = rng.uniform(0.5, 2.0)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    m = euclidean()
    cv = shoot_curve(m, rng.normal(size=3), d, 1.0, 1.0, 1.0, (2 + tau) * r)
    return m, build_network(m, NetworkGraph([cv], []), r, tau=tau)


def criterion_8():
    rng = np.random.default_rng(2024)
    worst, recovery, cond = 0.0, 0.0, 0.0
    for _ in range(5):
        m, net = _seeded_pair(rng)
        mesh = assemble(m, net)
        M = D.neck_balance_matrix(mesh, m, net, 0)
        worst = max(worst, M.off_pattern)
        cond = max(cond, M.condition)
        H = D.discrete_mean_curvature(mesh, m).H
        ref = D.projection_integrals(mesh, m, net, ("neck", 0), H).values
        inject = rng.uniform(-1, 1, 6) * 0.01
        Ht = H + D.synthetic_offset(mesh, m, net, 0, inject)
        pi = D.projection_integrals(mesh, m, net, ("neck", 0), Ht).values
        a = D.solve_neck_deformation(M, pi, net.r, reference=ref)
        recovery = max(recovery, np.linalg.norm(a - inject) / np.linalg.norm(inject))
    ok = worst <= 1e-3 and recovery <= 0.1
    return ok, f"off-pattern {worst:.1e}, recovery error {recovery:.1e}, cond {cond:.1e}"


def criterion_9(tmp=None):
    import tempfile
    with tempfile.TemporaryDirectory() as tmpdir:
        base = Path(tmp or tmpdir)
        flat = {"metric": {"name": "euclidean"},
                "run": {"r": 1.0, "omega": 1.0, "tau": 0.01},
                "edges": [{"id": "e0", "start": [0.0, 0.0, 0.0], "direction": [1.0, 0.0, 0.0],
                           "length": 8.04, "f0": 1.0}],
                "resolution": {"n_phi": 32, "level": 3}}
        codes = [cli.run(parse_config(flat), "all", base / name) for name in ("a", "b")]
        same = all(p.read_bytes() == (base / "b" / p.name).read_bytes()
                   for p in (base / "a").iterdir())
        sweep = {"metric": {"name": "conformal", "expr": PHI, "radius": 2.0},
                 "run": {"r": 0.1, "omega": -1.0, "adjust_r": True, "mesh": False},
                 "edges": [{"id": "e0", "start": [-0.3, 0.1, 0.05],
                            "direction": [1.0, 0.2, -0.1], "length": 0.6, "f0_hat": 0.5}],
                 "sweep": {"radii": [0.16, 0.08]}}
        codes += [cli.run(parse_config(sweep), "sweep", base / f"w{w}", workers=w)
                  for w in (1, 2)]
        workers = (base / "w1" / "sweep.csv").read_bytes() == (base / "w2" / "sweep.csv").read_bytes()
        n_files = len(list((base / "a").iterdir()))
    ok = codes == [0, 0, 0, 0] and same and workers
    return ok, f"{n_files} files byte-identical: {same}, 1 vs 2 workers identical: {workers}"


CRITERIA = {1: (criterion_1, 10), 2: (criterion_2, 30), 3: (criterion_3, 5),
            4: (criterion_4, 60), 5: (criterion_5, 120), 6: (criterion_6, 600),
            7: (criterion_7, 300), 8: (criterion_8, 300), 9: (criterion_9, 600)}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    fun, budget = CRITERIA[n]
    ok, line = record(n, budget, fun)
    assert ok, line


if __name__ == "__main__":
    import sys
    results = [record(n, CRITERIA[n][1], CRITERIA[n][0])[0] for n in sorted(CRITERIA)]
    sys.exit(0 if all(results) else 1)
