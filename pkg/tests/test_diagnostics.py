import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from cmcnet import diagnostics as D
from cmcnet.catalog import conformal, euclidean, round_sphere, round_sphere_normal
from cmcnet.curves import NetworkGraph, shoot_curve
from cmcnet.gluing import match_neck
from cmcnet.manifold import orthonormalize
from cmcnet.mesh import (Resolution, assemble, build_neck_mesh, chart_surface, icosphere,
                         sigma_radii)
from cmcnet.network import build_network, default_constants, network_from_chains

PHI = "0.1*x1 + 0.2*sin(x2)*x3 - 0.05*x1^2"


def sphere_mesh(metric, level, radius, point=None, frame=None):
    point = np.zeros(3) if point is None else point
    frame = np.eye(3) if frame is None else frame
    v, f = icosphere(level)
    return chart_surface(metric, point, frame, radius * v, f, r=radius)


def two_beads(tau=0.01, r=1.0, direction=(1.0, 0.0, 0.0)):
    m = euclidean()
    d = np.asarray(direction, float)
    d /= np.linalg.norm(d)
    cv = shoot_curve(m, np.zeros(3), d, 1.0, 1.0, 1.0, (2 + tau) * r)
    return m, build_network(m, NetworkGraph([cv], []), r, tau=tau)


@pytest.fixture(scope="module")
def pair():
    m, net = two_beads()
    mesh = assemble(m, net)
    H = D.discrete_mean_curvature(mesh, m).H
    return m, net, mesh, H


# ---------------------------------------------------------------------------
# mean curvature


def test_flat_sphere_second_order():
    m, r = euclidean(), 0.7
    errs = []
    for level in (3, 4, 5):
        s = D.discrete_mean_curvature(sphere_mesh(m, level, r), m)
        errs.append(np.max(np.abs(s.H * r / 2 - 1)))
    assert errs[1] < 0.01
    # icosphere spacing halves per level
    assert D.fit_order([4.0, 2.0, 1.0], errs) > 1.8


def test_sample_invariants_curved():
    S = round_sphere(1.0)
    p = np.array([0.3, 0.1, -0.2])
    s = D.discrete_mean_curvature(sphere_mesh(S, 3, 0.3, p, orthonormalize(S, p, np.eye(3))), S)
    assert np.all(np.linalg.eigvalsh(s.h)[:, 0] > 0)
    assert_allclose(s.H, np.einsum("nij,nij->n", np.linalg.inv(s.h), s.B), rtol=1e-13)
    assert_allclose(np.einsum("na,nab,nb->n", s.N, s.g, s.N), 1.0, atol=1e-10)


def test_geodesic_sphere_in_s3():
    a, rad = 1.0, 0.3
    S = round_sphere(a)
    p = np.array([0.3, 0.1, -0.2])
    mesh = sphere_mesh(S, 3, rad, p, orthonormalize(S, p, np.eye(3)))
    exact = 2.0 / a / np.tan(rad / a)
    for route in ("chart", "base"):
        H = D.discrete_mean_curvature(mesh, S, route=route).H
        assert np.max(np.abs(H / exact - 1)) < 0.03


def test_chart_route_matches_base_route_on_normal_metric():
    # the base chart of this metric is already normal at the origin, so both
    # routes see the same fit and differ only in the metric algebra
    S = round_sphere_normal(1.0)
    mesh = sphere_mesh(S, 2, 0.4, np.array([0.0, 0.0, 0.0]))
    mesh.local = mesh.positions.copy()
    ch = D.discrete_mean_curvature(mesh, S, route="chart")
    base = D.discrete_mean_curvature(mesh, S, route="base")
    assert_allclose(ch.H, base.H, rtol=1e-7)
    assert_allclose(ch.h, base.h, atol=1e-9)


def test_catenoid_is_minimal():
    m = euclidean()
    spec = match_neck(0.01, *default_constants())
    patch = build_neck_mesh(m, spec, Resolution())
    mesh = chart_surface(m, np.zeros(3), np.eye(3), patch.local, patch.triangles)
    n_phi = len(patch.data["phi"])
    inner = np.arange(2 * n_phi, len(patch.local) - 2 * n_phi)
    s = D.discrete_mean_curvature(mesh, m, vertices=inner, check=False)
    assert np.max(np.abs(s.H)) * spec.eps_flat < 0.01


def test_degenerate_neighbourhood():
    v = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    m = euclidean()
    mesh = chart_surface(m, np.zeros(3), np.eye(3), v, f)
    with pytest.raises(D.DegenerateNeighbourhood):
        D.discrete_mean_curvature(mesh, m)


def test_chart_jet_of_normal_metric():
    S = round_sphere_normal(0.8)
    x = np.array([[0.1, -0.05, 0.2], [0.0, 0.3, 0.1]])
    P, dP = D.chart_jet(S, np.zeros(3), np.eye(3), x, steps=48)
    assert_allclose(P, S.g(x) - np.eye(3), atol=1e-9)
    h = 1e-5
    fd = np.stack([(S.g(x + h * e) - S.g(x - h * e)) / (2 * h) for e in np.eye(3)], 1)
    assert_allclose(dP, fd, atol=1e-6)


sym = st.lists(st.floats(-0.2, 0.2), min_size=6, max_size=6)


@settings(max_examples=40, deadline=None)
@given(sym, st.lists(st.floats(-1, 1), min_size=27, max_size=27),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.floats(0.0, 3.0))
def test_chart_formulas_against_direct_algebra(p6, dp, b3, ang):
    # independent route: g-unit normal and B = -g(X_ij + Gamma(E_i, E_j), N)
    iu = np.triu_indices(3)
    P = np.zeros((3, 3))
    P[iu] = p6
    P = P + np.triu(P, 1).T
    dP = np.array(dp).reshape(3, 3, 3)
    dP = 0.5 * (dP + np.swapaxes(dP, 1, 2))
    c, s = np.cos(ang), np.sin(ang)
    E = np.array([[c, s, 0.3], [-s, c, -0.2]])
    N0 = np.cross(E[0], E[1])
    N0 /= np.linalg.norm(N0)
    B0 = np.array([[b3[0], b3[1]], [b3[1], b3[2]]])
    h0 = E @ E.T
    h, B, N, H, _ = D.chart_geometry(E[None], None, N0[None], h0[None], B0[None], P[None],
                                     dP[None])
    g = np.eye(3) + P
    low = 0.5 * (np.einsum("iab->abi", dP) + np.einsum("jab->baj", dP)
                 - np.einsum("lab->abl", dP))
    # Gamma_lower(A, B; Z) = 0.5 (d_A P(B, Z) + d_B P(A, Z) - d_Z P(A, B))
    gam_low = 0.5 * (np.einsum("kbz,ik,jb->ijz", dP, E, E)
                     + np.einsum("kaz,jk,ia->ijz", dP, E, E)
                     - np.einsum("zab,ia,jb->ijz", dP, E, E))
    del low
    co = np.cross(E[0], E[1])
    Nd = np.linalg.solve(g, co)
    Nd /= np.sqrt(Nd @ g @ Nd)
    Nd *= np.sign(Nd @ N0)
    Xij = -B0[..., None] * N0
    Bd = -(np.einsum("ija,ab,b->ij", Xij, g, Nd) + gam_low @ Nd)
    hd = E @ g @ E.T
    assert_allclose(N[0], Nd, atol=1e-12)
    assert_allclose(h[0], hd, atol=1e-12)
    assert_allclose(B[0], Bd, atol=1e-11)
    assert_allclose(H[0], np.trace(np.linalg.solve(hd, Bd)), atol=1e-11)


# ---------------------------------------------------------------------------
# weighted norm


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0))
def test_sup_norm_homogeneous(lam):
    m = euclidean()
    mesh = sphere_mesh(m, 2, 0.5)
    mesh.zeta = np.linspace(0.01, 0.5, mesh.n_vertices)
    e = np.sin(np.arange(mesh.n_vertices))
    base = D.weighted_sup_norm(mesh, 2 / 0.5 + e)
    assert_allclose(D.weighted_sup_norm(mesh, 2 / 0.5 + lam * e), lam * base, rtol=1e-13)


def test_sup_norm_validates_nu():
    mesh = sphere_mesh(euclidean(), 1, 1.0)
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        D.weighted_sup_norm(mesh, np.ones(mesh.n_vertices), nu=2.5)


def test_sup_norm_round_sphere_refines_to_zero():
    m, r = euclidean(), 0.5
    vals = [D.weighted_sup_norm(sphere_mesh(m, lv, r),
                                D.discrete_mean_curvature(sphere_mesh(m, lv, r), m).H)
            for lv in (3, 4, 5)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 0.3 * vals[1]


def test_sup_norm_dominated_by_transitions(pair):
    m, net, mesh, H = pair
    w = mesh.zeta ** 0.5 * np.abs(H - 2.0)
    assert mesh.chi_neck[np.argmax(w)] > 0


# ---------------------------------------------------------------------------
# bead balance


def test_flat_equal_necks_balance():
    m = euclidean()
    pts = np.array([[0.0, 0, 0], [2.05, 0, 0], [4.1, 0, 0]])
    net = network_from_chains(m, pts, [[0, 1, 2]], 1.0)
    assert_allclose(D.bead_balance_residual(net, m, 1.0, 1), 0.0, atol=1e-15)


def test_flat_unequal_necks_balance():
    m = euclidean()
    pts = np.array([[0.0, 0, 0], [2.04, 0, 0], [4.1, 0, 0]])
    net = network_from_chains(m, pts, [[0, 1, 2]], 1.0)
    bead = net.beads[1]
    w_minus, w_plus = net.necks[0].weight, net.necks[1].weight
    eta_plus = np.linalg.solve(bead.frame, bead.directions[1])
    assert_allclose(D.bead_balance_residual(net, m, 1.0, 1), (w_plus - w_minus) * eta_plus,
                    atol=1e-15)


def test_balance_gravity_term_sign():
    m = conformal(PHI, radius=2.0)
    p = np.array([0.1, 0.0, 0.0])
    net = network_from_chains(m, p[None], [[0]], 0.1)
    F = net.beads[0].frame
    expect = -0.5 * 0.1**3 * (F.T @ m.d_scalar(p[None])[0])
    assert_allclose(D.bead_balance_residual(net, m, 0.5, 0), expect, rtol=1e-13)


# ---------------------------------------------------------------------------
# projections


def test_projections_vanish_for_exact_h(pair):
    m, net, mesh, _ = pair
    H = np.full(mesh.n_vertices, 2.0)
    for q in range(2):
        assert np.all(D.projection_integrals(mesh, m, net, ("bead", q), H).values == 0)
    assert np.all(D.projection_integrals(mesh, m, net, ("neck", 0), H).values == 0)


def test_bead_projections_mirror(pair):
    m, net, mesh, H = pair
    amb = [net.beads[q].frame @ D.projection_integrals(mesh, m, net, ("bead", q), H).values
           for q in range(2)]
    assert abs(amb[0][0]) > 1e-4
    assert_allclose(amb[0][0], -amb[1][0], rtol=1e-6)
    # transverse components are odd under the mirror and vanish
    assert np.max(np.abs(np.array(amb)[:, 1:])) < 1e-2 * abs(amb[0][0])


def test_projection_richardson_estimate(pair):
    m, net, coarse, H = pair
    fine = assemble(m, net, Resolution().refined())
    out = D.projection_integrals(coarse, m, net, ("bead", 0), H, refined=(fine, None))
    assert out.error is not None and np.all(out.error >= 0)
    assert out.error[0] < 0.1 * abs(out.refined[0])
    with pytest.raises(D.QuadratureError):
        D.projection_integrals(coarse, m, net, ("bead", 0), refined=(fine, None), rtol=1e-9)


def test_neck_support_guard():
    m, net = two_beads(tau=0.1)
    mesh = assemble(m, net, Resolution(n_phi=32, level=3))
    with pytest.raises(ValueError, match="gap"):
        D.neck_balance_matrix(mesh, m, net, 0)


def test_cokernel_gram_structure(pair):
    m, net, mesh, _ = pair
    G = D.cokernel_gram(mesh, m, net)
    for q in range(2):
        blk = G[3 * q:3 * q + 3, 3 * q:3 * q + 3]
        diag = np.diag(blk)
        assert np.max(np.abs(blk - np.diag(diag))) <= 1e-2 * diag.min()
        other = G[3 * q:3 * q + 3, 3 * (1 - q):3 * (1 - q) + 3]
        assert np.max(np.abs(other)) <= 1e-3 * diag.min()
    # about the sphere's (4 pi r^2 / 3) per axis
    assert_allclose(np.diag(G), 4 * np.pi / 3, rtol=0.05)


# ---------------------------------------------------------------------------
# neck matrix


def test_neck_matrix_pattern_and_parity(pair):
    m, net, mesh, _ = pair
    M = D.neck_balance_matrix(mesh, m, net, 0)
    assert M.matrix.shape == (6, 6)
    assert M.off_pattern <= 1e-3
    assert M.parity <= 1e-6
    assert M.condition < 1e8


def test_optimal_neck_solves_small(pair):
    m, net, mesh, H = pair
    M = D.neck_balance_matrix(mesh, m, net, 0)
    pi = D.projection_integrals(mesh, m, net, ("neck", 0), H).values
    a = D.solve_neck_deformation(M, pi, net.r)
    eb = net.necks[0].eps_flat
    assert np.linalg.norm(a) < eb
    # odd slots vanish by the mirror symmetry
    assert np.max(np.abs(a[[0, 4, 5]])) < 1e-6 * eb


def test_inverse_crime_offset(pair):
    m, net, mesh, H = pair
    M = D.neck_balance_matrix(mesh, m, net, 0)
    ref = D.projection_integrals(mesh, m, net, ("neck", 0), H).values
    inject = np.array([0.01, 0.0, 0.0, 0.0, 0.0, 0.0])
    Ht = H + D.synthetic_offset(mesh, m, net, 0, inject)
    pi = D.projection_integrals(mesh, m, net, ("neck", 0), Ht).values
    a = D.solve_neck_deformation(M, pi, net.r, reference=ref)
    assert abs(a[0] / inject[0] - 1) < 0.1
    assert np.max(np.abs(a[1:])) < 0.1 * inject[0]


def test_geometric_offset_is_linear(pair):
    m, net, mesh, H = pair
    M = D.neck_balance_matrix(mesh, m, net, 0)
    ref = D.projection_integrals(mesh, m, net, ("neck", 0), H).values
    ratios = []
    for d1 in (0.5, 1.0):
        net.necks[0].deformation = np.array([d1, 0, 0, 0, 0, 0.0])
        try:
            mesh2 = assemble(m, net)
        finally:
            net.necks[0].deformation = np.zeros(6)
        H2 = D.discrete_mean_curvature(mesh2, m).H
        pi = D.projection_integrals(mesh2, m, net, ("neck", 0), H2).values
        a = D.solve_neck_deformation(M, pi, net.r, reference=ref)
        ratios.append(a[0] / (net.necks[0].eps_flat * d1))
        assert abs(a[1]) + abs(a[2]) < 1e-3 * abs(a[0])
    assert ratios[0] != 0
    assert_allclose(ratios[0], ratios[1], rtol=0.01)


# ---------------------------------------------------------------------------
# expansion


def test_expansion_flat_is_exact():
    m = euclidean()
    out = D.expansion_check(m, np.zeros(3), np.eye(3), "graph")
    assert out["passed"]
    Y, E, N0, h0, B0, H0, H = D.analytic_geometry(m, np.zeros(3), np.eye(3), "catenoid", 0.2)
    assert_allclose(H, H0, atol=1e-12)


def test_expansion_s3_sphere_against_closed_form():
    S = round_sphere(1.0)
    p = np.array([0.3, 0.1, -0.2])
    F = orthonormalize(S, p, np.eye(3))
    out = D.expansion_check(S, p, F, "sphere")
    assert out["order"] >= 2.7
    for Dm in (0.4, 0.1):
        *_, H = D.analytic_geometry(S, p, F, "sphere", Dm)
        assert_allclose(H, 2.0 / np.tan(Dm / 2), rtol=1e-8)


def test_expansion_conformal_disk_leading_term():
    C = conformal(PHI)
    p = np.array([0.1, 0.05, -0.1])
    F = orthonormalize(C, p, np.eye(3))
    out = D.expansion_check(C, p, F, "disk", diameters=(0.2, 0.1, 0.05))
    D05 = out["rows"][-1]
    assert D05[2] <= 0.05 * D05[1]
    assert out["order"] >= 2.7


def test_alternative_coefficient_leaves_second_order_remainder():
    C = conformal(PHI)
    p = np.array([0.1, 0.05, -0.1])
    F = orthonormalize(C, p, np.eye(3))
    alt = D.expansion_check(C, p, F, "disk", nabla_n_rm=D.ALTERNATIVE_NABLA_N_RM)
    assert alt["order"] < 2.5


# ---------------------------------------------------------------------------
# reports


def test_estimate_omega_recovers_constants():
    rng = np.random.default_rng(3)
    rows = []
    for r in (0.1, 0.05, 0.025, 0.0125):
        for _ in range(3):
            ex, dR = rng.normal(size=3) * r**2, rng.normal(size=3)
            rows.append((r, ex, dR, 2.0 * r * ex - 3.0 * r**4 * dR))
    c1, c2, om, res = D.estimate_omega(rows)
    assert_allclose([c1, c2, om], [2.0, 3.0, 1.5], rtol=1e-10)
    assert res < 1e-15


def test_report_reproducible(pair):
    m, net, mesh, H = pair
    a = D.balance_report(net, m, 1.0, mesh, H)
    b = D.balance_report(net, m, 1.0, mesh, H)
    assert a.to_json() == b.to_json()
    assert a.check(len(net.beads), len(net.necks))
    data = json.loads(a.to_json())
    assert len(data["bead_residuals"]) == 2 and len(data["neck_matrices"]) == 1


def test_report_notes_unreachable_neck():
    m, net = two_beads(tau=0.1)
    mesh = assemble(m, net, Resolution(n_phi=32, level=3))
    rep = D.balance_report(net, m, 1.0, mesh)
    assert rep.neck_matrices == [None] and "neck 0" in rep.notes
    assert rep.check(2, 1)


def test_sweep_csv_bytes(tmp_path):
    rows = [{"r": 0.1, "eps": 1e-3, "residual": 2e-5, "order": float("nan")},
            {"r": 0.05, "eps": 2.5e-4, "residual": 5e-6, "order": 2.0}]
    text = D.write_sweep_csv(rows, tmp_path / "s.csv")
    assert text.splitlines()[0] == "r,eps,residual,order"
    assert (tmp_path / "s.csv").read_text() == D.write_sweep_csv(rows)


def test_sigma_radii_used_by_default(pair):
    m, net, mesh, H = pair
    a = D.projection_integrals(mesh, m, net, ("neck", 0), H).values
    b = D.projection_integrals(mesh, m, net, ("neck", 0), H, sigma=sigma_radii(1.0)[0]).values
    assert np.all(a == b)
