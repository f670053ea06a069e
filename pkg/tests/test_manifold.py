import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from cmcnet.catalog import (conformal, conformal_scalar_curvature, euclidean,
                            round_sphere, round_sphere_normal)
from cmcnet.manifold import (ChartExitError, ChartMetric, InjectivityError,
                             NormalChart,
                             curvature_at, curvature_derivative_at, distance,
                             exp_batch, geodesic, log_map, normal_chart,
                             orthonormalize, parallel_transport)

PHI = "0.1*x1 + 0.2*sin(x2)*x3 - 0.05*x1^2"

points = st.tuples(*[st.floats(-0.6, 0.6)] * 3).map(np.array)


def test_flat_curvature_vanishes():
    b = curvature_at(euclidean(), [0.3, -1.0, 2.0])
    assert_allclose(b.riemann, 0.0, atol=1e-12)
    assert b.scalar == 0.0


@pytest.mark.parametrize("a", [0.5, 1.0, 3.0])
def test_sphere_scalar_curvature(a):
    m = round_sphere(a)
    for x in ([0.0, 0.0, 0.0], [0.4 * a, -0.3 * a, 0.9 * a]):
        b = curvature_at(m, x)
        assert_allclose(b.scalar, 6.0 / a**2, rtol=1e-10)
        assert_allclose(b.grad_scalar, 0.0, atol=1e-9 / a**3)


def test_sphere_sectional_sign():
    # paper sign: Rm(X, Y, X, Y) = -K for orthonormal X, Y
    b = curvature_at(round_sphere_normal(2.0), np.zeros(3))
    assert_allclose(b.riemann[0, 1, 0, 1], -0.25, rtol=1e-8)
    assert_allclose(b.ricci, 0.5 * np.eye(3), atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(points)
def test_conformal_matches_closed_form(x):
    m = conformal(PHI)
    b = curvature_at(m, x)
    assert_allclose(b.scalar, conformal_scalar_curvature(PHI, x), rtol=1e-9, atol=1e-12)
    assert b.check_symmetries() < 1e-10


def test_fd_only_path_agrees():
    exact = conformal(PHI)
    fd = ChartMetric(exact.g, radius=1.0)
    x = np.array([0.2, 0.1, -0.3])
    assert_allclose(curvature_at(fd, x).scalar, curvature_at(exact, x).scalar, rtol=1e-6)


def test_bianchi_second_contracted():
    # div Ric = dR / 2
    m = conformal(PHI)
    x = np.array([0.1, -0.2, 0.25])
    b = curvature_at(m, x)
    _, nric = curvature_derivative_at(m, x)
    div = np.einsum("ik,ijk->j", np.linalg.inv(b.metric), nric)
    assert_allclose(div, 0.5 * b.metric @ b.grad_scalar, atol=1e-7)


def test_chart_exit_raises():
    with pytest.raises(ChartExitError):
        curvature_at(conformal(PHI, radius=1.0), [1.2, 0.0, 0.0])


def test_great_circle_closes():
    a = 1.0
    m = round_sphere(a, radius=10.0)
    p = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 2.0, 0.0])  # unit: g = delta / 4 at p
    x, w = geodesic(m, p, v, 2 * np.pi * a)
    assert_allclose(x, p, atol=1e-8)
    assert_allclose(w, v, atol=1e-8)


def test_geodesic_requires_unit_speed():
    with pytest.raises(ValueError):
        geodesic(euclidean(), np.zeros(3), np.array([2.0, 0, 0]), 1.0)


def test_octant_holonomy():
    a = 1.0
    m = round_sphere(a, radius=10.0)
    th = np.linspace(0, np.pi / 2, 400)
    e = np.eye(3)

    def arc(u, w):
        return 2 * a * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * w)

    curve = np.vstack([arc(e[0], e[1]), arc(e[1], e[2])[1:], arc(e[2], e[0])[1:]])
    w0 = np.array([0.0, 1.0, 0.0])
    w = parallel_transport(m, curve, w0)
    angle = np.arccos(w @ w0 / np.linalg.norm(w))
    assert_allclose(angle, np.pi / 2, rtol=1e-5)


def test_exp_log_roundtrip_and_distance():
    m = conformal(PHI)
    p = np.array([0.1, 0.0, -0.1])
    v = np.array([[0.2, 0.1, 0.0], [-0.1, 0.3, 0.2]])
    y = exp_batch(m, p, v)
    assert_allclose(log_map(m, p, y), v, atol=1e-11)
    assert_allclose(distance(m, p, y), m.norm(np.broadcast_to(p, v.shape), v), rtol=1e-10)


def test_exp_jacobian_matches_fd():
    m = conformal(PHI)
    p = np.zeros(3)
    v = np.array([[0.2, -0.1, 0.3]])
    _, jac = exp_batch(m, p, v, jacobian=True)
    h = 1e-6
    fd = np.stack([(exp_batch(m, p, v + h * e) - exp_batch(m, p, v - h * e))[0] / (2 * h)
                   for e in np.eye(3)], axis=1)
    assert_allclose(jac[0], fd, atol=1e-8)


def test_normal_chart_of_sphere():
    a = 1.0
    m = round_sphere(a, radius=10.0)
    p = np.array([2.0, 0.0, 0.0])
    chart = normal_chart(m, p, orthonormalize(m, p, np.eye(3)), radius=1.0)
    x = np.array([[0.3, -0.2, 0.4], [0.7, 0.1, 0.2]])
    assert_allclose(chart.g(x), round_sphere_normal(a).g(x), atol=1e-6)
    assert_allclose(chart.from_base(chart.to_base(x)), x, atol=1e-11)
    assert_allclose(chart.g(np.zeros(3)), np.eye(3), atol=1e-12)


def test_normal_chart_detects_conjugate_points():
    m = round_sphere(1.0, radius=100.0)
    p = np.array([2.0, 0.0, 0.0])
    chart = NormalChart(m, p, 2.0 * np.eye(3), radius=4.0)
    # along the circle |x| = 2 the antipode sits at distance pi
    NormalChart(m, p, 2.0 * np.eye(3), radius=3.0).audit([[0.0, 1.0, 0.0]])
    with pytest.raises(InjectivityError):
        chart.audit([[0.0, 1.0, 0.0]])


def test_normal_chart_rejects_bad_frame():
    with pytest.raises(ValueError):
        normal_chart(euclidean(), np.zeros(3), 2.0 * np.eye(3), radius=1.0)
