"""Ready-made chart metrics and a safe parser for conformal factors.

Conformal metrics ``g = exp(2 phi) delta`` are written as expressions in
``x1, x2, x3`` using ``+ - * /``, powers, ``exp``, ``sin`` and ``cos``.
Exact first and second derivatives are generated symbolically, and
:func:`conformal_scalar_curvature` supplies an independent closed form for
the scalar curvature.
"""

from __future__ import annotations

import ast
import math

import numpy as np
import sympy as sp

from .manifold import ChartMetric

__all__ = [
    "euclidean",
    "round_sphere",
    "round_sphere_normal",
    "conformal",
    "parse_expression",
    "ExpressionError",
    "conformal_scalar_curvature",
]

_X = sp.symbols("x1 x2 x3", real=True)
_FUNCS = {"exp": sp.exp, "sin": sp.sin, "cos": sp.cos}
_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
           ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b,
           ast.Pow: lambda a, b: a ** b}


class ExpressionError(ValueError):
    """Expression outside the supported grammar."""


def parse_expression(text):
    """Parse ``text`` into a sympy expression over ``x1, x2, x3``.

    Only numeric literals, the three coordinates, arithmetic, ``**`` (or
    ``^``) and the functions ``exp``, ``sin``, ``cos`` are accepted.
    """
    src = text.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    names = {"x1": _X[0], "x2": _X[1], "x3": _X[2]}

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(node.value)
        if isinstance(node, ast.Name):
            if node.id in names:
                return names[node.id]
            raise ExpressionError(f"unknown symbol {node.id!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            val = walk(node.operand)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
            return _FUNCS[node.func.id](walk(node.args[0]))
        raise ExpressionError(f"unsupported construct in {text!r}: {ast.dump(node)[:40]}")

    return walk(tree)


def _vectorize(expr):
    fn = sp.lambdify(_X, expr, "numpy")

    def ev(x):
        x = np.asarray(x, float)
        return np.broadcast_to(fn(x[..., 0], x[..., 1], x[..., 2]), x.shape[:-1]).astype(float)

    return ev


# ---------------------------------------------------------------------------


def euclidean(radius=np.inf):
    eye = np.eye(3)

    def g(x):
        return np.broadcast_to(eye, np.shape(x)[:-1] + (3, 3)).copy()

    def dg(x):
        return np.zeros(np.shape(x)[:-1] + (3, 3, 3))

    def ddg(x):
        return np.zeros(np.shape(x)[:-1] + (3, 3, 3, 3))

    def scalar_field(x):
        shape = np.shape(x)[:-1]
        return np.zeros(shape), np.zeros(shape + (3,))

    return ChartMetric(g, radius=radius, dmetric=dg, d2metric=ddg, flat=True,
                       normal=True, name="euclidean", scalar_field=scalar_field)


def _scalar_expr(phi):
    lap = sum(sp.diff(phi, v, 2) for v in _X)
    grad2 = sum(sp.diff(phi, v) ** 2 for v in _X)
    return -sp.exp(-2 * phi) * (4 * lap + 2 * grad2)


def _conformal_from_phi(phi, radius, name):
    """Chart metric ``exp(2 phi) delta`` with exact derivatives."""
    rexpr = _scalar_expr(phi)
    fr = _vectorize(rexpr)
    fdr = [_vectorize(sp.diff(rexpr, v)) for v in _X]

    def scalar_field(x):
        return fr(x), np.stack([f(x) for f in fdr], -1)

    w = sp.exp(2 * phi)
    dw = [sp.diff(w, v) for v in _X]
    ddw = [sp.diff(dw[i], _X[j]) for i in range(3) for j in range(3)]
    # one lambdified call per point set, cached for the g / dg / ddg triple
    fall = sp.lambdify(_X, [w] + dw + ddw, "numpy", cse=True)
    cache = {}
    eye = np.eye(3)

    def parts(x):
        x = np.asarray(x, float)
        key = (x.shape, x.tobytes())
        if cache.get("key") != key:
            vals = np.empty(x.shape[:-1] + (13,))
            for i, v in enumerate(fall(x[..., 0], x[..., 1], x[..., 2])):
                vals[..., i] = v
            cache["key"], cache["vals"] = key, vals
        return cache["vals"]

    def g(x):
        return parts(x)[..., 0, None, None] * eye

    def dg(x):
        return parts(x)[..., 1:4, None, None] * eye

    def ddg(x):
        v = parts(x)[..., 4:]
        return v.reshape(v.shape[:-1] + (3, 3))[..., None, None] * eye

    return ChartMetric(g, radius=radius, dmetric=dg, d2metric=ddg, name=name,
                       scalar_field=scalar_field)


def conformal(expr, radius=1.0):
    """Conformally flat metric ``exp(2 phi) delta`` on the ball of ``radius``.

    ``expr`` is a string in the supported grammar or a sympy expression.
    """
    phi = parse_expression(expr) if isinstance(expr, str) else sp.sympify(expr)
    metric = _conformal_from_phi(phi, radius, f"conformal({expr})")
    metric.phi = phi
    return metric


def conformal_scalar_curvature(expr, x):
    """Closed-form scalar curvature ``-exp(-2 phi)(4 lap phi + 2 |d phi|^2)``."""
    phi = parse_expression(expr) if isinstance(expr, str) else sp.sympify(expr)
    return _vectorize(_scalar_expr(phi))(x)


def round_sphere(a=1.0, radius=None):
    """Round three-sphere of radius ``a`` in stereographic coordinates.

    ``g = (1 + |x|^2 / (4 a^2))^{-2} delta``; the chart covers everything but
    one point, and ``radius`` (default ``4a``) bounds the usable ball.
    """
    a = float(a)
    r2 = sum(v**2 for v in _X)
    phi = -sp.log(1 + r2 / (4 * a**2))
    metric = _conformal_from_phi(phi, 4 * a if radius is None else radius, f"sphere(a={a})")
    metric.phi = phi
    metric.sphere_radius = a
    return metric


def _q_series(u, a, terms=12):
    # Horner in u over coefficients of u^(n-2), n = 2..terms
    out = np.zeros_like(u)
    for n in range(terms, 1, -1):
        c = (-1) ** (n + 1) * 2.0 ** (2 * n - 1) / (a ** (2 * n - 2) * math.factorial(2 * n))
        out = out * u + c
    return out


def _q(u, a):
    u = np.asarray(u, float)
    small = u < (0.05 * a) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (a**2 * np.sin(np.sqrt(u) / a) ** 2 - u) / u**2
    return np.where(small, _q_series(u, a), exact)


def round_sphere_normal(a=1.0, radius=None):
    """Round three-sphere in geodesic normal coordinates at a point.

    ``g = delta + q(|x|^2) (|x|^2 delta - x x^T)`` with
    ``q(u) = (a^2 sin^2(sqrt(u)/a) - u) / u^2``.  Valid for ``|x| < pi a``.
    """
    a = float(a)
    eye = np.eye(3)

    def g(x):
        x = np.asarray(x, float)
        u = np.sum(x * x, axis=-1)
        q = _q(u, a)
        return eye + q[..., None, None] * (u[..., None, None] * eye - x[..., :, None] * x[..., None, :])

    r = 0.9 * np.pi * a if radius is None else radius
    def scalar_field(x):
        shape = np.shape(x)[:-1]
        return np.full(shape, 6.0 / a**2), np.zeros(shape + (3,))

    metric = ChartMetric(g, radius=r, normal=True, name=f"sphere_normal(a={a})",
                         fd_step=1e-2, scalar_field=scalar_field)
    metric.sphere_radius = a
    return metric
