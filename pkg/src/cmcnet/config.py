"""Run configuration: TOML schema, validation and object construction.

Schema (all lengths in chart units)::

    seed = 0                      # perturbation sampling
    out = "out"                   # output directory (CLI flag and CMCNET_OUT win)

    [metric]
    name = "conformal"            # euclidean | round_sphere | round_sphere_normal | conformal
    expr = "0.1*x1 + 0.2*sin(x2)*x3"
    radius = 2.0                  # chart ball radius (optional)
    a = 1.0                       # sphere radius for the round metrics

    [run]
    r = 0.02                      # sphere radius of the beads
    omega = -1.0
    nu = 1.5                      # weight exponent of the sup norm, in (1, 2)
    tau = 0.01                    # optional uniform separation
    adjust_r = false              # move r to the nearest admissible radius (single edge)
    mesh = true                   # mesh-based diagnostics in ``diagnose``

    [[edges]]
    id = "e0"
    start = [-0.3, 0.1, 0.05]
    direction = [1.0, 0.2, -0.1]  # or terminal = true with f0 = 0
    length = 0.6
    f0 = 2e-4                     # or f0_hat, meaning f0 = f0_hat * r^2

    [[vertices]]
    id = "v0"
    point = [0.0, 0.0, 0.0]
    edges = [["e0", "start"], ["e1", "start"]]

    [resolution]                  # any Resolution field
    n_phi = 64
    level = 4

    [perturbation]
    w_scale = 0.0                 # |W_q| drawn uniformly up to this, seeded
    xi_scale = 0.0

    [sweep]
    radii = [0.04, 0.02, 0.01]
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields

import numpy as np

from .catalog import ExpressionError, conformal, euclidean, parse_expression, round_sphere
from .catalog import round_sphere_normal
from .mesh import Resolution

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["EdgeSpec", "VertexSpec", "RunConfig", "load_config", "parse_config", "validate",
           "make_metric"]

METRICS = ("euclidean", "round_sphere", "round_sphere_normal", "conformal")
ENDS = ("start", "end")


@dataclass
class EdgeSpec:
    id: str
    start: list
    length: float
    direction: list = None
    terminal: bool = False
    f0: float = None
    f0_hat: float = None

    def f0_at(self, r):
        return self.f0 if self.f0 is not None else self.f0_hat * r**2


@dataclass
class VertexSpec:
    id: str
    point: list
    edges: list


@dataclass
class RunConfig:
    metric: dict
    edges: list
    vertices: list = field(default_factory=list)
    r: float = 0.1
    omega: float = 1.0
    nu: float = 1.5
    tau: float = None
    adjust_r: bool = False
    mesh: bool = True
    resolution: dict = field(default_factory=dict)
    perturbation: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    seed: int = 0
    out: str = None
    unknown: list = field(default_factory=list)

    def edge_index(self, eid):
        for i, e in enumerate(self.edges):
            if e.id == eid:
                return i
        raise KeyError(eid)

    def make_resolution(self):
        return Resolution(**self.resolution)


def load_config(path):
    with open(path, "rb") as fh:
        return parse_config(tomllib.load(fh))


def _split(table, cls, where, unknown):
    names = {f.name for f in fields(cls)}
    for k in sorted(set(table) - names):
        unknown.append(f"unknown key {k!r} in {where}")
    return {k: v for k, v in table.items() if k in names}


def parse_config(data):
    """Build a :class:`RunConfig` without checking it (see :func:`validate`).

    Unknown keys are collected in ``unknown`` and reported by :func:`validate`.
    """
    unknown = []
    top = {"seed", "out", "metric", "run", "edges", "vertices", "resolution",
           "perturbation", "sweep"}
    for k in sorted(set(data) - top):
        unknown.append(f"unknown key {k!r} at top level")
    run = _split(dict(data.get("run", {})), RunConfig, "[run]", unknown)
    for k in ("metric", "edges", "vertices", "resolution", "perturbation", "sweep", "seed",
              "out", "unknown"):
        if k in run:
            unknown.append(f"unknown key {k!r} in [run]")
            run.pop(k)
    edges = []
    for i, e in enumerate(data.get("edges", [])):
        e = _split(dict(e), EdgeSpec, f"edge {i}", unknown)
        e["id"] = str(e.get("id", i))
        e.setdefault("start", None)
        e.setdefault("length", None)
        edges.append(EdgeSpec(**e))
    vertices = [VertexSpec(id=str(v.get("id", i)), point=v.get("point"),
                           edges=[tuple(str(y) for y in x) for x in v.get("edges", [])])
                for i, v in enumerate(data.get("vertices", []))]
    return RunConfig(metric=dict(data.get("metric", {})), edges=edges, vertices=vertices,
                     resolution=dict(data.get("resolution", {})),
                     perturbation=dict(data.get("perturbation", {})),
                     sweep=list(data.get("sweep", {}).get("radii", [])),
                     seed=int(data.get("seed", 0)), out=data.get("out"), unknown=unknown,
                     **run)


def _vec3(v):
    try:
        a = np.asarray(v, float)
    except (TypeError, ValueError):
        return False
    return a.shape == (3,) and bool(np.all(np.isfinite(a)))


def validate(config):
    """All violations of ``config`` as readable strings; empty means valid."""
    out = list(config.unknown)
    m = config.metric
    name = m.get("name")
    if name not in METRICS:
        out.append(f"metric name {name!r} is not one of {', '.join(METRICS)}")
    elif name == "conformal":
        try:
            parse_expression(str(m.get("expr", "")))
        except ExpressionError as exc:
            out.append(f"conformal expression: {exc}")
    if not 1.0 < config.nu < 2.0:
        out.append(f"ν must lie in (1,2), got {config.nu}")
    if not config.r > 0:
        out.append(f"r must be positive, got {config.r}")
    if config.tau is not None and not config.tau > 0:
        out.append(f"tau must be positive, got {config.tau}")
    if any(not (x > 0) for x in config.sweep):
        out.append("sweep radii must be positive")
    try:
        config.make_resolution()
    except TypeError as exc:
        out.append(f"resolution: {exc}")
    if not config.edges:
        out.append("at least one edge is required")
    ids = [e.id for e in config.edges]
    for eid in sorted({i for i in ids if ids.count(i) > 1}):
        out.append(f"duplicate edge id {eid!r}")
    vids = [v.id for v in config.vertices]
    for vid in sorted({i for i in vids if vids.count(i) > 1}):
        out.append(f"duplicate vertex id {vid!r}")
    degree = {}
    for v in config.vertices:
        if not _vec3(v.point):
            out.append(f"vertex {v.id!r}: point must be three finite numbers")
        for ref in v.edges:
            if len(ref) != 2 or ref[1] not in ENDS:
                out.append(f"vertex {v.id!r}: edge reference {ref!r} must be [id, start|end]")
                continue
            if ref[0] not in ids:
                out.append(f"vertex {v.id!r} references unknown edge {ref[0]!r}")
                continue
            degree[(ref[0], ref[1])] = degree.get((ref[0], ref[1]), 0) + 1
    for (eid, end), k in sorted(degree.items()):
        if k > 1:
            out.append(f"edge {eid!r} {end} is attached to {k} vertices")
    for e in config.edges:
        tag = f"edge {e.id!r}"
        if not _vec3(e.start):
            out.append(f"{tag}: start must be three finite numbers")
        if e.length is None or not e.length > 0:
            out.append(f"{tag}: length must be positive")
        if (e.f0 is None) == (e.f0_hat is None):
            out.append(f"{tag}: give exactly one of f0, f0_hat")
            continue
        f0 = e.f0 if e.f0 is not None else e.f0_hat
        if f0 < 0:
            out.append(f"{tag}: f0 must be non-negative")
        if e.terminal:
            if f0 != 0:
                out.append(f"{tag}: a terminal launch needs f0 = 0")
            if degree.get((e.id, "start"), 0):
                out.append(f"{tag}: a terminal launch cannot start at a graph vertex")
        else:
            if f0 == 0:
                out.append(f"{tag}: f0 = 0 is allowed only at terminal-vertex launches")
            if not _vec3(e.direction):
                out.append(f"{tag}: direction must be three finite numbers")
    if config.adjust_r and len(config.edges) != 1:
        out.append("adjust_r needs a single edge")
    if config.sweep and len(config.edges) != 1:
        out.append("sweep needs a single edge")
    for key in ("w_scale", "xi_scale"):
        if config.perturbation.get(key, 0.0) < 0:
            out.append(f"perturbation {key} must be non-negative")
    return out


def make_metric(spec):
    name = spec["name"]
    kw = {k: spec[k] for k in ("radius",) if k in spec}
    if name == "euclidean":
        return euclidean(**kw)
    if name == "conformal":
        return conformal(spec["expr"], **kw)
    a = spec.get("a", 1.0)
    if name == "round_sphere":
        return round_sphere(a, **kw)
    return round_sphere_normal(a, **kw)
