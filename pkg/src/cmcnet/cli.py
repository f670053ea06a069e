"""Command line driver: curves -> place -> build -> diagnose, and sweeps.

Each stage recomputes its predecessors from the configuration, which is
deterministic, so any stage can be run on its own.  Exit status is 0 on
success, 1 when a stage fails (``error.json`` describes the failure) and
2 when the configuration does not validate.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as D
from .config import load_config, make_metric, validate
from .curves import NetworkGraph, shoot_curve, terminal_start_expansion
from .mesh import assemble, write_obj, write_ply
from .network import PlacementError, apply_perturbation, build_network, consistent_radius

__all__ = ["main", "run", "Pipeline", "COMMANDS"]

COMMANDS = ("curves", "place", "build", "diagnose", "sweep", "all")
log = logging.getLogger("cmcnet")


class StageError(RuntimeError):
    def __init__(self, stage, exc, **extra):
        super().__init__(f"{stage}: {exc}")
        self.stage, self.exc, self.extra = stage, exc, extra


def _launch(metric, edge, r, omega):
    start = np.asarray(edge.start, float)
    if edge.terminal:
        return start, terminal_start_expansion(metric, start, r, omega).direction
    d = np.asarray(edge.direction, float)
    return start, d / metric.norm(start, d)


def shoot_edges(cfg, metric, r):
    out = []
    for e in cfg.edges:
        start, d = _launch(metric, e, r, cfg.omega)
        out.append(shoot_curve(metric, start, d, e.f0_at(r), r, cfg.omega, e.length))
    return out


def settle_radius(cfg, metric, r):
    """Radius near ``r`` at which the edge, shot with that radius, closes exactly."""
    return consistent_radius(metric, lambda s: shoot_edges(cfg, metric, s)[0], r,
                             tau=cfg.tau)[0]


def make_graph(cfg, curves):
    verts = []
    for v in cfg.vertices:
        inc = [(cfg.edge_index(eid), end == "start") for eid, end in v.edges]
        verts.append((np.asarray(v.point, float), inc))
    graph = NetworkGraph(curves, verts)
    graph.validate()
    return graph


def sample_perturbation(cfg, metric, network):
    w = cfg.perturbation.get("w_scale", 0.0)
    xi = cfg.perturbation.get("xi_scale", 0.0)
    if w == 0 and xi == 0:
        return network
    rng = np.random.default_rng(cfg.seed)
    n, m = len(network.beads), len(network.necks)
    W = rng.normal(size=(n, 3))
    W *= (w * rng.uniform(size=n) / metric.norm(network.points, W))[:, None]
    Xi = rng.normal(size=(m, 6))
    Xi *= (xi * rng.uniform(size=m) / np.linalg.norm(Xi, axis=1))[:, None]
    return apply_perturbation(metric, network, W, Xi, w_max=max(w, 1e-300),
                              xi_max=max(xi, 1e-300))


class Pipeline:
    """Lazily computed stages for one configuration."""

    def __init__(self, cfg, out, workers=1):
        self.cfg, self.out, self.workers = cfg, Path(out), workers
        self.metric = make_metric(cfg.metric)
        self._r = self._curves = self._network = self._mesh = None

    @property
    def r(self):
        if self._r is None:
            try:
                self._r = (settle_radius(self.cfg, self.metric, self.cfg.r)
                           if self.cfg.adjust_r else self.cfg.r)
            except (ValueError, RuntimeError) as exc:
                raise StageError("place", exc, edge=self.cfg.edges[0].id) from exc
        return self._r

    @property
    def curves(self):
        if self._curves is None:
            try:
                self._curves = shoot_edges(self.cfg, self.metric, self.r)
            except (ValueError, RuntimeError) as exc:
                raise StageError("curves", exc) from exc
        return self._curves

    @property
    def network(self):
        if self._network is None:
            try:
                net = build_network(self.metric, make_graph(self.cfg, self.curves), self.r,
                                    tau=self.cfg.tau)
                self._network = sample_perturbation(self.cfg, self.metric, net)
            except PlacementError as exc:
                extra = {}
                if exc.edge is not None:
                    extra["edge"] = self.cfg.edges[exc.edge].id
                if exc.closing_tau is not None:
                    extra["closing_tau"] = exc.closing_tau
                raise StageError("place", exc, **extra) from exc
            except (ValueError, RuntimeError) as exc:
                raise StageError("place", exc) from exc
        return self._network

    @property
    def mesh(self):
        if self._mesh is None:
            try:
                self._mesh = assemble(self.metric, self.network, self.cfg.make_resolution())
            except (ValueError, RuntimeError) as exc:
                raise StageError("build", exc) from exc
        return self._mesh

    # stages -------------------------------------------------------------
    def write_curves(self):
        rows = []
        for e, c in zip(self.cfg.edges, self.curves):
            for t, x, T, f in zip(c.t, c.points, c.tangents, c.f):
                rows.append({"edge": e.id, "t": t, "x1": x[0], "x2": x[1], "x3": x[2],
                             "T1": T[0], "T2": T[1], "T3": T[2], "f": f})
        D.write_sweep_csv(rows, self.out / "curves.csv")

    def write_placement(self):
        net = self.network
        ids = [e.id for e in self.cfg.edges]
        rows = [{"bead": i, "edge": ids[b.edge] if b.edge >= 0 else "", "t": float(b.t),
                 "x1": b.point[0], "x2": b.point[1], "x3": b.point[2],
                 "vertex": "" if b.vertex is None else b.vertex, "necks": len(b.necks)}
                for i, b in enumerate(net.beads)]
        D.write_sweep_csv(rows, self.out / "placement.csv")
        rows = [{"neck": k, "bead_a": n.beads[0], "bead_b": n.beads[1], "edge": ids[n.edge],
                 "tau": n.tau, "eps_flat": n.eps_flat, "weight": n.weight, "length": n.length}
                for k, n in enumerate(net.necks)]
        D.write_sweep_csv(rows, self.out / "necks.csv",
                          ["neck", "bead_a", "bead_b", "edge", "tau", "eps_flat", "weight",
                           "length"])
        summary = {"r": self.r, "beads": len(net.beads), "necks": len(net.necks),
                   "closing_tau": {ids[k]: v for k, v in net.closing.items()}}
        _write_json(self.out / "placement.json", summary)

    def write_mesh(self):
        write_obj(self.mesh, self.out / "mesh.obj")
        write_ply(self.mesh, self.out / "mesh.ply")

    def write_report(self):
        try:
            mesh = self.mesh if self.cfg.mesh else None
            rep = D.balance_report(self.network, self.metric, self.cfg.omega, mesh,
                                   nu=self.cfg.nu)
        except StageError:
            raise
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise StageError("diagnose", exc) from exc
        interior = self.network.interior_beads()
        rep.notes["interior_beads"] = interior
        rep.notes["max_interior_residual"] = _max_norm(rep.bead_residuals, interior)
        (self.out / "report.json").write_text(rep.to_json() + "\n")
        return rep

    def write_sweep(self):
        radii = list(self.cfg.sweep)
        if self.workers > 1 and len(radii) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                rows = list(pool.map(sweep_point, [self.cfg] * len(radii), radii))
        else:
            rows = [sweep_point(self.cfg, r0) for r0 in radii]
        failed = [row for row in rows if "error" in row]
        if failed:
            raise StageError("sweep", RuntimeError(failed[0]["error"]), r=failed[0]["r_target"])
        add_orders(rows)
        D.write_sweep_csv(rows, self.out / "sweep.csv", SWEEP_COLUMNS)
        return rows


SWEEP_COLUMNS = ["r_target", "r", "beads", "eps", "residual", "residual_rel", "order",
                 "fitted_order"]


def _max_norm(vectors, ids):
    if not ids:
        return float("nan")
    return float(max(np.linalg.norm(vectors[q]) for q in ids))


def sweep_point(cfg, r0):
    """One row of a radius sweep; failures are returned, not raised."""
    metric = make_metric(cfg.metric)
    try:
        r = settle_radius(cfg, metric, r0) if cfg.adjust_r else r0
        curves = shoot_edges(cfg, metric, r)
        net = build_network(metric, make_graph(cfg, curves), r, tau=cfg.tau)
    except (ValueError, RuntimeError) as exc:
        return {"r_target": r0, "error": f"{type(exc).__name__}: {exc}"}
    ids = net.interior_beads()
    res = [D.bead_balance_residual(net, metric, cfg.omega, q) for q in ids]
    worst = _max_norm(res, list(range(len(ids))))
    return {"r_target": float(r0), "r": float(r), "beads": len(net.beads),
            "eps": float(max(n.eps_flat for n in net.necks)) if net.necks else float("nan"),
            "residual": worst, "residual_rel": worst / r**3}


def add_orders(rows):
    """Pairwise and least-squares orders of ``residual_rel`` in ``r``."""
    r = np.array([row["r"] for row in rows])
    e = np.array([row["residual_rel"] for row in rows])
    for i, row in enumerate(rows):
        row["order"] = (float(np.log(e[i] / e[i - 1]) / np.log(r[i] / r[i - 1]))
                        if i > 0 and e[i] > 0 and e[i - 1] > 0 else float("nan"))
    ok = e > 0
    fitted = float(D.fit_order(r[ok], e[ok])) if ok.sum() >= 2 else float("nan")
    for row in rows:
        row["fitted_order"] = fitted
    return rows


def _write_json(path, data):
    Path(path).write_text(json.dumps(D._plain(data), sort_keys=True, indent=1) + "\n")


STAGES = {
    "curves": ("write_curves",),
    "place": ("write_placement",),
    "build": ("write_mesh",),
    "diagnose": ("write_report",),
    "sweep": ("write_sweep",),
    "all": ("write_curves", "write_placement", "write_mesh", "write_report"),
}


def run(cfg, command, out, workers=1):
    """Run ``command``; returns the exit status."""
    violations = validate(cfg)
    if command == "sweep" and not cfg.sweep:
        violations.append("sweep needs [sweep] radii")
    if violations:
        for v in violations:
            log.error("config: %s", v)
        return 2
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    err = out / "error.json"
    if err.exists():
        err.unlink()
    pipe = Pipeline(cfg, out, workers)
    steps = list(STAGES[command])
    if command == "all" and cfg.sweep:
        steps.append("write_sweep")
    try:
        for step in steps:
            log.info("stage %s", step)
            getattr(pipe, step)()
    except StageError as exc:
        info = {"stage": exc.stage, "error": type(exc.exc).__name__, "message": str(exc.exc)}
        info.update(exc.extra)
        _write_json(err, info)
        log.error("%s failed: %s", exc.stage, exc.exc)
        return 1
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(prog="cmcnet", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--command", default="all", choices=COMMANDS)
    p.add_argument("--out", help="output directory (default: $CMCNET_OUT, then config)")
    p.add_argument("--workers", type=int, default=1, help="cap on worker processes")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.workers < 1:
        log.error("--workers must be at least 1")
        return 2
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, TypeError, AttributeError) as exc:
        log.error("config: %s", exc)
        return 2
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            log.error("--seed must be an unsigned 64-bit integer")
            return 2
        cfg.seed = args.seed
    out = args.out or os.environ.get("CMCNET_OUT") or cfg.out or "cmcnet-out"
    return run(cfg, args.command, out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
