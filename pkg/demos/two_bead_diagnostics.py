"""Two unit beads joined by one neck in flat space: the full diagnostic chain.

Run with ``python demos/two_bead_diagnostics.py``.
"""

import numpy as np

from cmcnet import diagnostics as D
from cmcnet.catalog import euclidean
from cmcnet.curves import NetworkGraph, shoot_curve
from cmcnet.mesh import assemble, euler_characteristic
from cmcnet.network import build_network

tau, r = 0.01, 1.0
m = euclidean()
cv = shoot_curve(m, np.zeros(3), np.array([1.0, 0.0, 0.0]), 1.0, r, 1.0, (2 + tau) * r)

net = build_network(m, NetworkGraph([cv], []), r, tau=tau)
mesh = assemble(m, net)
print(f"{mesh.n_vertices} vertices, Euler characteristic {euler_characteristic(mesh)}")

H = D.discrete_mean_curvature(mesh, m).H
print(f"H on the bead cores: {np.median(H):.6f} (sphere value {2 / r})")
print(f"weighted sup norm |H - 2/r|: {D.weighted_sup_norm(mesh, H):.4e}")

for q in range(2):
    pi = D.projection_integrals(mesh, m, net, ("bead", q), H).values
    print(f"bead {q} projection (ambient): {net.beads[q].frame @ pi}")

M = D.neck_balance_matrix(mesh, m, net, 0)
print(f"neck matrix: condition {M.condition:.2e}, off-pattern {M.off_pattern:.2e}")
pi = D.projection_integrals(mesh, m, net, ("neck", 0), H).values
a = D.solve_neck_deformation(M, pi, r)
print(f"optimal neck deformation: {np.array2string(a, precision=3)}")
print(f"|a| = {np.linalg.norm(a):.3e}, neck scale = {net.necks[0].eps_flat:.3e}")
