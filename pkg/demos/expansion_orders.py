"""Remainder of the mean-curvature expansion on small patches.

Prints, for shrinking patch diameters D, the exact change of H caused by
the metric, the error of the leading term and the remainder after the
second-order terms, first with the derived coefficient of the normal
derivative of the curvature and then with the alternative -1/6.
"""

import numpy as np

from cmcnet import diagnostics as D
from cmcnet.catalog import conformal
from cmcnet.manifold import orthonormalize

m = conformal("0.1*x1 + 0.2*sin(x2)*x3 - 0.05*x1^2")
p = np.array([0.1, 0.05, -0.1])
F = orthonormalize(m, p, np.eye(3))

for coef in (D.NABLA_N_RM, D.ALTERNATIVE_NABLA_N_RM):
    print(f"coefficient {coef:+.4f}")
    for kind in ("disk", "graph", "catenoid"):
        out = D.expansion_check(m, p, F, kind, nabla_n_rm=coef)
        print(f"  {kind:9s} order {out['order']:.2f}")
        for Dm, dh, lead, rem in out["rows"]:
            print(f"    D = {Dm:<5g} |dH| = {dh:.3e}  lead err = {lead:.3e}  remainder = {rem:.3e}")
