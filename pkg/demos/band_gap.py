"""Band structure of a square-rod crystal along one fiber and the edge data of its gap.

Run: python demos/band_gap.py
"""

import numpy as np

from linedefect.bloch import analyze_gap, compute_bands, detect_gaps, sort_analytic
from linedefect.discretize import fiber_momenta
from linedefect.medium import Rect, build_periodic_medium

K_X = np.pi / 2
N, N_Y = 16, 17

eps0 = build_periodic_medium(1.0, [Rect(0.25, 0.75, 0.25, 0.75, 12.0)], N)
table = sort_analytic(compute_bands(eps0, K_X, fiber_momenta(N_Y), 8))

print(f"{'k':>8} " + " ".join(f"band{s + 1:>2}" for s in range(table.n_bands)))
for k, row in zip(table.kgrid, table.magnitude()):
    print(f"{k:8.4f} " + " ".join(f"{v:7.3f}" for v in row))

for lo, hi in detect_gaps(table, (0.0, 40.0)):
    rep = analyze_gap(table, (lo, hi))
    print(f"\ngap ({rep.lam0:.6f}, {rep.lam1:.6f}), width {rep.lam1 - rep.lam0:.4f}")
    print(f"  upper edge attained at {rep.n} point(s):")
    for s, fit in zip(rep.sigma, rep.alpha_delta):
        print(f"    band {s.rank + 1}, k = {s.k:+.6f}, curvature alpha = {fit.alpha:.4f} (fit ok: {fit.ok})")
    print(f"  non-degenerate edge: {rep.nondegenerate}, isolation margin {rep.eta:.4f}")
