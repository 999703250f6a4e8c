"""Count defect eigenvalues in a gap two ways and compare with the edge count n.

A weak line defect (higher permittivity in a small square of the central
cell) pulls eigenvalues down into the gap from its upper edge. The
Birman-Schwinger sweep finds them as crossings of kappa_m(mu) = -1; the
supercell oracle diagonalizes the strip directly.

Run: python demos/count_defect_states.py [t]
"""

import sys

import numpy as np

from linedefect.bloch import analyze_gap, compute_bands, detect_gaps, sort_analytic
from linedefect.bs import build_K, sweep_and_count
from linedefect.discretize import assemble_forms, build_mesh, fiber_momenta
from linedefect.medium import Rect, apply_line_defect, build_periodic_medium, periodic_extension
from linedefect.supercell import decay_profile, defect_spectrum_direct

K_X = np.pi / 2
N, N_Y = 16, 17
DEFECT = [Rect(0.0625, 0.1875, 0.0625, 0.1875, 1.0)]
t = float(sys.argv[1]) if len(sys.argv) > 1 else 10.0

eps0 = build_periodic_medium(1.0, [Rect(0.25, 0.75, 0.25, 0.75, 12.0)], N)
table = sort_analytic(compute_bands(eps0, K_X, fiber_momenta(N_Y), 8))
rep = analyze_gap(table, detect_gaps(table, (7.0, 12.0))[0])
gap = (rep.lam0, rep.lam1)
print(f"gap {gap}, edge points n = {rep.n}")

mesh = build_mesh(N, N_Y, K_X)
forms0 = assemble_forms(mesh, periodic_extension(eps0, N_Y))
eps1 = apply_line_defect(eps0, DEFECT, t, N_Y)
forms1 = assemble_forms(mesh, eps1)

state = build_K(forms0, forms1)
trace = sweep_and_count(state, gap)
print(f"t = {t:g}: K has rank {state.r}, norm {state.norm:.4f}")
print(f"Birman-Schwinger: {trace.count} crossing(s) over {trace.mu.size} mu samples")
for c in trace.crossings:
    print(f"  kappa_{c.m} = -1 at mu = {c.mu:.12f}  ->  lambda* = {c.lam:.10f}")

spec = defect_spectrum_direct(eps1, K_X, gap, forms=forms1)
print(f"supercell: {spec.count} eigenvalue(s) in the gap: {np.round(spec.eigenvalues, 10)}")
if spec.count == trace.count and spec.count:
    print(f"max difference {np.max(np.abs(trace.eigenvalues - np.sort(spec.eigenvalues))):.2e}")
for i in range(spec.count):
    prof = decay_profile(spec, i)
    print(f"mode {i}: mass fraction by distance from the defect cell "
          f"{np.round(prof.by_distance()[:7], 4)}; within 3 cells {prof.within(3):.3f}")
