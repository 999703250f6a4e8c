"""How the bound state emerges as the defect strength t grows.

For each t, prints kappa_1 at the middle of the gap image, the crossing count
and the supercell eigenvalues. The count stays at n while the defect is weak
enough; at large t a second state can appear.

Run: python demos/strength_sweep.py
"""

import numpy as np

from linedefect.bloch import analyze_gap, compute_bands, detect_gaps, sort_analytic
from linedefect.bs import assemble_Amu, build_K, gap_image, kappa_spectrum, sweep_and_count
from linedefect.discretize import assemble_forms, build_mesh, fiber_momenta
from linedefect.medium import Rect, apply_line_defect, build_periodic_medium, periodic_extension
from linedefect.supercell import defect_spectrum_direct

K_X = np.pi / 2
N, N_Y = 16, 17
DEFECT = [Rect(0.0625, 0.1875, 0.0625, 0.1875, 1.0)]

eps0 = build_periodic_medium(1.0, [Rect(0.25, 0.75, 0.25, 0.75, 12.0)], N)
table = sort_analytic(compute_bands(eps0, K_X, fiber_momenta(N_Y), 8))
rep = analyze_gap(table, detect_gaps(table, (7.0, 12.0))[0])
gap = (rep.lam0, rep.lam1)
lo, hi = gap_image(gap)
mu_mid = 0.5 * (lo + hi)
mesh = build_mesh(N, N_Y, K_X)
forms0 = assemble_forms(mesh, periodic_extension(eps0, N_Y))
print(f"gap {gap}, n = {rep.n}, mid-gap mu = {mu_mid:.6f}")
print(f"{'t':>7} {'kappa1(mid)':>12} {'BS':>3} {'cell':>4}  eigenvalues")

for t in (0.0, 0.5, 2.0, 10.0, 40.0, 100.0):
    eps1 = apply_line_defect(eps0, DEFECT, t, N_Y)
    forms1 = assemble_forms(mesh, eps1)
    state = build_K(forms0, forms1)
    k1 = kappa_spectrum(assemble_Amu(state, mu_mid), 1)[0] if state.r else 0.0
    count = sweep_and_count(state, gap).count
    spec = defect_spectrum_direct(eps1, K_X, gap, forms=forms1)
    print(f"{t:7.1f} {k1:12.5f} {count:3d} {spec.count:4d}  {np.round(spec.eigenvalues, 6)}")
