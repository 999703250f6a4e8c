import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from linedefect.bs import g0_norm
from linedefect.discretize import (
    ShiftSingularError,
    apply_resolvent,
    assemble_defect_stiffness,
    assemble_forms,
    build_mesh,
    fiber_momenta,
    h1_norm2,
    hminus_inner,
    hminus_norm2,
    solve_phi_inverse,
    solve_shifted,
)
from linedefect.medium import Rect, apply_line_defect, build_periodic_medium, periodic_extension


def _cell(N=8, k_x=0.0, k=0.0, eps_in=12.0):
    eps = build_periodic_medium(1.0, [Rect(0.25, 0.75, 0.25, 0.75, eps_in)], N)
    return assemble_forms(build_mesh(N, 1, k_x, k), eps)


def _cvec(rng, n, m=None):
    shape = (n,) if m is None else (n, m)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_node_counts():
    assert build_mesh(4, 1, 0.0, 0.0).n_nodes == 16
    assert build_mesh(4, 3, 0.0).n_nodes == 48


def test_momentum_outside_zone_rejected():
    with pytest.raises(ValueError):
        build_mesh(4, 1, 0.0, 4.0)
    with pytest.raises(ValueError):
        build_mesh(4, 1, 3.5, 0.0)
    with pytest.raises(ValueError):
        build_mesh(3, 1, 0.0, 0.0)


def test_fiber_momenta_are_dft_grid():
    for ny in (1, 4, 9, 17):
        k = fiber_momenta(ny)
        assert np.allclose(k, -np.pi + 2 * np.pi * np.arange(ny) / ny)


def test_constants_in_stiffness_kernel():
    forms = assemble_forms(build_mesh(8, 1, 0.0, 0.0), build_periodic_medium(1.0, [], 8))
    u = np.ones(forms.n)
    assert abs(u @ (forms.S @ u)) < 1e-12
    assert u @ (forms.M @ u) == pytest.approx(1.0, abs=1e-13)


@settings(max_examples=15, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
def test_hermitian_and_definite(k_x, k):
    forms = _cell(6, k_x, k)
    for X in (forms.S, forms.M, forms.A):
        assert abs(X - X.conj().T).max() <= 1e-14 * abs(X).max()
    assert np.linalg.eigvalsh(forms.S.toarray()).min() > -1e-12
    assert np.linalg.eigvalsh(forms.M.toarray()).min() > 0
    assert np.linalg.eigvalsh(forms.A.toarray()).min() > 0


def test_free_cell_second_eigenvalue():
    forms = assemble_forms(build_mesh(32, 1, 0.0, 0.0), build_periodic_medium(1.0, [], 32))
    w = sla.eigh(forms.S.toarray(), forms.M.toarray(), eigvals_only=True, subset_by_index=[0, 4])
    assert abs(w[0]) < 1e-10
    assert w[1] == pytest.approx(4 * np.pi**2, rel=0.01)


def test_mass_matrix_matches_midpoint_quadrature_at_second_order():
    errs = []
    for N in (8, 16, 32):
        mesh = build_mesh(N, 1, 0.0, 0.0)
        forms = assemble_forms(mesh, build_periodic_medium(1.0, [], N))
        x, y = mesh.node_coordinates()
        u = np.cos(2 * np.pi * x) + 0.5 * np.sin(2 * np.pi * y)
        idx, ph = mesh.element_dofs()
        mid = np.mean(u[idx] * ph, axis=1)  # bilinear interpolant at the element midpoint
        quad = np.sum(np.abs(mid) ** 2) / N**2
        errs.append(abs(np.real(u @ (forms.M @ u)) - quad))
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.1)
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)


def test_phi_inverse(rng):
    forms = _cell(8, 0.3, -1.1)
    v = _cvec(rng, forms.n)
    u = solve_phi_inverse(forms, forms.A @ v)
    assert np.linalg.norm(u - v) <= 1e-12 * np.linalg.norm(v)
    assert np.all(solve_phi_inverse(forms, np.zeros(forms.n)) == 0)
    F = _cvec(rng, forms.n)
    u = solve_phi_inverse(forms, F)
    assert hminus_norm2(forms, F) == pytest.approx(h1_norm2(forms, u), rel=1e-12)
    G = _cvec(rng, forms.n)
    assert hminus_inner(forms, F, G) == pytest.approx(np.conj(hminus_inner(forms, G, F)), rel=1e-12)
    assert hminus_inner(forms, forms.A @ v, forms.A @ u) == pytest.approx(np.vdot(u, forms.A @ v), rel=1e-12)


def test_g0_is_an_isometry():
    assert g0_norm(_cell(8, 0.4, 0.2)) == pytest.approx(1.0, abs=1e-10)


def test_solve_shifted(rng):
    forms = _cell(8, 0.3, 0.7)
    F = _cvec(rng, forms.n)
    u0 = solve_shifted(forms, 0.0, F)
    assert np.linalg.norm(forms.M @ u0 - F) <= 1e-12 * np.linalg.norm(F)
    mu = 0.07
    v = _cvec(rng, forms.n)
    u = solve_shifted(forms, mu, (forms.M - mu * forms.A) @ v)
    assert np.linalg.norm(u - v) <= 1e-12 * np.linalg.norm(v)


def test_shifted_residual_in_gap_and_resolvent_identity(small, rng):
    forms = small.forms0
    lam = 0.5 * sum(small.gap)
    mu = 1.0 / (lam + 1.0)
    F = _cvec(rng, forms.n)
    u = solve_shifted(forms, mu, F)
    assert np.linalg.norm((forms.M - mu * forms.A) @ u - F) <= 1e-10 * np.linalg.norm(F)
    r = apply_resolvent(forms, lam, F)
    assert np.linalg.norm((forms.A - (lam + 1) * forms.M) @ r - F) <= 1e-10 * np.linalg.norm(F)
    # (A - M / mu)^-1 = -mu (M - mu A)^-1
    assert np.linalg.norm(r + mu * u) <= 1e-12 * np.linalg.norm(r)
    assert np.allclose(apply_resolvent(forms, -1.0, F), solve_phi_inverse(forms, F), rtol=0, atol=1e-13)


def test_shift_on_spectrum_is_reported():
    forms = _cell(6, 0.0, 0.0)
    w = sla.eigh(forms.A.toarray(), forms.M.toarray(), eigvals_only=True)
    with pytest.raises(ShiftSingularError) as exc:
        solve_shifted(forms, 1.0 / w[3], np.ones(forms.n))
    assert exc.value.pivot_ratio < 1e-12
    assert "spectrum" in str(exc.value)


def test_stiffness_monotone_in_inverse_permittivity(small):
    eps1 = small.eps1(3.0)
    D = assemble_defect_stiffness(small.mesh, small.base, eps1).toarray()
    assert np.linalg.eigvalsh(0.5 * (D + D.conj().T)).min() > -1e-12
    forms1 = assemble_forms(small.mesh, eps1)
    diff = (small.forms0.S - forms1.S).toarray()
    assert np.allclose(diff, D, atol=1e-12)


def test_strip_of_periodic_medium_matches_extension():
    eps0 = build_periodic_medium(1.0, [Rect(0.25, 0.75, 0.25, 0.75, 12.0)], 4)
    e1 = apply_line_defect(eps0, [], 0.0, 3)
    assert np.array_equal(e1.values, periodic_extension(eps0, 3).values)
