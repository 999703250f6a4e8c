import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linedefect.bloch import (
    BandError,
    BandStructure,
    SigmaError,
    analyze_gap,
    band_ranges,
    check_nonconstant_bands,
    compute_bands,
    detect_gaps,
    extract_sigma,
    fit_edge_nondegeneracy,
    isolation_margin,
    sort_analytic,
    uniform_kgrid,
)
from linedefect.medium import build_periodic_medium

from conftest import KX, ROD


@pytest.fixture(scope="module")
def free32():
    # an even N_k keeps k = 0 on the grid
    return compute_bands(build_periodic_medium(1.0, [], 32), 0.0, 16, 6)


def _table(rows, n_k=32):
    """Synthetic band table from functions of k."""
    k = uniform_kgrid(n_k)
    return BandStructure(k, np.stack([f(k) for f in rows], axis=1))


def _wrap(x):
    return np.mod(x + np.pi, 2 * np.pi) - np.pi


def test_free_bands(free32):
    k, b = free32.kgrid, free32.bands
    p0 = int(np.argmin(np.abs(k)))
    assert abs(b[p0, 0]) <= 1e-10
    sel = (np.abs(k) <= np.pi / 2) & (k != 0)
    assert np.all(np.abs(b[sel, 0] - k[sel] ** 2) <= 0.01 * k[sel] ** 2)
    assert np.allclose(b[p0, 1:5], 4 * np.pi**2, rtol=0.01)
    assert np.all(b + 1 > 0)


def test_free_bands_close_nothing_and_fit_unit_curvature(free32):
    wide = compute_bands(build_periodic_medium(1.0, [], 16), 0.0, 16, 12)
    assert detect_gaps(wide, (0.0, 60.0)) == []
    assert check_nonconstant_bands(free32).all()
    from linedefect.bloch import SigmaPoint
    p0 = int(np.argmin(np.abs(free32.kgrid)))
    fit = fit_edge_nondegeneracy(free32, [SigmaPoint(0, 0, p0, 0.0, 0.0)], 0.0)[0]
    assert fit.alpha == pytest.approx(1.0, rel=0.02)
    assert fit.ok


def test_time_reversal_symmetry(small):
    b = small.table.magnitude()
    k = small.table.kgrid
    for p in range(k.size):
        q = int(np.argmin(np.abs(_wrap(k + k[p]))))
        assert np.allclose(b[p], b[q], atol=1e-9)


def test_parseval_completeness(rng):
    eps = build_periodic_medium(1.0, [ROD], 4)
    table = compute_bands(eps, 0.3, 4, 16)
    for p in range(table.n_k):
        V, M = table.vectors[p], table.masses[p]
        assert np.allclose(V.conj().T @ (M @ V), np.eye(16), atol=1e-10)
        f = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        rec = V @ (V.conj().T @ (M @ f))
        assert np.linalg.norm(rec - f) <= 1e-10 * np.linalg.norm(f)


def test_band_count_validated():
    with pytest.raises(BandError):
        compute_bands(build_periodic_medium(1.0, [], 4), 0.0, 4, 17)


def test_sorting_without_crossings_is_identity(small):
    raw = compute_bands(small.eps0, KX, small.table.kgrid, 3)
    srt = sort_analytic(raw)
    assert np.array_equal(srt.bands, raw.bands) and srt.sorted


def test_sorting_follows_linear_crossing():
    k = uniform_kgrid(16)
    up, down = 2.0 + k, 2.0 - k
    bands = np.stack([np.minimum(up, down), np.maximum(up, down)], axis=1)
    e = np.eye(2, dtype=complex)
    vecs = np.array([e if u <= d else e[:, ::-1] for u, d in zip(up, down)])
    srt = sort_analytic(BandStructure(k, bands, vecs))
    assert np.allclose(srt.bands[:, 0], up) or np.allclose(srt.bands[:, 0], down)
    assert np.allclose(np.diff(srt.bands[:, 0]), np.diff(srt.bands[:, 0])[0])


def test_sorted_free_bands_have_no_kinks():
    table = sort_analytic(compute_bands(build_periodic_medium(1.0, [], 16), 0.0, 32, 9))
    b = table.bands
    d2 = np.diff(b, 2, axis=0) / table.dk**2
    # above the lowest value of the top computed band, uncomputed bands may
    # cross in, so only stencils lying entirely below it are resolvable
    ceiling = table.magnitude()[:, -1].min()
    below = (b[:-2] < ceiling) & (b[1:-1] < ceiling) & (b[2:] < ceiling)
    interior = (np.abs(table.kgrid[1:-1]) < np.pi - table.dk)[:, None] & below
    assert interior.sum() > 5 * 20
    # every closed-form branch (2 pi n + k)^2 + (2 pi m)^2 has second derivative 2
    assert np.all(np.abs(d2[interior]) <= 2.5)


def test_detect_gaps_synthetic():
    table = _table([lambda k: 0.5 + 0.5 * np.cos(k), lambda k: 2.5 + 0.5 * np.cos(k)])
    gaps = detect_gaps(table, (-1.0, 5.0))
    assert gaps == [(pytest.approx(1.0), pytest.approx(2.0))]


def test_high_contrast_crystal_has_gap(small):
    assert detect_gaps(small.table, (0.0, 60.0))
    lam0, lam1 = small.gap
    assert lam0 < lam1
    vals = small.table.bands
    assert not np.any((vals > lam0) & (vals < lam1))
    mag = small.table.magnitude()
    s0 = small.report.s0
    assert np.all(mag[:, :s0] <= lam0) and np.all(mag[:, s0:] >= lam1)


def test_gap_refinement_is_monotone(small):
    coarse = compute_bands(small.eps0, KX, 8, 6, keep_vectors=False)
    fine = compute_bands(small.eps0, KX, 16, 6, keep_vectors=False)
    g0 = detect_gaps(coarse, (0.0, 8.0))[0]
    g1 = detect_gaps(fine, (0.0, 8.0))[0]
    lip = np.max(np.abs(np.diff(fine.magnitude(), axis=0))) / fine.dk
    assert (g0[1] - g0[0]) - (g1[1] - g1[0]) <= 2 * lip * coarse.dk


def test_sigma_single_parabola():
    table = _table([lambda k: -1 + 0 * k, lambda k: 3 + 2 * k**2])
    sigma, s0, lam1 = extract_sigma(table, (-1.0, 3.0))
    assert len(sigma) == 1 and s0 == 1 and lam1 == 3.0
    assert sigma[0].k == pytest.approx(0.0, abs=1e-12)


def test_sigma_time_reversal_pair():
    ks = 1.0
    table = _table([lambda k: 0 * k, lambda k: 3 + (k**2 - ks**2) ** 2], n_k=64)
    sigma, _, _ = extract_sigma(table, (0.0, 3.0), tau_lam=1e-2)
    assert len(sigma) == 2
    assert sorted(abs(s.k) for s in sigma) == pytest.approx([ks, ks], abs=0.05)
    assert sigma[0].k == pytest.approx(-sigma[1].k, abs=1e-12)


def test_sigma_two_bands_same_point():
    table = _table([lambda k: 0 * k, lambda k: 3 + k**2, lambda k: 3 + 4 * k**2])
    sigma, _, _ = extract_sigma(table, (0.0, 3.0))
    assert len(sigma) == 2
    assert sigma[0].p == sigma[1].p
    assert {s.label for s in sigma} == {1, 2}


def test_sigma_flat_edge_rejected():
    table = _table([lambda k: 0 * k, lambda k: 3 + 1e-9 * k**2])
    with pytest.raises(SigmaError, match="near-constant"):
        extract_sigma(table, (0.0, 3.0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 63), st.floats(0.2, 5.0))
def test_fit_recovers_quadratic(p_star, alpha):
    k = uniform_kgrid(64)
    ks = k[p_star]
    table = _table([lambda k: 0 * k, lambda k: 3 + alpha * _wrap(k - ks) ** 2], n_k=64)
    sigma, _, lam1 = extract_sigma(table, (0.0, 3.0))
    fit = fit_edge_nondegeneracy(table, sigma, lam1)[0]
    assert fit.alpha == pytest.approx(alpha, abs=1e-6)
    assert fit.ok


def test_fit_flags_quartic():
    table = _table([lambda k: 0 * k, lambda k: 3 + (k - 0.5) ** 4], n_k=64)
    sigma, _, lam1 = extract_sigma(table, (0.0, 3.0), tau_lam=1e-12)
    assert not fit_edge_nondegeneracy(table, sigma, lam1)[0].ok


def test_nonconstant_flags():
    table = _table([lambda k: 1 + 0 * k, lambda k: 3 + k**2])
    assert list(check_nonconstant_bands(table)) == [False, True]
    rep = analyze_gap(table, (1.0, 3.0))
    assert not rep.nonconstant and not rep.assumptions_hold


def test_isolation_margin():
    table = _table([lambda k: 1 + np.cos(k), lambda k: 3 + k**2, lambda k: 6 + 0 * k])
    sigma, _, lam1 = extract_sigma(table, (2.0, 3.0))
    assert isolation_margin(table, sigma, lam1) == pytest.approx(1.0)
    table = _table([lambda k: 3 + k**2, lambda k: 6 + 0 * k])
    sigma, _, lam1 = extract_sigma(table, (-1.0, 3.0))
    assert isolation_margin(table, sigma, lam1) == pytest.approx(3.0)


def test_small_fixture_report(small):
    rep = small.report
    assert rep.n == 1 and rep.nonconstant
    # nine momenta leave the x..x^4 edge fit without spare samples
    assert not rep.nondegenerate and not rep.assumptions_hold
    assert rep.sigma[0].k == pytest.approx(-np.pi)
    assert rep.eta > 0
    assert band_ranges(small.table).shape == (8, 2)
    d = rep.as_dict()
    assert d["s0"] == rep.s0 + 1 and d["n"] == 1
