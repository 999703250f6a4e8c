import numpy as np
import pytest
import scipy.linalg as sla

from linedefect.supercell import (
    SupercellError,
    decay_profile,
    defect_spectrum_direct,
    mass_profile,
    torus_gap,
    truncation_study,
)

from conftest import KX, SMALL_DEFECT


def test_unperturbed_strip_has_empty_gap(small):
    spec = defect_spectrum_direct(small.eps1(0.0), KX, small.gap)
    assert spec.count == 0


@pytest.mark.parametrize("t", [0.5, 2.0, 10.0, 50.0])
def test_count_equals_edge_count(small, t):
    spec = defect_spectrum_direct(small.eps1(t), KX, small.gap)
    assert spec.count == small.report.n
    assert np.all((spec.eigenvalues > small.gap[0]) & (spec.eigenvalues < small.gap[1]))
    G = spec.eigenvectors.conj().T @ (small.forms1(t).M @ spec.eigenvectors)
    assert np.allclose(G, np.eye(spec.count), atol=1e-10)


def test_defect_eigenvalues_move_down_with_strength(small):
    lams = [defect_spectrum_direct(small.eps1(t), KX, small.gap).eigenvalues[0] for t in (0.5, 2.0, 10.0, 50.0)]
    assert np.all(np.diff(lams) < 0)


def test_bound_state_profile(small):
    spec = defect_spectrum_direct(small.eps1(50.0), KX, small.gap)
    prof = decay_profile(spec, 0)
    assert prof.fractions.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(prof.fractions >= 0)
    assert prof.is_decaying()
    assert prof.by_distance()[0] == prof.fractions.max()
    assert prof.within(small.N_y) == pytest.approx(1.0)


def test_band_edge_vector_is_spread(small):
    f = small.forms0
    w, V = sla.eigh(f.S.toarray(), f.M.toarray())
    j = int(np.argmin(np.abs(w - small.gap[1])))
    assert abs(w[j] - small.gap[1]) <= 1e-8 * small.gap[1]
    prof = mass_profile(V[:, j], small.mesh)
    assert prof.fractions.max() <= 3 / small.N_y


def test_strip_extent_validated(small):
    from linedefect.medium import DielectricMap

    short = DielectricMap(small.N, np.ones((7 * small.N, small.N)), 7)
    with pytest.raises(SupercellError):
        defect_spectrum_direct(short, KX, small.gap)


def test_torus_gap_matches_band_table(small):
    lo, hi = torus_gap(small.eps0, KX, small.N_y, 1)
    assert lo == pytest.approx(small.gap[0], rel=1e-9)
    assert hi == pytest.approx(small.gap[1], rel=1e-9)


def test_truncation_study(small):
    study = truncation_study(small.eps0, [SMALL_DEFECT], 10.0, KX, small.gap, [9, 17])
    assert [r.N_y for r in study.rows] == [9, 17]
    assert not study.unconverged_truncation
    assert all(r.eigenvalues.size == small.report.n for r in study.rows)
    d = study.as_dict()
    assert d["max_change"] == study.max_change
    empty = truncation_study(small.eps0, [SMALL_DEFECT], 0.0, KX, small.gap, [9, 17])
    assert all(r.eigenvalues.size == 0 for r in empty.rows) and empty.converged
    with pytest.raises(SupercellError):
        truncation_study(small.eps0, [SMALL_DEFECT], 1.0, KX, small.gap, [17, 9])
    with pytest.raises(SupercellError):
        truncation_study(small.eps0, [SMALL_DEFECT], 1.0, KX, small.gap, [9, 10])
