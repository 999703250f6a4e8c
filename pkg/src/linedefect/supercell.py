"""Direct diagonalization of the defect strip: the independent count oracle."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .bloch import compute_bands
from .discretize import MASS_EL, AssembledForms, QuasiMesh, assemble_forms, build_mesh, fiber_momenta
from .medium import DielectricMap, Rect, apply_line_defect

log = logging.getLogger(__name__)

DENSE_LIMIT = 3000


class SupercellError(RuntimeError):
    pass


@dataclass
class DefectSpectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (n, m), M-orthonormal
    gap: tuple[float, float]
    N: int
    N_y: int
    defect_cell: int
    mesh: QuasiMesh | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return self.eigenvalues.size


def _pencil_window(forms: AssembledForms, lo: float, hi: float, k0: int = 8, max_k: int = 200):
    """All eigenpairs of ``(S, M)`` in ``(lo, hi)``, by shift-invert at the midpoint.

    The request grows until the farthest returned eigenvalue lies outside the
    window on both sides, which certifies the window is exhausted.
    """
    n = forms.n
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    if n <= DENSE_LIMIT:
        w, V = sla.eigh(forms.S.toarray(), forms.M.toarray())
        sel = (w > lo) & (w < hi)
        return w[sel], V[:, sel]
    k = min(k0, n - 2)
    v0 = np.ones(n, dtype=complex)  # fixed start vector for reproducibility
    while True:
        try:
            w, V = spla.eigsh(forms.S, k=k, M=forms.M, sigma=mid, which="LM", v0=v0)
        except spla.ArpackNoConvergence as exc:
            raise SupercellError(f"shift-invert eigensolve did not converge (k={k}): {exc}") from exc
        if np.max(np.abs(w - mid)) > half or k >= min(max_k, n - 2):
            break
        k = min(2 * k, n - 2)
    order = np.argsort(w)
    w, V = w[order], V[:, order]
    if np.max(np.abs(w - mid)) <= half:
        raise SupercellError(f"more than {k} eigenvalues in the window; raise max_k")
    sel = (w > lo) & (w < hi)
    return w[sel], V[:, sel]


def defect_spectrum_direct(
    eps1: DielectricMap, k_x: float, gap: tuple[float, float], forms: AssembledForms | None = None
) -> DefectSpectrum:
    """Eigenvalues of the strip pencil ``(A1, M)`` strictly inside the gap."""
    N, N_y = eps1.cell_resolution, eps1.strip_extent
    if N_y < 9 or N_y % 2 == 0:
        raise SupercellError(f"strip extent must be odd and >= 9, got {N_y}")
    lam0, lam1 = gap
    margin = 1e-8 * (lam1 - lam0)
    if forms is None:
        forms = assemble_forms(build_mesh(N, N_y, k_x), eps1)
    w, V = _pencil_window(forms, lam0 + margin, lam1 - margin)
    # M-orthonormalize within the (possibly degenerate) set
    if V.shape[1]:
        G = V.conj().T @ (forms.M @ V)
        V = V @ np.linalg.inv(np.linalg.cholesky(0.5 * (G + G.conj().T))).conj().T
    return DefectSpectrum(w, V, (lam0, lam1), N, N_y, (N_y - 1) // 2, forms.mesh)


def cell_mass_fractions(v: np.ndarray, mesh: QuasiMesh) -> np.ndarray:
    """Fraction of ``v^H M v`` carried by each strip cell (exact element split)."""
    N, N_y = mesh.N, mesh.N_y
    idx, phase = mesh.element_dofs()
    ve = v[idx] * phase
    e_mass = np.real(np.einsum("ei,ij,ej->e", ve.conj(), MASS_EL, ve)) / N**2
    per_cell = e_mass.reshape(N_y, N * N).sum(axis=1)
    return per_cell / per_cell.sum()


@dataclass(frozen=True)
class CellProfile:
    fractions: np.ndarray  # per strip cell, bottom to top
    defect_cell: int

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(self.fractions.size) - self.defect_cell

    def by_distance(self) -> np.ndarray:
        """Fractions ordered defect cell first, then increasing distance (below before above)."""
        off = self.offsets
        order = np.lexsort((off > 0, np.abs(off)))
        return self.fractions[order]

    def within(self, d: int) -> float:
        return float(self.fractions[np.abs(self.offsets) <= d].sum())

    def is_decaying(self, rtol: float = 0.1) -> bool:
        """Monotone decay away from the defect on both sides, within ``rtol``."""
        f, c = self.fractions, self.defect_cell
        up, down = f[c:], f[: c + 1][::-1]
        return all(np.all(s[1:] <= s[:-1] * (1 + rtol)) for s in (up, down))


def decay_profile(spectrum: DefectSpectrum, index: int) -> CellProfile:
    """Per-cell L2 mass of one in-gap eigenvector."""
    v = spectrum.eigenvectors[:, index]
    return CellProfile(cell_mass_fractions(v, spectrum.mesh), spectrum.defect_cell)


def mass_profile(v: np.ndarray, mesh: QuasiMesh) -> CellProfile:
    """Per-cell L2 mass of any strip vector (defect cell = central cell)."""
    return CellProfile(cell_mass_fractions(v, mesh), (mesh.N_y - 1) // 2)


@dataclass
class TruncationRow:
    N_y: int
    gap: tuple[float, float]
    eigenvalues: np.ndarray


@dataclass
class TruncationStudy:
    rows: list
    converged: bool
    unconverged_truncation: bool
    max_change: float

    def as_dict(self) -> dict:
        return {
            "rows": [{"N_y": r.N_y, "gap": list(r.gap), "eigenvalues": r.eigenvalues.tolist()} for r in self.rows],
            "converged": self.converged,
            "unconverged_truncation": self.unconverged_truncation,
            "max_change": self.max_change,
        }


def torus_gap(eps0: DielectricMap, k_x: float, N_y: int, s0: int) -> tuple[float, float]:
    """Gap of the unperturbed ``N_y``-cell torus below magnitude band ``s0`` (0-based).

    The torus only samples the fiber momenta of its own length, so its gap
    edges move slightly with ``N_y``.
    """
    bands = compute_bands(eps0, k_x, fiber_momenta(N_y), s0 + 1, keep_vectors=False).magnitude()
    return float(bands[:, s0 - 1].max()), float(bands[:, s0].min())


def truncation_study(
    eps0: DielectricMap,
    defect: Sequence[Rect],
    t: float,
    k_x: float,
    gap: tuple[float, float],
    N_y_list: Sequence[int],
    s0: int | None = None,
) -> TruncationStudy:
    """In-gap eigenvalues on increasingly long strip tori.

    Each torus is compared against its own unperturbed gap (band ``s0`` and
    the one below, sampled on that torus's fiber momenta).
    """
    N_y_list = list(N_y_list)
    if any(b <= a for a, b in zip(N_y_list, N_y_list[1:])):
        raise SupercellError("N_y list must be increasing")
    if any(ny % 2 == 0 for ny in N_y_list):
        raise SupercellError("every strip extent must be odd")
    if s0 is None:
        mid = 0.5 * (gap[0] + gap[1])
        mag = compute_bands(eps0, k_x, fiber_momenta(N_y_list[0]), 12, keep_vectors=False).magnitude()
        s0 = int(np.sum(mag.max(axis=0) < mid))
    rows = []
    for ny in N_y_list:
        g = torus_gap(eps0, k_x, ny, s0)
        eps1 = apply_line_defect(eps0, defect, t, ny)
        rows.append(TruncationRow(ny, g, defect_spectrum_direct(eps1, k_x, g).eigenvalues))
    width = gap[1] - gap[0]
    last = rows[-1].eigenvalues
    prev = rows[-2].eigenvalues if len(rows) > 1 else last
    if last.size != prev.size:
        log.warning("unconverged truncation: in-gap count changes from %d to %d", prev.size, last.size)
        return TruncationStudy(rows, False, True, float("inf"))
    change = float(np.max(np.abs(last - prev))) if last.size else 0.0
    return TruncationStudy(rows, change < 1e-6 * width, False, change)
