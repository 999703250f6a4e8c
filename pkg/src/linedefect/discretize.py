"""Bilinear finite elements with quasi-periodic node identification.

Nodes live on a uniform ``N x (N * N_y)`` grid; the node at ``x = 1`` is
identified with ``x = 0`` times ``exp(i k_x)``, and on a unit cell the node at
``y = 1`` with ``y = 0`` times ``exp(i k)``. A strip with ``N_y`` cells is a
twisted torus in y: the top row is identified with the bottom row times
``exp(i * twist)``. The default twist ``-pi * N_y`` makes the fiber momenta
exactly ``-pi + 2 pi p / N_y`` (antiperiodic wrap for odd ``N_y``).

Functionals are stored as action vectors ``F_i = f[basis_i]`` and a nodal
function ``u`` acts on them as ``u^H F``. The H^-1 inner product is
``<F, G> = G^H A^-1 F`` so that ``<A u, A v> = v^H A u = B[u, v]``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .medium import DielectricMap

PIVOT_TOL = 1e-12

# 1D linear element on [0, h], scaled by h below
_K1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
_M1 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
# local node index b * 2 + a for offsets (a, b) in (x, y)
STIFF_EL = np.kron(_M1, _K1) + np.kron(_K1, _M1)
MASS_EL = np.kron(_M1, _M1)


class ShiftSingularError(np.linalg.LinAlgError):
    """A shifted solve was requested too close to the discrete spectrum."""

    def __init__(self, message: str, shift: float, pivot_ratio: float):
        super().__init__(message)
        self.shift = shift
        self.pivot_ratio = pivot_ratio


@dataclass(frozen=True)
class QuasiMesh:
    N: int
    N_y: int
    k_x: float
    k: float | None = None
    twist: float = 0.0

    @property
    def n_nodes(self) -> int:
        return self.N * self.N * self.N_y

    @property
    def ny_nodes(self) -> int:
        return self.N * self.N_y

    @property
    def y_phase(self) -> complex:
        if self.k is not None:
            return np.exp(1j * self.k)
        return np.exp(1j * self.twist)

    @property
    def fiber_momenta(self) -> np.ndarray:
        """Momenta whose quasi-periodic extensions live on this strip."""
        return fiber_momenta(self.N_y, self.twist)

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat ``(x, y)`` of every node; y measured from the strip bottom."""
        h = 1.0 / self.N
        iy, ix = np.divmod(np.arange(self.n_nodes), self.N)
        return ix * h, iy * h

    def element_dofs(self) -> tuple[np.ndarray, np.ndarray]:
        """Global node index and phase for the 4 local nodes of every element.

        Returns arrays of shape ``(n_elements, 4)``.
        """
        N, ny = self.N, self.ny_nodes
        ey, ex = np.divmod(np.arange(N * ny), N)
        idx = np.empty((ey.size, 4), dtype=np.int64)
        phase = np.ones((ey.size, 4), dtype=complex)
        px = np.exp(1j * self.k_x)
        py = self.y_phase
        for b in (0, 1):
            for a in (0, 1):
                loc = b * 2 + a
                gx = ex + a
                gy = ey + b
                wx = gx == N
                wy = gy == ny
                gx = np.where(wx, 0, gx)
                gy = np.where(wy, 0, gy)
                idx[:, loc] = gy * N + gx
                phase[:, loc] = np.where(wx, px, 1.0) * np.where(wy, py, 1.0)
        return idx, phase


def default_twist(N_y: int) -> float:
    return float(np.angle(np.exp(-1j * np.pi * N_y)))


def fiber_momenta(N_y: int, twist: float | None = None) -> np.ndarray:
    """Sorted momenta ``(twist + 2 pi p) / N_y`` folded into ``[-pi, pi)``."""
    if twist is None:
        twist = default_twist(N_y)
    k = (twist + 2 * np.pi * np.arange(N_y)) / N_y
    k = np.mod(k + np.pi, 2 * np.pi) - np.pi
    k[np.isclose(k, np.pi)] = -np.pi
    return np.sort(k)


def build_mesh(
    N: int, N_y: int, k_x: float, k: float | None = None, twist: float | None = None
) -> QuasiMesh:
    if N < 4:
        raise ValueError(f"N must be >= 4, got {N}")
    if N_y < 1:
        raise ValueError(f"N_y must be >= 1, got {N_y}")
    for name, val in (("k_x", k_x), ("k", k)):
        if val is not None and abs(val) > np.pi + 1e-12:
            raise ValueError(f"{name}={val} outside the Brillouin zone [-pi, pi]")
    if k is not None and N_y != 1:
        raise ValueError("a y-quasimomentum only applies to unit-cell meshes (N_y = 1)")
    if twist is None:
        twist = default_twist(N_y)
    return QuasiMesh(int(N), int(N_y), float(k_x), None if k is None else float(k), float(twist))


def assemble_matrix(mesh: QuasiMesh, coeff: np.ndarray, elmat: np.ndarray) -> sp.csc_matrix:
    """Sum ``coeff_e * P_e^H elmat P_e`` over elements (``coeff`` in flat element order)."""
    idx, phase = mesh.element_dofs()
    coeff = np.asarray(coeff, dtype=float).ravel()
    vals = (
        coeff[:, None, None]
        * np.conj(phase)[:, :, None]
        * elmat[None, :, :]
        * phase[:, None, :]
    )
    rows = np.broadcast_to(idx[:, :, None], vals.shape)
    cols = np.broadcast_to(idx[:, None, :], vals.shape)
    n = mesh.n_nodes
    mat = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))
    return mat.tocsc()


@dataclass
class AssembledForms:
    mesh: QuasiMesh
    S: sp.csc_matrix
    M: sp.csc_matrix
    A: sp.csc_matrix
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _A_lu: object = field(default=None, repr=False)
    _shift_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def A_lu(self):
        with self._lock:
            if self._A_lu is None:
                self._A_lu = spla.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A")
            return self._A_lu

    def shifted_lu(self, alpha: float, beta: float):
        """Factorization of ``alpha * M - beta * A`` with a pivot check."""
        key = (float(alpha), float(beta))
        with self._lock:
            entry = self._shift_cache.get(key)
            if entry is None:
                lu = spla.splu((alpha * self.M - beta * self.A).tocsc(), permc_spec="MMD_AT_PLUS_A")
                d = np.abs(lu.U.diagonal())
                entry = (lu, float(d.min() / d.max()))
                if len(self._shift_cache) >= 4:
                    self._shift_cache.pop(next(iter(self._shift_cache)))
                self._shift_cache[key] = entry
        lu, ratio = entry
        if ratio < PIVOT_TOL:
            raise ShiftSingularError(
                f"shifted operator is numerically singular (relative pivot {ratio:.3e}"
                f" < {PIVOT_TOL:g}); the shift lies on the discrete spectrum",
                shift=beta / alpha if alpha else np.inf,
                pivot_ratio=ratio,
            )
        return lu


def assemble_forms(mesh: QuasiMesh, eps: DielectricMap) -> AssembledForms:
    if eps.cell_resolution != mesh.N or eps.strip_extent != mesh.N_y:
        raise ValueError("permittivity map does not match the mesh")
    h = 1.0 / mesh.N
    n_el = eps.n_elements
    S = assemble_matrix(mesh, 1.0 / eps.flat, STIFF_EL)
    M = assemble_matrix(mesh, np.full(n_el, h * h), MASS_EL)
    return AssembledForms(mesh, S, M, (S + M).tocsc())


def assemble_defect_stiffness(mesh: QuasiMesh, eps0: DielectricMap, eps1: DielectricMap) -> sp.csc_matrix:
    """Matrix of ``int (1/eps0 - 1/eps1) grad u . conj(grad v)``, assembled on the defect only."""
    coeff = 1.0 / eps0.flat - 1.0 / eps1.flat
    return assemble_matrix(mesh, coeff, STIFF_EL)


def _solve(lu, F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=complex)
    return lu.solve(F)


def solve_phi_inverse(forms: AssembledForms, F: np.ndarray) -> np.ndarray:
    """Coefficients of ``phi^-1 F``: solves ``A u = F``."""
    return _solve(forms.A_lu(), F)


def solve_shifted(forms: AssembledForms, mu: float, F: np.ndarray) -> np.ndarray:
    """Solve ``(M - mu A) u = F``, the solution operator of ``(I - mu G0^-1)``."""
    if mu == 0:
        return _solve(forms.shifted_lu(1.0, 0.0), F)
    return _solve(forms.shifted_lu(1.0, mu), F)


def apply_resolvent(forms: AssembledForms, lam: float, F: np.ndarray) -> np.ndarray:
    """Solve ``(A - (lam + 1) M) u = F``, i.e. apply ``(L0 - lam)^-1``."""
    if lam == -1.0:
        return solve_phi_inverse(forms, F)
    # A - (lam+1) M = -(lam+1) * (M - A/(lam+1))
    c = lam + 1.0
    lu = forms.shifted_lu(-c, -1.0)
    return _solve(lu, F)


def hminus_inner(forms: AssembledForms, F: np.ndarray, G: np.ndarray) -> complex:
    """``<F, G>_{H^-1} = G^H A^-1 F``."""
    return complex(np.vdot(G, solve_phi_inverse(forms, F)))


def hminus_norm2(forms: AssembledForms, F: np.ndarray) -> float:
    return float(np.real(hminus_inner(forms, F, F)))


def h1_norm2(forms: AssembledForms, u: np.ndarray) -> float:
    return float(np.real(np.vdot(u, forms.A @ u)))
