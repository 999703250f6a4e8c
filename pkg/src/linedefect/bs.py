"""Birman-Schwinger counting of defect eigenvalues in a spectral gap.

Conventions (shared with :mod:`discretize`): functionals are action vectors,
``<F, G>_{H^-1} = G^H A0^-1 F``, a nodal function ``u`` embeds as ``M u``.

``K F = A0 A1^-1 F - F = D A1^-1 F`` with ``D = S0 - S1`` assembled on the
defect elements, so the range of ``K`` is ``range(D)``: a handful of
dimensions however long the strip is. The state stores an H^-1-orthonormal
basis ``Q`` of that range in which ``K`` is diagonal, ``K q_i = kappa_i q_i``.
In these coordinates the K-inner product is ``diag(kappa)`` and ``A_mu`` is a
small dense matrix.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import brentq

from .bloch import BandStructure, SigmaPoint, default_workers
from .discretize import (
    AssembledForms,
    ShiftSingularError,
    assemble_forms,
    build_mesh,
    hminus_norm2,
    solve_phi_inverse,
    solve_shifted,
)
from .floquet import extend_fiber, forward_data
from .medium import DielectricMap

log = logging.getLogger(__name__)

RANK_TOL = 1e-12


class KPositivityError(ValueError):
    pass


class KappaMonotonicityError(RuntimeError):
    pass


class SubspaceRankError(RuntimeError):
    pass


class RepresentationMismatch(RuntimeError):
    pass


def _herm(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.conj().T)


def gap_image(gap: tuple[float, float]) -> tuple[float, float]:
    """``((Lambda1 + 1)^-1, (Lambda0 + 1)^-1)``."""
    lam0, lam1 = gap
    return 1.0 / (lam1 + 1.0), 1.0 / (lam0 + 1.0)


@dataclass
class KOperatorState:
    forms0: AssembledForms
    forms1: AssembledForms
    D: sp.csc_matrix
    dofs: np.ndarray  # nodes touched by the defect
    Q: np.ndarray  # (n, r) H^-1-orthonormal functionals spanning the K-range
    kappa: np.ndarray  # (r,) eigenvalues of K on that range, descending
    A0inv_Q: np.ndarray
    A1inv_Q: np.ndarray
    g1_norm: float  # ||G1||_{H^-1 -> H^1}
    rank_tol: float = RANK_TOL
    discarded: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def r(self) -> int:
        return self.kappa.size

    @property
    def n(self) -> int:
        return self.forms0.n

    @property
    def norm(self) -> float:
        """``||K||`` in the H^-1 metric."""
        return float(self.kappa.max()) if self.r else 0.0

    def apply(self, F: np.ndarray) -> np.ndarray:
        """``K F = D A1^-1 F`` for any functional."""
        return self.D @ solve_phi_inverse(self.forms1, F)

    def coords(self, F: np.ndarray) -> np.ndarray:
        """H^-1 projection coordinates ``Q^H A0^-1 F``."""
        return self.A0inv_Q.conj().T @ F

    def vector(self, c: np.ndarray) -> np.ndarray:
        return self.Q @ c

    def K_vector(self, c: np.ndarray) -> np.ndarray:
        """Functional ``K u`` for ``u = Q c``."""
        return self.Q @ (self.kappa * c if c.ndim == 1 else self.kappa[:, None] * c)


def defect_matrix(forms0: AssembledForms, forms1: AssembledForms) -> sp.csc_matrix:
    """``S0 - S1`` with assembly roundoff outside the defect removed."""
    D = (forms0.S - forms1.S).tocsc()
    if D.nnz:
        scale = abs(forms0.S).max()
        D.data[np.abs(D.data) <= 1e-14 * scale] = 0
        D.eliminate_zeros()
    return D


def build_K(forms0: AssembledForms, forms1: AssembledForms, rank_tol: float = RANK_TOL) -> KOperatorState:
    """Diagonalize ``K`` on its range in the H^-1 metric."""
    if forms0.mesh != forms1.mesh:
        raise ValueError("forms live on different meshes")
    n = forms0.n
    D = defect_matrix(forms0, forms1)
    dofs = np.unique(D.nonzero()[0])
    empty = np.zeros((n, 0), dtype=complex)
    if dofs.size == 0:
        return KOperatorState(forms0, forms1, D, dofs, empty, np.zeros(0), empty, empty, 1.0, rank_tol)
    DJJ = _herm(D[dofs][:, dofs].toarray())
    dv, U = np.linalg.eigh(DJJ)
    top = dv.max()
    if dv.min() < -rank_tol * max(top, abs(dv.min())) or top <= 0:
        raise KPositivityError(
            f"positivity violated: S0 - S1 has eigenvalue {dv.min():.3e} (eps1 >= eps0 fails on the defect)"
        )
    keep = dv > rank_tol * top
    B, dB = U[:, keep], dv[keep]
    W = np.zeros((n, B.shape[1]), dtype=complex)
    W[dofs] = B
    A0W = solve_phi_inverse(forms0, W)
    A1W = solve_phi_inverse(forms1, W)
    GH = _herm(W.conj().T @ A0W)
    # W^H (A1^-1 - A0^-1) W = W^H A1^-1 D A0^-1 W, without the cancellation
    GK = _herm(A1W[dofs].conj().T @ DJJ @ A0W[dofs])
    kap, X = sla.eigh(GK, GH)
    kap, X = kap[::-1], X[:, ::-1]
    if kap[-1] < -rank_tol * kap[0]:
        raise KPositivityError(f"positivity violated: K has eigenvalue {kap[-1]:.3e} on its range")
    keep = kap > rank_tol * kap[0]
    sq = np.sqrt(dB)
    g1 = 1.0 + float(np.linalg.eigvalsh(_herm(sq[:, None] * (B.conj().T @ A1W[dofs]) * sq[None, :])).max())
    return KOperatorState(
        forms0, forms1, D, dofs,
        Q=W @ X[:, keep], kappa=kap[keep],
        A0inv_Q=A0W @ X[:, keep], A1inv_Q=A1W @ X[:, keep],
        g1_norm=g1, rank_tol=rank_tol, discarded=kap[~keep],
    )


def k_inner(state: KOperatorState, F: np.ndarray, G: np.ndarray) -> complex:
    """``<F, G>_K = <K F, G>_{H^-1}``.

    Length-``r`` inputs are read as coordinates in the ``Q`` basis; full-length
    functionals are evaluated directly as ``(A0^-1 G)^H D (A1^-1 F)``.
    """
    F, G = np.asarray(F), np.asarray(G)
    if F.shape[0] == state.r and G.shape[0] == state.r and state.r != state.n:
        return complex(np.vdot(G, state.kappa * F))
    return complex(np.vdot(solve_phi_inverse(state.forms0, G), state.apply(F)))


@dataclass(frozen=True)
class AmuMatrix:
    """``A_mu`` in ``Q`` coordinates; ``kappa`` is the K-Gram diagonal."""

    mu: float
    matrix: np.ndarray
    kappa: np.ndarray

    @property
    def T(self) -> np.ndarray:
        """``Q^H A0^-1 M (M - mu A0)^-1 Q``, Hermitian."""
        return self.matrix / self.kappa[None, :]

    def hermitian(self) -> np.ndarray:
        """Same operator in K-orthonormal coordinates."""
        s = np.sqrt(self.kappa)
        return _herm(s[:, None] * self.matrix / s[None, :])

    def symmetry_defect(self) -> float:
        """Relative non-self-adjointness in the K metric."""
        G = self.kappa[:, None] * self.matrix
        nrm = np.linalg.norm(G)
        return float(np.linalg.norm(G - G.conj().T) / nrm) if nrm else 0.0

    def rayleigh(self, c: np.ndarray) -> float:
        """``<A_mu u, u>_K`` for ``u = Q c``."""
        return float(np.real(np.vdot(c, self.kappa * (self.matrix @ c))))


def assemble_Amu(state: KOperatorState, mu: float) -> AmuMatrix:
    """Apply ``P (I - mu G0^-1)^-1 K`` to every basis functional.

    ``w = K q``; ``u = (M - mu A0)^-1 w``; re-embed ``M u``; project with
    ``Q^H A0^-1``.
    """
    if state.r == 0:
        return AmuMatrix(mu, np.zeros((0, 0)), state.kappa)
    w = state.K_vector(np.eye(state.r))
    u = solve_shifted(state.forms0, mu, w)
    mat = state.A0inv_Q.conj().T @ (state.forms0.M @ u)
    return AmuMatrix(float(mu), mat, state.kappa)


def kappa_spectrum(amu: AmuMatrix | np.ndarray, m_max: int | None = None) -> np.ndarray:
    """Lowest ``m_max`` min-max values (ascending)."""
    H = amu.hermitian() if isinstance(amu, AmuMatrix) else _herm(np.asarray(amu))
    w = np.linalg.eigvalsh(H)
    return w if m_max is None else w[:m_max]


@dataclass(frozen=True)
class Crossing:
    m: int  # 1-based index of kappa_m
    mu: float
    lam: float


@dataclass
class KappaTrace:
    mu: np.ndarray
    kappa: np.ndarray  # (n_mu, m_max)
    crossings: list
    degeneracies: list
    warnings: list
    amats: list = field(default_factory=list, repr=False)

    @property
    def count(self) -> int:
        return len(self.crossings)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.sort([c.lam for c in self.crossings])

    def kappa_after(self, n: int) -> np.ndarray:
        """``kappa_{n+1}`` along the trace (``+inf`` if the K-range is smaller)."""
        if self.kappa.shape[1] <= n:
            return np.full(self.mu.size, np.inf)
        return self.kappa[:, n]


def default_mu_grid(gap: tuple[float, float], n_base: int = 64, depth: float = 6.0) -> np.ndarray:
    """Uniform interior points plus geometric clustering toward both ends.

    The closest point sits ``10**-depth`` of the gap-image width from an end;
    nearer still, ``M - mu A0`` is so ill-conditioned that ``A_mu`` loses its
    symmetry to roundoff (about ``1e-6`` relative at ``depth = 10``).
    """
    lo, hi = gap_image(gap)
    w = hi - lo
    base = lo + w * np.arange(1, n_base + 1) / (n_base + 1)
    offs = w * np.logspace(-depth, np.log10(0.5 / (n_base + 1)), 2 * int(depth) + 1)
    return np.unique(np.concatenate([base, lo + offs, hi - offs]))


def sweep_and_count(
    state: KOperatorState,
    gap: tuple[float, float],
    mu_grid: np.ndarray | None = None,
    m_max: int | None = None,
    bisect_rtol: float = 1e-10,
    mono_tol: float = 1e-8,
    workers: int | None = None,
    keep_matrices: bool = True,
) -> KappaTrace:
    """Sample ``kappa_m(mu)`` across the gap image and locate ``kappa_m = -1``."""
    lo, hi = gap_image(gap)
    if mu_grid is None:
        mu_grid = default_mu_grid(gap)
    mu_grid = np.sort(np.asarray(mu_grid, dtype=float))
    if mu_grid[0] <= lo or mu_grid[-1] >= hi:
        raise ValueError("mu grid must lie strictly inside the gap image")
    m_max = state.r if m_max is None else min(m_max, state.r)
    warnings = []
    if state.r == 0:
        return KappaTrace(mu_grid, np.zeros((mu_grid.size, 0)), [], [], warnings)

    def sample(mu):
        try:
            return assemble_Amu(state, mu)
        except ShiftSingularError as exc:
            return exc

    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            res = list(pool.map(sample, mu_grid))
    else:
        res = [sample(mu) for mu in mu_grid]
    ok = [not isinstance(r, Exception) for r in res]
    for mu, r in zip(mu_grid, res):
        if isinstance(r, Exception):
            warnings.append(f"mu={mu!r} skipped: {r}")
    mus = mu_grid[ok]
    amats = [r for r in res if not isinstance(r, Exception)]
    kap = np.array([kappa_spectrum(a, m_max) for a in amats])

    for m in range(m_max):
        d = np.diff(kap[:, m])
        bad = np.flatnonzero(d < -mono_tol * (1 + np.abs(kap[1:, m])))
        if bad.size:
            i = bad[0]
            raise KappaMonotonicityError(
                f"kappa monotonicity violated: kappa_{m + 1} drops by {-d[i]:.3e} between "
                f"mu={mus[i]!r} and mu={mus[i + 1]!r}"
            )

    def kappa_m(mu, m):
        return kappa_spectrum(assemble_Amu(state, mu), m + 1)[m] + 1.0

    crossings = []
    below = kap < -1.0
    for m in range(m_max):
        if below[-1, m]:
            warnings.append(f"kappa_{m + 1} < -1 at the upper end of the mu grid")
        if not below[0, m] or below[-1, m]:
            continue
        i = int(np.flatnonzero(below[:-1, m] & ~below[1:, m])[0])
        mu_star = brentq(kappa_m, mus[i], mus[i + 1], args=(m,), xtol=bisect_rtol * 1e-2 * mus[i], rtol=1e-15)
        crossings.append(Crossing(m + 1, float(mu_star), float(1.0 / mu_star - 1.0)))
    degeneracies = [
        (a.m, b.m)
        for ia, a in enumerate(crossings)
        for b in crossings[ia + 1:]
        if abs(a.mu - b.mu) <= bisect_rtol * a.mu
    ]
    for w in warnings:
        log.warning(w)
    return KappaTrace(mus, kap, crossings, degeneracies, warnings, amats if keep_matrices else [])


# ---- subspaces and the auxiliary function f -------------------------------------


def defect_cells(eps1: DielectricMap) -> list[int]:
    """Strip cells (0 = bottom) containing defect elements."""
    N = eps1.cell_resolution
    return sorted({int(e) // N // N for e in eps1.defect_support})


def cutoff_profile(N: int, N_y: int, cells: list[int]) -> np.ndarray:
    """Nodal cutoff: 1 on the given cells, linear decay to 0 over one cell each side."""
    lo, hi = min(cells) * N, (max(cells) + 1) * N  # node rows where theta = 1
    rows = np.arange(N * N_y)
    dist = np.maximum(lo - rows, 0) + np.maximum(rows - hi, 0)
    row_theta = np.clip(1.0 - dist / N, 0.0, 1.0)
    return np.repeat(row_theta, N)


def sigma_extensions(bs: BandStructure, sigma: list[SigmaPoint], N_y: int, m: int = 0) -> list[np.ndarray]:
    """Unit-norm strip extensions ``N_y^{-1/2} E_k psi`` at the grid point ``m`` steps from each edge point."""
    out = []
    for sp_ in sigma:
        q = bs.shift(sp_.p, m)
        out.append(extend_fiber(bs.psi(q, sp_.label), bs.kgrid[q], N_y))
    return out


@dataclass
class DefectSubspaces:
    theta: np.ndarray
    coords: np.ndarray  # (r, n): Q-coordinates of P phi(theta psi_j)
    Gt: np.ndarray  # K-Gram of those vectors
    Lperp: np.ndarray  # (r, n) K-orthonormal basis
    L: np.ndarray  # (r, r - n) K-orthonormal basis
    rank: int

    @property
    def G(self) -> np.ndarray:
        return self.Gt @ self.Gt

    @property
    def gram_ratio(self) -> float:
        w = np.linalg.eigvalsh(self.Gt)
        return float(w.min() / w.max())


def build_L_subspaces(
    state: KOperatorState, psi_ext: list[np.ndarray], theta: np.ndarray, rank_tol: float = 1e-10
) -> DefectSubspaces:
    """``L_perp = span{P phi(theta psi_j)}`` and its K-orthocomplement ``L``."""
    n = len(psi_ext)
    # coordinates of P phi(v) are Q^H A0^-1 A0 v = Q^H v
    T = np.stack([state.Q.conj().T @ (theta * psi) for psi in psi_ext], axis=1)
    Gt = _herm((T.conj().T @ (state.kappa[:, None] * T)).T)
    w = np.linalg.eigvalsh(Gt) if n else np.zeros(0)
    rank = int(np.sum(w > rank_tol * max(w.max(initial=0.0), 1e-300)))
    if rank < n:
        raise SubspaceRankError(
            f"Gram rank {rank} < n = {n}: linear dependence, discrete unique-continuation failure"
        )
    s = np.sqrt(state.kappa)
    U, _ = np.linalg.qr(s[:, None] * T)
    Nperp = sla.null_space(U.conj().T) if n else np.eye(state.r)
    return DefectSubspaces(theta, T, Gt, U / s[:, None], Nperp / s[:, None], rank)


def l_constraint_residual(state: KOperatorState, psi_ext: list[np.ndarray], c: np.ndarray) -> np.ndarray:
    """``|[(L0 - L1) psi_j][G1 u]|`` for ``u = Q c`` as a direct defect integral."""
    g1u = state.A1inv_Q @ c
    return np.array([abs(np.vdot(g1u, state.D @ psi)) for psi in psi_ext])


def _groups(sigma: list[SigmaPoint]) -> dict[int, list[int]]:
    """Edge momenta (grid index) -> band labels attaining the edge there."""
    out: dict[int, list[int]] = {}
    for s in sigma:
        out.setdefault(s.p, [])
        if s.label not in out[s.p]:
            out[s.p].append(s.label)
    return out


@dataclass
class FRows:
    """Linear functionals whose squared moduli sum to ``f(k~, .)`` (rows act on Q-coordinates)."""

    definition: np.ndarray
    fiber: np.ndarray  # H1 fiber pairing of phi_k^-1 (V^ K u)_k
    strip: np.ndarray  # K u [ext phi_s]
    defect: np.ndarray  # [(L0 - L1) ext phi_s][G1 u]


class FEvaluator:
    """Evaluates ``f(k~, u)`` on the strip torus in four equivalent ways.

    ``k~`` is ``m * dk``; the fiber of ``k_j + k~`` is the grid point ``m``
    steps from the edge momentum.
    """

    def __init__(self, state: KOperatorState, bs: BandStructure, sigma: list[SigmaPoint], eps0: DielectricMap):
        self.state, self.bs, self.sigma, self.eps0 = state, bs, sigma, eps0
        self.N_y = state.forms0.mesh.N_y
        if bs.n_k != self.N_y:
            raise ValueError("band table must be sampled on the strip fiber momenta (N_k = N_y)")
        self._KQ_hat = forward_data(bs.kgrid, state.K_vector(np.eye(state.r)))
        self._fibers: dict[int, AssembledForms] = {}
        self._rows: dict[int, FRows] = {}

    def _fiber(self, q: int) -> AssembledForms:
        if q not in self._fibers:
            mesh = build_mesh(self.eps0.cell_resolution, 1, self.bs.k_x, self.bs.kgrid[q])
            self._fibers[q] = assemble_forms(mesh, self.eps0)
        return self._fibers[q]

    def rows(self, m: int) -> FRows:
        if m in self._rows:
            return self._rows[m]
        st, bs = self.state, self.bs
        out = {k: [] for k in ("definition", "fiber", "strip", "defect")}
        for p, labels in _groups(self.sigma).items():
            q = bs.shift(p, m)
            if q is None:
                raise ValueError(f"k~ = {m} steps leaves the zone")
            fib = self._fiber(q)
            g = self._KQ_hat[q]  # (n_cell, r): fiber blocks of K q_i
            Ag = solve_phi_inverse(fib, g)
            for s in labels:
                phi = bs.phi(q, s)
                d = bs.bands[q, s] + 1.0
                ext = extend_fiber(phi, bs.kgrid[q], self.N_y)
                # <g, M phi>_{H^-1} = (M phi)^H A^-1 g; the other forms carry 1/(lambda+1)
                out["definition"].append((fib.M @ phi).conj() @ Ag)
                out["fiber"].append((fib.A @ phi).conj() @ Ag / d)
                out["strip"].append(ext.conj() @ st.K_vector(np.eye(st.r)) / d)
                out["defect"].append((st.D @ ext).conj() @ st.A1inv_Q / d)
        rows = FRows(**{k: np.array(v).reshape(len(v), st.r) for k, v in out.items()})
        self._rows[m] = rows
        return rows

    def values(self, m: int, c: np.ndarray) -> dict:
        r = self.rows(m)
        return {k: float(np.sum(np.abs(getattr(r, k) @ c) ** 2)) for k in ("definition", "fiber", "strip", "defect")}

    def __call__(self, m: int, c: np.ndarray, rtol: float = 1e-8) -> float:
        vals = self.values(m, c)
        ref = vals["fiber"]
        scale = max(abs(ref), 1e-300)
        worst = max(abs(v - ref) for v in vals.values())
        # absolute floor: f(0, u) = 0 on L is evaluated as a cancellation
        floor = 1e-13 * self.quadratic_scale(m) * float(np.real(np.vdot(c, self.state.kappa * c)))
        if worst > rtol * scale and worst > floor:
            raise RepresentationMismatch(f"f representations disagree: {vals}")
        return ref

    def quadratic_scale(self, m: int) -> float:
        """Largest value of ``f(k~, u) / ||u||_K^2``."""
        R = self.rows(m).fiber / np.sqrt(self.state.kappa)[None, :]
        return float(np.linalg.norm(R, 2) ** 2) if R.size else 0.0

    def matrix(self, m: int) -> np.ndarray:
        """Hermitian ``H`` with ``f(k~, Q c) = c^H H c``."""
        R = self.rows(m).fiber
        return R.conj().T @ R


def eval_f(evaluator: FEvaluator, m: int, c: np.ndarray) -> float:
    """``f(m dk, Q c)`` with the representation cross-check."""
    return evaluator(m, c)


def restricted_rayleigh(amu: AmuMatrix, basis: np.ndarray) -> tuple[float, float]:
    """Min and max of ``<A_mu u, u>_K / ||u||_K^2`` over ``span(basis)``."""
    if basis.shape[1] == 0:
        return np.inf, -np.inf
    kb = amu.kappa[:, None] * basis
    num = _herm(kb.conj().T @ (amu.matrix @ basis))
    den = _herm(basis.conj().T @ kb)
    w = sla.eigh(num, den, eigvals_only=True)
    return float(w[0]), float(w[-1])


# ---- norm and bound diagnostics ---------------------------------------------------


def g0_norm(forms: AssembledForms, n_probe: int = 8, seed: int = 0) -> float:
    """``||phi^-1||`` from the H^-1 to the H^1 metric, maximized over random probes."""
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((forms.n, n_probe)) + 1j * rng.standard_normal((forms.n, n_probe))
    u = solve_phi_inverse(forms, F)
    num = np.real(np.sum(u.conj() * (forms.A @ u), axis=0))
    den = np.real(np.sum(F.conj() * u, axis=0))
    return float(np.sqrt(np.max(num / den)))


@dataclass(frozen=True)
class Check:
    name: str
    lhs: float
    rhs: float
    holds: bool
    convention: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "holds": self.holds,
                "convention": self.convention}


def norm_estimate_checks(state: KOperatorState, pert: float, n_random: int = 10, seed: int = 0,
                     slack: float = 1e-8) -> list[Check]:
    """Operator-norm estimates for ``K`` and ``G1`` (``||G0|| = 1`` is used)."""
    checks = [Check("K_norm<=G1_norm*perturbation", state.norm, state.g1_norm * pert,
                    state.norm <= state.g1_norm * pert * (1 + slack) + slack)]
    if state.r:
        rng = np.random.default_rng(seed)
        worst = -np.inf
        for _ in range(n_random):
            c = rng.standard_normal(state.r) + 1j * rng.standard_normal(state.r)
            lhs = hminus_norm2(state.forms0, state.K_vector(c))
            rhs = state.norm * float(np.real(k_inner(state, c, c)))
            worst = max(worst, lhs / rhs)
        checks.append(Check("Ku_sq<=K_norm*u_K_sq (max ratio)", worst, 1.0, worst <= 1 + slack))
    if pert < 1:
        bound = 1.0 / (1.0 - pert)
        checks.append(Check("G1_norm<=1/(1-perturbation)", state.g1_norm, bound, state.g1_norm <= bound * (1 + slack)))
    return checks


def amu_lower_bound_checks(state: KOperatorState, gap: tuple[float, float], mus, n_random: int = 20,
                     seed: int = 0, slack: float = 1e-8) -> list[Check]:
    """``<A_mu u, u>_K >= ||K u||^2 / (1 - mu (Lambda1 + 1))`` on random ``u``."""
    rng = np.random.default_rng(seed)
    out = []
    for mu in np.atleast_1d(mus):
        amu = assemble_Amu(state, mu)
        worst = np.inf
        lhs_w = rhs_w = 0.0
        for _ in range(n_random):
            c = rng.standard_normal(state.r) + 1j * rng.standard_normal(state.r)
            lhs = amu.rayleigh(c)
            rhs = hminus_norm2(state.forms0, state.K_vector(c)) / (1.0 - mu * (gap[1] + 1.0))
            margin = (lhs - rhs) / abs(rhs)
            if margin < worst:
                worst, lhs_w, rhs_w = margin, lhs, rhs
        out.append(Check(f"Amu_rayleigh>=bound@mu={float(mu)!r}", lhs_w, rhs_w, worst >= -slack, "unitary Floquet, constant 1"))
    return out


def lperp_coercivity_check(evaluator: FEvaluator, subs: DefectSubspaces, lam1: float, slack: float = 1e-8) -> Check:
    """``min_{L_perp} f(0, u) / ||u||_K^2`` against ``lmin(G) / lmax(G~) / (Lambda1 + 1)``."""
    H = evaluator.matrix(0)
    B = subs.Lperp  # K-orthonormal
    ratio = float(np.linalg.eigvalsh(_herm(B.conj().T @ H @ B)).min())
    bound = float(np.linalg.eigvalsh(subs.G).min() / np.linalg.eigvalsh(subs.Gt).max() / (lam1 + 1.0))
    return Check("f0_ratio_on_Lperp>=bound", ratio, bound, ratio >= bound * (1 - slack) and ratio > 0,
                 "unitary Floquet, constant 1")


def f_slope(evaluator: FEvaluator, c: np.ndarray, steps=(1, 2)) -> float:
    """Log-log slope of ``f(k~, u)`` between ``|k~| = steps[0] dk`` and ``steps[1] dk`` (both signs averaged)."""
    f = [0.5 * (evaluator(m, c) + evaluator(-m, c)) for m in steps]
    return float(np.log(f[1] / f[0]) / np.log(steps[1] / steps[0]))
