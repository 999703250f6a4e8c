"""Discrete partial Floquet transform between the strip torus and its fibers.

With ``N_y`` cells on the strip, the fiber momenta are exactly the ``N_y``
points ``k_p = -pi + 2 pi p / N_y`` and the transform is the unitary DFT over
the cell index::

    fiber_p = N_y^{-1/2} sum_c exp(-i k_p c) u_c
    u_c     = N_y^{-1/2} sum_p exp(+i k_p c) fiber_p

It is unitary in the Euclidean metric, carries the strip matrices to the
direct sum of the fiber matrices, and acts identically on nodal functions and
on functional action vectors. All spectral expansions below are therefore
exact up to roundoff; no ``1/sqrt(2 pi)`` factors appear.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .bloch import default_workers
from .discretize import (
    AssembledForms,
    assemble_forms,
    build_mesh,
    fiber_momenta,
    solve_phi_inverse,
    solve_shifted,
)
from .medium import DielectricMap, periodic_extension

SPECTRUM_TOL = 1e-10


class FloquetError(ValueError):
    pass


def _phases(momenta: np.ndarray, n_y: int) -> np.ndarray:
    c = np.arange(n_y)
    return np.exp(1j * np.outer(momenta, c)) / np.sqrt(n_y)  # (p, c)


def forward_data(momenta: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cell-index DFT: ``(N_y * n_cell[, m]) -> (N_y, n_cell[, m])``."""
    n_y = momenta.size
    u = np.asarray(u)
    blocks = u.reshape((n_y, -1) + u.shape[1:])
    F = _phases(momenta, n_y).conj()
    return np.tensordot(F, blocks, axes=(1, 0))


def inverse_data(momenta: np.ndarray, fibers: np.ndarray) -> np.ndarray:
    n_y = momenta.size
    fibers = np.asarray(fibers)
    G = _phases(momenta, n_y).T  # (c, p)
    out = np.tensordot(G, fibers, axes=(1, 0))
    return out.reshape((-1,) + fibers.shape[2:])


def extend_fiber(v: np.ndarray, k: float, n_y: int) -> np.ndarray:
    """Strip vector of a single-fiber datum: ``N_y^{-1/2} E_k v``.

    This is what :func:`inverse_data` returns for data supported on the fiber
    at ``k``; its strip L2 norm equals the fiber L2 norm of ``v``.
    """
    c = np.arange(n_y)
    return (np.exp(1j * k * c)[:, None] * np.asarray(v)[None, :]).reshape(-1) / np.sqrt(n_y)


@dataclass
class FloquetContext:
    """Strip forms plus fiber forms and complete fiber eigendecompositions."""

    eps0: DielectricMap
    k_x: float
    N_y: int
    momenta: np.ndarray
    strip: AssembledForms
    fibers: list
    eigvals: list  # lambda_s(k_p), ascending
    eigvecs: list  # psi_s(k_p), M_p-orthonormal columns

    @property
    def n_cell(self) -> int:
        return self.eps0.cell_resolution ** 2

    @property
    def n_strip(self) -> int:
        return self.n_cell * self.N_y

    def band_multiset(self) -> np.ndarray:
        return np.sort(np.concatenate(self.eigvals))


def build_context(
    eps0: DielectricMap, k_x: float, N_y: int, workers: int | None = None
) -> FloquetContext:
    """Assemble the ``N_y``-cell strip torus and diagonalize every fiber fully."""
    if eps0.strip_extent != 1:
        raise FloquetError("expects a unit-cell permittivity map")
    N = eps0.cell_resolution
    momenta = fiber_momenta(N_y)
    strip = assemble_forms(build_mesh(N, N_y, k_x), periodic_extension(eps0, N_y))

    def job(k):
        forms = assemble_forms(build_mesh(N, 1, k_x, k), eps0)
        w, V = sla.eigh(forms.A.toarray(), forms.M.toarray())
        return forms, w - 1.0, V

    workers = workers or default_workers()
    with ThreadPoolExecutor(workers) as pool:
        res = list(pool.map(job, momenta))
    return FloquetContext(
        eps0, float(k_x), int(N_y), momenta, strip,
        [r[0] for r in res], [r[1] for r in res], [r[2] for r in res],
    )


def _check_len(ctx: FloquetContext, u: np.ndarray) -> None:
    if u.shape[0] != ctx.n_strip:
        raise FloquetError(f"strip data has length {u.shape[0]}, expected {ctx.n_strip}")


def forward_transform(ctx: FloquetContext, u: np.ndarray) -> np.ndarray:
    """Per-fiber blocks of a strip function or functional, shape ``(N_y, N*N[, m])``."""
    u = np.asarray(u)
    _check_len(ctx, u)
    return forward_data(ctx.momenta, u)


def inverse_transform(ctx: FloquetContext, fibers: np.ndarray) -> np.ndarray:
    fibers = np.asarray(fibers)
    if fibers.shape[:2] != (ctx.N_y, ctx.n_cell):
        raise FloquetError(f"fiber data has shape {fibers.shape[:2]}, expected {(ctx.N_y, ctx.n_cell)}")
    return inverse_data(ctx.momenta, fibers)


def _coefficients(ctx: FloquetContext, g: np.ndarray) -> list[np.ndarray]:
    """``psi_s(k_p)^H g_p`` for every fiber."""
    gh = forward_transform(ctx, g)
    return [ctx.eigvecs[p].conj().T @ gh[p] for p in range(ctx.N_y)]


def resolvent_via_bloch(ctx: FloquetContext, g: np.ndarray, lam: float) -> np.ndarray:
    """``(L0 - lam)^-1 g`` as a band expansion, fiber by fiber."""
    scale = 1.0 + abs(lam)
    out = np.empty((ctx.N_y, ctx.n_cell) + np.shape(g)[1:], dtype=complex)
    for p, c in enumerate(_coefficients(ctx, g)):
        den = ctx.eigvals[p] - lam
        if np.min(np.abs(den)) <= SPECTRUM_TOL * scale:
            raise FloquetError(f"lambda={lam} hits the band value at k={ctx.momenta[p]:.6f}")
        c = c / (den if c.ndim == 1 else den[:, None])
        out[p] = ctx.eigvecs[p] @ c
    return inverse_transform(ctx, out)


def hminus_norm_via_bloch(ctx: FloquetContext, f: np.ndarray) -> float:
    """``||f||^2_{H^-1}`` as ``sum_p sum_s |psi^H f_p|^2 / (lambda_s + 1)``."""
    return float(
        sum(np.sum(np.abs(c) ** 2 / (ctx.eigvals[p] + 1.0)) for p, c in enumerate(_coefficients(ctx, f)))
    )


def rayleigh_via_bloch(ctx: FloquetContext, w: np.ndarray, mu: float) -> float:
    """``sum |psi^H w_p|^2 / ((lambda_s + 1) (1 - mu (lambda_s + 1)))``."""
    total = 0.0
    for p, c in enumerate(_coefficients(ctx, w)):
        d = ctx.eigvals[p] + 1.0
        den = 1.0 - mu * d
        if np.min(np.abs(den)) <= SPECTRUM_TOL:
            raise FloquetError(f"mu={mu} hits 1/(lambda_s+1) at k={ctx.momenta[p]:.6f}")
        total += float(np.sum(np.abs(c) ** 2 / (d * den)))
    return total


def rayleigh_direct(forms: AssembledForms, w: np.ndarray, mu: float) -> float:
    """Strip-side value ``w^H A^-1 M (M - mu A)^-1 w`` of the same quantity."""
    u = solve_shifted(forms, mu, w)
    return float(np.real(np.vdot(solve_phi_inverse(forms, w), forms.M @ u)))


def block_diagonal_defect(ctx: FloquetContext, which: str = "A", n_probe: int = 3, seed: int = 0) -> float:
    """Relative mismatch between ``F X F^H`` and ``blockdiag(X_p)`` on random probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probe):
        v = rng.standard_normal((ctx.N_y, ctx.n_cell)) + 1j * rng.standard_normal((ctx.N_y, ctx.n_cell))
        X = getattr(ctx.strip, which)
        lhs = forward_transform(ctx, X @ inverse_transform(ctx, v))
        rhs = np.array([getattr(ctx.fibers[p], which) @ v[p] for p in range(ctx.N_y)])
        worst = max(worst, np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))
    return float(worst)


def v_isometry_defect(ctx: FloquetContext, n_probe: int = 3, seed: int = 1) -> float:
    """Relative mismatch of ``<Vu, Vv>`` over fiber H1 metrics versus the strip H1 product."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probe):
        u, v = (rng.standard_normal(ctx.n_strip) + 1j * rng.standard_normal(ctx.n_strip) for _ in range(2))
        uh, vh = forward_transform(ctx, u), forward_transform(ctx, v)
        fib = sum(np.vdot(vh[p], ctx.fibers[p].A @ uh[p]) for p in range(ctx.N_y))
        strip = np.vdot(v, ctx.strip.A @ u)
        worst = max(worst, abs(fib - strip) / abs(strip))
    return float(worst)


def spectral_coincidence(ctx: FloquetContext, n_check: int = 40) -> float:
    """Max difference between the lowest strip pencil eigenvalues and the band multiset."""
    strip = ctx.strip
    if strip.n <= 2000:
        w = sla.eigh(strip.S.toarray(), strip.M.toarray(), eigvals_only=True, subset_by_index=[0, n_check - 1])
    else:
        w = np.sort(spla.eigsh(strip.S, k=n_check, M=strip.M, sigma=-0.5, return_eigenvectors=False,
                                v0=np.ones(strip.n, dtype=complex)))
    ref = ctx.band_multiset()[:n_check]
    return float(np.max(np.abs(w - ref)) / (1.0 + np.max(np.abs(ref))))


@dataclass(frozen=True)
class IdentityReport:
    spectrum: float
    resolvent: float
    rayleigh: float
    hminus_norm: float
    block_diagonal: float
    v_isometry: float
    tol: float

    def passed(self) -> dict:
        return {k: getattr(self, k) <= self.tol for k in
                ("spectrum", "resolvent", "rayleigh", "hminus_norm", "block_diagonal", "v_isometry")}

    def as_dict(self) -> dict:
        return {
            "max_rel_error": {k: getattr(self, k) for k in self.passed()},
            "pass": self.passed(),
            "tol": self.tol,
        }


def check_identities(
    ctx: FloquetContext, lam: float, mu: float, n_random: int = 20, tol: float = 1e-9, seed: int = 0
) -> IdentityReport:
    """Compare band expansions with direct strip solves on random functionals.

    ``lam`` must avoid every band value and ``mu`` every ``1/(lambda_s+1)``.
    """
    from .discretize import apply_resolvent, hminus_norm2

    rng = np.random.default_rng(seed)
    errs = {"resolvent": 0.0, "rayleigh": 0.0, "hminus_norm": 0.0}
    for _ in range(n_random):
        g = rng.standard_normal(ctx.n_strip) + 1j * rng.standard_normal(ctx.n_strip)
        direct = apply_resolvent(ctx.strip, lam, g)
        via = resolvent_via_bloch(ctx, g, lam)
        errs["resolvent"] = max(errs["resolvent"], np.linalg.norm(via - direct) / np.linalg.norm(direct))
        r0, r1 = rayleigh_direct(ctx.strip, g, mu), rayleigh_via_bloch(ctx, g, mu)
        errs["rayleigh"] = max(errs["rayleigh"], abs(r1 - r0) / abs(r0))
        h0, h1 = hminus_norm2(ctx.strip, g), hminus_norm_via_bloch(ctx, g)
        errs["hminus_norm"] = max(errs["hminus_norm"], abs(h1 - h0) / abs(h0))
    return IdentityReport(
        spectrum=spectral_coincidence(ctx),
        block_diagonal=max(block_diagonal_defect(ctx, "A"), block_diagonal_defect(ctx, "M")),
        v_isometry=v_isometry_defect(ctx),
        tol=tol,
        **{k: float(v) for k, v in errs.items()},
    )
