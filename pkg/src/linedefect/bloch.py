"""Band functions of the cell fibers, gap detection and band-edge analysis."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .discretize import assemble_forms, build_mesh
from .medium import DielectricMap

log = logging.getLogger(__name__)

DENSE_LIMIT = 400
THREADS_ENV = "LINEDEFECT_THREADS"


class BandError(RuntimeError):
    pass


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def uniform_kgrid(n_k: int) -> np.ndarray:
    """Periodic grid ``-pi + 2 pi p / n_k``; the point ``+pi`` is not repeated."""
    return -np.pi + 2 * np.pi * np.arange(n_k) / n_k


@dataclass(frozen=True)
class BandStructure:
    """Band table ``bands[p, s] = lambda_s(k_p)``.

    ``vectors[p, :, s]`` is the eigenvector normalized to unit L2 norm (the
    discrete psi_s); the Bloch function phi_s is ``sqrt(lambda_s + 1)`` times it.
    Columns are magnitude-ordered until :func:`sort_analytic` relabels them.
    """

    kgrid: np.ndarray
    bands: np.ndarray
    vectors: np.ndarray | None = None
    masses: tuple | None = None
    k_x: float = 0.0
    sorted: bool = False
    warnings: tuple[str, ...] = field(default=())

    @property
    def n_k(self) -> int:
        return self.kgrid.size

    @property
    def n_bands(self) -> int:
        return self.bands.shape[1]

    @property
    def dk(self) -> float:
        return float(self.kgrid[1] - self.kgrid[0]) if self.n_k > 1 else 2 * np.pi

    @property
    def periodic(self) -> bool:
        return self.n_k > 1 and np.isclose(self.dk * self.n_k, 2 * np.pi)

    def magnitude(self) -> np.ndarray:
        return np.sort(self.bands, axis=1)

    def label_of_rank(self, p: int, rank: int) -> int:
        """Column holding the ``rank``-th smallest eigenvalue at ``k_p``."""
        return int(np.argsort(self.bands[p], kind="stable")[rank])

    def psi(self, p: int, s: int) -> np.ndarray:
        return self.vectors[p, :, s]

    def phi(self, p: int, s: int) -> np.ndarray:
        return np.sqrt(self.bands[p, s] + 1.0) * self.vectors[p, :, s]

    def k_index(self, k: float) -> int:
        """Nearest grid index to ``k`` (periodically when the grid is periodic)."""
        d = self.kgrid - k
        if self.periodic:
            d = np.mod(d + np.pi, 2 * np.pi) - np.pi
        return int(np.argmin(np.abs(d)))

    def shift(self, p: int, m: int) -> int | None:
        q = p + m
        if self.periodic:
            return q % self.n_k
        return q if 0 <= q < self.n_k else None


def _fiber_eigs(S, M, n_bands: int, solver: str):
    n = S.shape[0]
    if solver == "dense" or (solver == "auto" and n <= DENSE_LIMIT):
        w, V = sla.eigh(S.toarray(), M.toarray(), subset_by_index=[0, n_bands - 1])
        return w, V
    # shift-invert below the spectrum (S is PSD), then Rayleigh-Ritz in the M-metric
    n_req = min(n - 1, n_bands + 2)
    w, V = spla.eigsh(S, k=n_req, M=M, sigma=-0.5, which="LM", tol=0, v0=np.ones(n, dtype=complex))
    Sr = V.conj().T @ (S @ V)
    Mr = V.conj().T @ (M @ V)
    w, C = sla.eigh(0.5 * (Sr + Sr.conj().T), 0.5 * (Mr + Mr.conj().T))
    return w[:n_bands], (V @ C)[:, :n_bands]


def fiber_problem(eps0: DielectricMap, k_x: float, k: float, n_bands: int, solver: str = "auto"):
    """Lowest ``n_bands`` eigenpairs of the fiber pencil ``(S_k, M_k)`` and its mass matrix."""
    forms = assemble_forms(build_mesh(eps0.cell_resolution, 1, k_x, k), eps0)
    w, V = _fiber_eigs(forms.S, forms.M, n_bands, solver)
    return w, V, forms.M


def compute_bands(
    eps0: DielectricMap,
    k_x: float,
    kgrid: np.ndarray | int,
    n_bands: int,
    solver: str = "auto",
    keep_vectors: bool = True,
    workers: int | None = None,
) -> BandStructure:
    """Solve the fiber problems at every grid momentum (independent per k)."""
    if eps0.strip_extent != 1:
        raise BandError("band structure needs a unit-cell permittivity map")
    if isinstance(kgrid, (int, np.integer)):
        kgrid = uniform_kgrid(int(kgrid))
    kgrid = np.asarray(kgrid, dtype=float)
    n_dof = eps0.cell_resolution ** 2
    if not 1 <= n_bands <= n_dof:
        raise BandError(f"n_bands={n_bands} must lie in [1, {n_dof}]")
    if kgrid.size > 2 and not np.allclose(np.diff(kgrid), kgrid[1] - kgrid[0]):
        raise BandError("kgrid must be uniform")

    def job(p):
        try:
            return fiber_problem(eps0, k_x, kgrid[p], n_bands, solver)
        except (np.linalg.LinAlgError, spla.ArpackNoConvergence, ValueError) as exc:
            raise BandError(f"fiber eigensolve failed at k_{p}={kgrid[p]:.6f} (n_bands={n_bands}): {exc}") from exc

    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(kgrid.size)))
    else:
        results = [job(p) for p in range(kgrid.size)]
    bands = np.array([r[0] for r in results])
    vectors = np.array([r[1] for r in results]) if keep_vectors else None
    masses = tuple(r[2] for r in results) if keep_vectors else None
    return BandStructure(kgrid, bands, vectors, masses, float(k_x))


def sort_analytic(bs: BandStructure, tie_tol: float = 1e-6, deg_tol: float = 1e-9) -> BandStructure:
    """Relabel bands so eigenvectors at neighbouring momenta overlap maximally.

    Greedy assignment on ``|psi_a(k_p)^H M psi_b(k_{p+1})|``; near-ties are
    broken by eigenvalue proximity and recorded as warnings. Across an exact
    degeneracy the match is made against the previous reference projected onto
    the degenerate eigenspace.
    """
    if bs.vectors is None:
        raise BandError("analytic sorting needs eigenvectors")
    bands = bs.bands.copy()
    vecs = bs.vectors.copy()
    warnings = list(bs.warnings)
    nb = bs.n_bands
    ref = vecs[0].copy()
    for p in range(bs.n_k - 1):
        # inside an exactly degenerate cluster the eigenbasis is arbitrary, so
        # the reference is the previous one projected onto the cluster's span
        lam = bands[p]
        deg = np.abs(lam[:, None] - lam[None, :]) <= deg_tol * (1 + np.abs(lam[:, None]))
        fresh = (deg.sum(axis=1) == 1) | (p == 0)
        ref[:, fresh] = vecs[p][:, fresh]
        for c in {tuple(np.flatnonzero(row)) for row in deg[~fresh]}:
            c = list(c)
            P = vecs[p][:, c]
            Mp = P if bs.masses is None else bs.masses[p] @ P
            R = P @ (Mp.conj().T @ ref[:, c])
            ref[:, c] = R / np.linalg.norm(R, axis=0)
        right = vecs[p + 1]
        Mr = ref if bs.masses is None else bs.masses[p + 1] @ ref
        O = np.abs(Mr.conj().T @ right)
        dist = np.abs(bands[p][:, None] - bands[p + 1][None, :])
        order = np.lexsort((dist.ravel(), -np.round(O.ravel() / tie_tol)))
        perm = -np.ones(nb, dtype=int)
        used = np.zeros(nb, dtype=bool)
        for flat in order:
            a, b = divmod(int(flat), nb)
            if perm[a] >= 0 or used[b]:
                continue
            free = ~used.copy()
            free[b] = False
            if free.any() and O[a, free].max() > O[a, b] - tie_tol:
                warnings.append(
                    f"ambiguous band match at k={bs.kgrid[p + 1]:.6f}, band {a}: "
                    "tie broken by eigenvalue proximity"
                )
            perm[a] = b
            used[b] = True
        bands[p + 1] = bands[p + 1][perm]
        vecs[p + 1] = vecs[p + 1][:, perm]
    for w in warnings[len(bs.warnings):]:
        log.warning(w)
    return replace(bs, bands=bands, vectors=vecs, sorted=True, warnings=tuple(warnings))


def band_ranges(bs: BandStructure) -> np.ndarray:
    mag = bs.magnitude()
    return np.stack([mag.min(axis=0), mag.max(axis=0)], axis=1)


def detect_gaps(
    bs: BandStructure, search_window: tuple[float, float], min_width: float = 1e-8
) -> list[tuple[float, float]]:
    """Open intervals between computed band ranges that meet the window.

    Only the region below the minimum of the highest computed band is
    resolved, since uncomputed bands may cover anything above it. Intervals
    narrower than ``min_width * (1 + |edge|)`` are roundoff between touching
    bands and are dropped.
    """
    lo_w, hi_w = search_window
    ranges = band_ranges(bs)
    ceiling = ranges[-1, 0]
    ranges = ranges[np.argsort(ranges[:, 0])]
    gaps = []
    reach = ranges[0, 1]
    for lo, hi in ranges[1:]:
        if lo - reach > min_width * (1 + abs(lo)):
            if lo <= ceiling and reach < hi_w and lo > lo_w:
                gaps.append((float(reach), float(lo)))
        reach = max(reach, hi)
    return gaps


@dataclass(frozen=True)
class SigmaPoint:
    rank: int  # magnitude index (0-based) at the grid point
    label: int  # band column in the (possibly relabeled) table
    p: int  # grid index
    k: float  # refined minimizer
    value: float


@dataclass(frozen=True)
class EdgeFit:
    alpha: float
    alpha_lower: float
    delta: float
    residual: float
    ok: bool


@dataclass(frozen=True)
class GapReport:
    lam0: float
    lam1: float
    sigma: tuple[SigmaPoint, ...]
    s0: int
    alpha_delta: tuple[EdgeFit, ...]
    eta: float
    nonconstant: bool
    nondegenerate: bool
    warnings: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.sigma)

    @property
    def assumptions_hold(self) -> bool:
        return self.nonconstant and self.nondegenerate

    def as_dict(self) -> dict:
        return {
            "lam0": self.lam0,
            "lam1": self.lam1,
            "n": self.n,
            "s0": self.s0 + 1,
            "sigma": [
                {"band": s.rank + 1, "label": s.label, "k": s.k, "k_grid_index": s.p, "value": s.value}
                for s in self.sigma
            ],
            "edge_fits": [
                {"alpha": f.alpha, "alpha_lower": f.alpha_lower, "delta": f.delta,
                 "residual": f.residual, "ok": f.ok}
                for f in self.alpha_delta
            ],
            "isolation_margin": self.eta,
            "nonconstant": self.nonconstant,
            "nondegenerate": self.nondegenerate,
            "warnings": list(self.warnings),
        }


class SigmaError(BandError):
    pass


def _parabola_vertex(bs: BandStructure, label: int, p: int) -> float:
    left, right = bs.shift(p, -1), bs.shift(p, 1)
    if left is None or right is None:
        return float(bs.kgrid[p])
    y0, y1, y2 = bs.bands[left, label], bs.bands[p, label], bs.bands[right, label]
    curv = y0 - 2 * y1 + y2
    if curv <= 0:
        return float(bs.kgrid[p])
    off = 0.5 * (y0 - y2) / curv
    if abs(off) < 1e-9:  # symmetric neighbours: keep the grid point exactly
        return float(bs.kgrid[p])
    k = bs.kgrid[p] + off * bs.dk
    return float(np.mod(k + np.pi, 2 * np.pi) - np.pi) if bs.periodic else float(k)


def extract_sigma(
    bs: BandStructure,
    gap: tuple[float, float],
    tau_lam: float | None = None,
    tau_k: float | None = None,
    flat_limit: int = 10,
) -> tuple[list[SigmaPoint], int, float]:
    """Edge set at the upper gap edge: returns ``(sigma, s0, lam1)``.

    ``s0`` is the 0-based magnitude index of the first band above the gap.
    """
    lam0, lam1_in = gap
    if tau_lam is None:
        tau_lam = 1e-6 * (lam1_in - lam0)
    if tau_k is None:
        tau_k = 2 * bs.dk
    if tau_lam <= 0 or tau_k <= 0:
        raise SigmaError("tolerances must be positive")
    mag = bs.magnitude()
    mid = 0.5 * (lam0 + lam1_in)
    above = np.flatnonzero(mag.min(axis=0) > mid)
    below = np.flatnonzero(mag.max(axis=0) < mid)
    if above.size == 0:
        raise SigmaError("no computed band lies above the gap; increase n_bands")
    s0 = int(above[0])
    if below.size != s0:
        raise SigmaError("gap is crossed by a band")
    lam1 = float(mag[:, s0:].min())

    sigma = []
    for s in range(s0, bs.n_bands):
        hits = np.flatnonzero(mag[:, s] <= lam1 + tau_lam)
        if hits.size == 0:
            continue
        if hits.size > flat_limit:
            raise SigmaError(
                f"near-constant band edge: band {s + 1} stays within {tau_lam:.2e} of the gap edge "
                f"on {hits.size} samples; non-constancy / quadratic non-degeneracy at risk"
            )
        for cluster in _clusters(bs, hits, tau_k):
            p = int(cluster[np.argmin(mag[cluster, s])])
            label = bs.label_of_rank(p, s)
            sigma.append(
                SigmaPoint(s, label, p, _parabola_vertex(bs, label, p), float(mag[p, s]))
            )
    return sigma, s0, lam1


def _clusters(bs: BandStructure, idx: np.ndarray, tau_k: float) -> list[np.ndarray]:
    idx = np.sort(idx)
    groups = [[idx[0]]]
    for q in idx[1:]:
        if (q - groups[-1][-1]) * bs.dk <= tau_k:
            groups[-1].append(q)
        else:
            groups.append([q])
    if bs.periodic and len(groups) > 1:
        wrap = (groups[0][0] + bs.n_k - groups[-1][-1]) * bs.dk
        if wrap <= tau_k:
            groups[0] = groups.pop() + groups[0]
    return [np.array(g) for g in groups]


def fit_edge_nondegeneracy(
    bs: BandStructure,
    sigma: list[SigmaPoint],
    lam1: float,
    delta: float | None = None,
    alpha_min: float = 1e-3,
    flat_tol: float = 0.25,
) -> list[EdgeFit]:
    """Quadratic lower-bound constants near every edge point.

    ``alpha`` is the x^2 coefficient of a least-squares fit of
    ``lambda - lam1`` in ``x = k - k_p`` (``k_p`` the grid minimizer) with
    terms x..x^4 on ``|x| <= delta`` (default ``min(4 dk, 1)``);
    ``alpha_lower`` is ``min (lambda - lam1) / x^2`` over the window. The fit
    is rejected if ``alpha < alpha_min``, if the x^2 term explains less than
    ``1 - flat_tol`` of the signal at the innermost samples, or if the window
    holds no more samples than fit terms (the fit then interpolates and
    cannot tell a quadratic edge from a flatter one).
    """
    if delta is None:
        delta = min(4 * bs.dk, 1.0)
    w = max(2, int(round(delta / bs.dk)))
    fits = []
    for sp in sigma:
        # centred on the grid minimizer, where the discrete lam1 is attained
        xs, ys = [], []
        for m in range(-w, w + 1):
            q = bs.shift(sp.p, m)
            if q is None:
                continue
            xs.append(m * bs.dk)
            ys.append(bs.bands[q, sp.label] - lam1)
        x, y = np.array(xs), np.array(ys)
        basis = np.stack([x, x**2, x**3, x**4], axis=1)
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        alpha = float(coef[1])
        nz = x != 0
        ratio = y[nz] / x[nz] ** 2
        alpha_lower = float(ratio.min())
        inner = np.argsort(np.abs(x[nz]))[:2]
        quad_share = alpha * x[nz][inner] ** 2 / np.maximum(y[nz][inner], 1e-300)
        residual = float(np.max(np.abs(1 - quad_share)))
        ok = alpha >= alpha_min and alpha_lower > 0 and residual <= flat_tol and nz.sum() > basis.shape[1]
        fits.append(EdgeFit(alpha, alpha_lower, float(w * bs.dk), residual, bool(ok)))
    return fits


def check_nonconstant_bands(bs: BandStructure, rtol: float = 1e-8) -> np.ndarray:
    """True for every band column that varies with k."""
    spread = bs.bands.max(axis=0) - bs.bands.min(axis=0)
    return spread >= rtol * (1 + np.abs(bs.bands.mean(axis=0)))


def isolation_margin(
    bs: BandStructure, sigma: list[SigmaPoint], lam1: float, tau_lam: float | None = None
) -> float:
    """Distance from ``lam1`` of all bands outside the edge set."""
    labels = {s.label for s in sigma}
    others = [c for c in range(bs.n_bands) if c not in labels]
    if not others:
        return float("inf")
    eta = float(np.min(np.abs(bs.bands[:, others] - lam1)))
    if tau_lam is not None and eta <= tau_lam:
        log.warning("isolation margin %.3e <= tau_lam %.3e: edge-set tolerance inconsistent", eta, tau_lam)
    return eta


def analyze_gap(
    bs: BandStructure,
    gap: tuple[float, float],
    tau_lam: float | None = None,
    tau_k: float | None = None,
    alpha_min: float = 1e-3,
    delta: float | None = None,
) -> GapReport:
    """Edge set, non-degeneracy fits, isolation margin and assumption flags."""
    sigma, s0, lam1 = extract_sigma(bs, gap, tau_lam, tau_k)
    mag = bs.magnitude()
    lam0 = float(mag[:, :s0].max()) if s0 > 0 else float(gap[0])
    if tau_lam is None:
        tau_lam = 1e-6 * (lam1 - lam0)
    fits = fit_edge_nondegeneracy(bs, sigma, lam1, delta=delta, alpha_min=alpha_min)
    eta = isolation_margin(bs, sigma, lam1, tau_lam)
    warnings = []
    if eta <= tau_lam:
        warnings.append("isolation margin below edge-set tolerance")
    nonconst = check_nonconstant_bands(bs)
    edge_labels = {s.label for s in sigma}
    if s0 > 0:
        p0 = int(np.argmax(mag[:, s0 - 1]))
        edge_labels.add(bs.label_of_rank(p0, s0 - 1))
    flagged = [c for c in edge_labels if not nonconst[c]]
    if flagged:
        warnings.append(f"constant band(s) {flagged} touch a gap edge")
    return GapReport(
        lam0=lam0,
        lam1=lam1,
        sigma=tuple(sigma),
        s0=s0,
        alpha_delta=tuple(fits),
        eta=eta,
        nonconstant=not flagged,
        nondegenerate=all(f.ok for f in fits),
        warnings=tuple(warnings),
    )
