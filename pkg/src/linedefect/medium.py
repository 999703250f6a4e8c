"""Element-sampled permittivity maps for the periodic cell and the defect strip.

Maps are stored as ``(rows, N)`` arrays of element values, where ``rows`` is
``N * N_y``. On a strip the central cell occupies ``y in [0, 1]`` and the strip
spans ``y in [-(N_y - 1)/2, (N_y + 1)/2]``; ``x`` always runs over ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class MediumError(ValueError):
    """Raised when a permittivity map violates a standing assumption."""

    def __init__(self, message: str, flag: str | None = None):
        super().__init__(message)
        self.flag = flag


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[x0, x1] x [y0, y1]`` carrying a value.

    For inclusions ``value`` is the permittivity inside; for defects it is the
    increment ``delta_eps`` that gets scaled by the defect strength.
    """

    x0: float
    x1: float
    y0: float
    y1: float
    value: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise MediumError(f"degenerate rectangle {self}")

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x > self.x0) & (x < self.x1) & (y > self.y0) & (y < self.y1)

    @classmethod
    def from_mapping(cls, d: dict) -> "Rect":
        if "eps" in d:
            value = d["eps"]
        elif "delta_eps" in d:
            value = d["delta_eps"]
        else:
            value = d["value"]
        return cls(float(d["x0"]), float(d["x1"]), float(d["y0"]), float(d["y1"]), float(value))


@dataclass(frozen=True)
class DielectricMap:
    cell_resolution: int
    values: np.ndarray
    strip_extent: int = 1
    defect_support: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        N, ny = self.cell_resolution, self.strip_extent
        if vals.shape != (N * ny, N):
            raise MediumError(f"values shape {vals.shape} does not match N={N}, N_y={ny}")
        if not np.all(np.isfinite(vals)):
            raise MediumError("permittivity must be finite", flag="bounded")
        if np.any(vals <= 0):
            raise MediumError(
                f"permittivity must be uniformly positive (min {vals.min():g})",
                flag="uniformly_positive",
            )
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "defect_support", frozenset(int(i) for i in self.defect_support))

    @property
    def n_elements(self) -> int:
        return self.values.size

    @property
    def flat(self) -> np.ndarray:
        """Element values in flat order ``iy * N + ix``."""
        return self.values.ravel()

    def element_midpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return element_midpoints(self.cell_resolution, self.strip_extent)

    def same_geometry(self, other: "DielectricMap") -> bool:
        return (
            self.cell_resolution == other.cell_resolution
            and self.strip_extent == other.strip_extent
        )


def strip_offset(n_y: int) -> float:
    """y-coordinate of the bottom of the strip (central cell is ``[0, 1]``)."""
    return -(n_y - 1) / 2.0


def element_midpoints(N: int, n_y: int = 1) -> tuple[np.ndarray, np.ndarray]:
    h = 1.0 / N
    xs = (np.arange(N) + 0.5) * h
    ys = (np.arange(N * n_y) + 0.5) * h + (strip_offset(n_y) if n_y > 1 else 0.0)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    return X, Y


def build_periodic_medium(
    background: float, inclusions: Iterable[Rect] = (), N: int = 32
) -> DielectricMap:
    """Sample a unit-cell permittivity at element midpoints.

    Later inclusions overwrite earlier ones where they overlap.
    """
    if N < 4:
        raise MediumError(f"cell resolution must be >= 4, got {N}")
    _check_value(background, "background")
    X, Y = element_midpoints(N)
    vals = np.full((N, N), float(background))
    for rect in inclusions:
        _check_value(rect.value, "inclusion")
        if rect.x0 < 0 or rect.y0 < 0 or rect.x1 > 1 or rect.y1 > 1:
            raise MediumError(f"inclusion {rect} leaves the unit cell")
        vals[rect.contains(X, Y)] = rect.value
    return DielectricMap(N, vals)


def periodic_extension(eps0: DielectricMap, n_y: int) -> DielectricMap:
    """Tile a unit-cell map ``n_y`` times in y."""
    if eps0.strip_extent != 1:
        raise MediumError("periodic extension expects a unit-cell map")
    return DielectricMap(eps0.cell_resolution, np.tile(eps0.values, (n_y, 1)), n_y)


def apply_line_defect(
    eps0: DielectricMap, defect: Sequence[Rect], t: float, n_y: int
) -> DielectricMap:
    """Strip map ``eps0 + t * delta_eps`` on the defect rectangles.

    Rectangles are given in strip coordinates (central cell ``[0, 1]``) and
    must stay clear of the two outermost cells of the strip.
    """
    if t < 0:
        raise MediumError(f"defect strength must be nonnegative, got {t}")
    if n_y < 3 or n_y % 2 == 0:
        raise MediumError(f"strip extent must be odd and >= 3, got {n_y}")
    base = periodic_extension(eps0, n_y)
    N = eps0.cell_resolution
    X, Y = element_midpoints(N, n_y)
    y_lo = strip_offset(n_y)
    y_hi = y_lo + n_y
    vals = base.values.copy()
    for rect in defect:
        if rect.x0 < 0 or rect.x1 > 1:
            raise MediumError(f"defect {rect} leaves the strip in x")
        if rect.y0 < y_lo + 1 or rect.y1 > y_hi - 1:
            raise MediumError(
                f"defect {rect} reaches the truncation boundary; the defect must be localised in y",
                flag="localised",
            )
        vals[rect.contains(X, Y)] += t * rect.value
    if np.any(vals <= 0):
        raise MediumError("perturbed permittivity is not positive", flag="uniformly_positive")
    support = np.flatnonzero(vals.ravel() != base.values.ravel())
    return DielectricMap(N, vals, n_y, frozenset(support.tolist()))


@dataclass(frozen=True)
class AssumptionReport:
    bounded: bool
    uniformly_positive: bool
    min_value: float
    perturbation_nonneg: bool
    strict_on_region: bool
    strict_elements: tuple[int, ...]
    perturbation_size: float

    @property
    def all_hold(self) -> bool:
        return (
            self.bounded
            and self.uniformly_positive
            and self.perturbation_nonneg
            and self.strict_on_region
        )

    def as_dict(self) -> dict:
        return {
            "bounded": self.bounded,
            "uniformly_positive": self.uniformly_positive,
            "min_value": self.min_value,
            "perturbation_nonneg": self.perturbation_nonneg,
            "strict_on_region": self.strict_on_region,
            "strict_element_count": len(self.strict_elements),
            "perturbation_size": self.perturbation_size,
        }


def _require_same(eps0: DielectricMap, eps1: DielectricMap) -> None:
    if not eps0.same_geometry(eps1):
        raise MediumError(
            "permittivity maps differ in resolution or strip extent "
            f"({eps0.cell_resolution}x{eps0.strip_extent} vs "
            f"{eps1.cell_resolution}x{eps1.strip_extent})"
        )


def perturbation_size(eps0: DielectricMap, eps1: DielectricMap) -> float:
    """Sup-norm of ``1/eps0 - 1/eps1`` over elements."""
    _require_same(eps0, eps1)
    return float(np.max(np.abs(1.0 / eps0.flat - 1.0 / eps1.flat)))


def validate_assumptions(
    eps0: DielectricMap, eps1: DielectricMap, min_strict_elements: int = 1
) -> AssumptionReport:
    _require_same(eps0, eps1)
    v0, v1 = eps0.flat, eps1.flat
    diff = v1 - v0
    strict = np.flatnonzero(diff > 0)
    both = np.concatenate([v0, v1])
    return AssumptionReport(
        bounded=bool(np.all(np.isfinite(both))),
        uniformly_positive=bool(np.all(both > 0)),
        min_value=float(both.min()),
        perturbation_nonneg=bool(np.all(diff >= 0)),
        strict_on_region=len(strict) >= max(1, min_strict_elements),
        strict_elements=tuple(int(i) for i in strict),
        perturbation_size=perturbation_size(eps0, eps1),
    )


def _check_value(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise MediumError(f"{what} permittivity must be finite", flag="bounded")
    if value <= 0:
        raise MediumError(
            f"{what} permittivity must be positive, got {value}", flag="uniformly_positive"
        )
