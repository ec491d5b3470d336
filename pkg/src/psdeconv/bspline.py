"""Clamped uniform B-spline bases, design matrices and spline derivatives."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .signal_core import DomainError

# 25 functions cannot follow the post-bolus peak at 8 s sampling
DEFAULT_P = 50
DEFAULT_DEGREE = 3


class BasisConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplineBasis:
    """Knot vector of length ``p + degree + 1`` supporting ``p`` basis functions."""

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if self.degree < 0:
            raise BasisConfigError("degree must be >= 0")
        if np.any(np.diff(knots) < 0):
            raise BasisConfigError("knots must be nondecreasing")
        if self.p < max(self.degree + 1, 1):
            raise BasisConfigError("too few knots for the requested degree")

    @property
    def p(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def t_min(self) -> float:
        return float(self.knots[self.degree])

    @property
    def t_max(self) -> float:
        return float(self.knots[-self.degree - 1])


def make_basis(t_min: float, t_max: float, p: int = DEFAULT_P, degree: int = DEFAULT_DEGREE) -> SplineBasis:
    """Clamped basis with ``p - degree - 1`` equally spaced interior knots."""
    if degree < 1:
        raise BasisConfigError("degree must be >= 1")
    if p < degree + 1:
        raise BasisConfigError(f"p={p} is too small for degree {degree}")
    if not t_max > t_min:
        raise BasisConfigError("t_max must exceed t_min")
    n_interior = p - degree - 1
    interior = np.linspace(t_min, t_max, n_interior + 2)[1:-1]
    knots = np.concatenate(
        [np.full(degree + 1, float(t_min)), interior, np.full(degree + 1, float(t_max))]
    )
    return SplineBasis(degree=degree, knots=knots)


def _find_spans(basis: SplineBasis, x: np.ndarray) -> np.ndarray:
    # index mu with knots[mu] <= x < knots[mu+1]; the right end joins the last span
    k, s = basis.degree, basis.knots
    mu = np.searchsorted(s, x, side="right") - 1
    return np.clip(mu, k, basis.p - 1)


def design_matrix(basis: SplineBasis, eval_points) -> np.ndarray:
    """Evaluate all basis functions at ``eval_points`` (rows) by the Cox--de Boor
    triangular recursion. Points must lie inside the span of the basis."""
    x = np.atleast_1d(np.asarray(eval_points, dtype=float))
    lo, hi = basis.t_min, basis.t_max
    tol = 1e-12 * max(1.0, abs(hi), abs(lo))
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise DomainError(f"evaluation points must lie in [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    k, s = basis.degree, basis.knots
    mu = _find_spans(basis, x)

    # N[:, r] holds B_{mu-k+r}, grown one degree at a time
    N = np.ones((x.size, k + 1))
    left = np.zeros((x.size, k + 1))
    right = np.zeros((x.size, k + 1))
    for j in range(1, k + 1):
        left[:, j] = x - s[mu + 1 - j]
        right[:, j] = s[mu + j] - x
        saved = np.zeros(x.size)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(denom > 0, N[:, r] / denom, 0.0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    out = np.zeros((x.size, basis.p))
    cols = (mu - k)[:, None] + np.arange(k + 1)[None, :]
    np.put_along_axis(out, cols, N, axis=1)
    return out


def derivative_coeffs(beta, basis: SplineBasis) -> tuple[np.ndarray, SplineBasis]:
    """Coefficients and basis of the first derivative of ``sum beta_j B_j``.

    ``gamma_j = k / (s_{j+k+1} - s_{j+1}) * (beta_{j+1} - beta_j)`` on the knot
    vector with one knot dropped at each end.
    """
    beta = np.asarray(beta, dtype=float)
    k, s = basis.degree, basis.knots
    if k < 1:
        raise BasisConfigError("cannot differentiate a degree-0 spline")
    if beta.shape[-1] != basis.p:
        raise BasisConfigError(f"expected {basis.p} coefficients, got {beta.shape[-1]}")
    span = s[k + 1 : k + basis.p] - s[1 : basis.p]
    zero = span <= 0
    if np.any(zero):
        warnings.warn("zero-length knot span in spline derivative; coefficient set to 0", RuntimeWarning, stacklevel=2)
    scale = np.where(zero, 0.0, k / np.where(zero, 1.0, span))
    gamma = scale * np.diff(beta, axis=-1)
    return gamma, SplineBasis(degree=k - 1, knots=s[1:-1])
