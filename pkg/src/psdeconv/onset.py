"""Contrast-arrival onset from the posterior credible band.

The onset is found in three steps: the first observation time ``t*`` whose
lower band edge is positive, the gradient of the fitted curve at ``t*``,
and the zero crossing of the tangent line through ``(t*, C(t*))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bspline import SplineBasis, derivative_coeffs, design_matrix
from .sampler import PSplineChain, PSplineModel, posterior_band
from .signal_core import DomainError, TimeGrid, build_convolution_operator

FLAG_OK = "ok"
FLAG_NO_ENHANCEMENT = "NoEnhancement"
FLAG_DEGENERATE_GRADIENT = "DegenerateGradient"


class NoEnhancement(Exception):
    """No observation time has a strictly positive lower band edge."""


class DegenerateGradient(Exception):
    """The posterior median gradient at ``t*`` is not positive."""

    def __init__(self, message, t_star=None, gradient=None):
        super().__init__(message)
        self.t_star = t_star
        self.gradient = gradient


@dataclass
class OnsetEstimate:
    t_star: float
    gradient_at_t_star: float
    t0: float
    ci_level: float = 0.99
    flag: str = FLAG_OK
    value_at_t_star: float = float("nan")


def detect_t_star(lower, tau) -> float:
    """First ``tau_i`` (left to right) whose lower band edge exceeds zero."""
    lower = np.asarray(lower, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if lower.shape != tau.shape:
        raise DomainError("band and observation grid differ in length")
    hits = np.nonzero(lower > 0)[0]
    if hits.size == 0:
        raise NoEnhancement("lower credible bound never exceeds zero")
    return float(tau[hits[0]])


def _tau_index(grid: TimeGrid, t_star: float) -> int:
    i = int(np.argmin(np.abs(grid.tau - t_star)))
    if not np.isclose(grid.tau[i], t_star, rtol=0, atol=1e-9 * max(1.0, abs(t_star))):
        raise DomainError("t_star must be an observation time")
    return i


def gradient_draws(chain: PSplineChain, t_star: float, aif_samples, basis: SplineBasis, grid: TimeGrid) -> np.ndarray:
    """Per-draw ``dC/dt`` at ``t_star``.

    The derivative of ``C_p * f`` is ``C_p * f' + C_p(t) f(0)``; ``f'`` comes
    from the derivative spline, convolved with the same rectangle rule as
    the fitted curve.
    """
    i = _tau_index(grid, t_star)
    aif_samples = np.asarray(aif_samples, dtype=float)
    A = build_convolution_operator(aif_samples, grid)
    gamma, dbasis = derivative_coeffs(chain.beta, basis)
    dB = design_matrix(dbasis, grid.t)
    row = A.entries[i] @ dB  # (p-1,)
    conv_part = gamma @ row
    f0 = chain.beta @ design_matrix(basis, [grid.t[0]])[0]
    n_i = grid.last_index_before()[i]
    return conv_part + aif_samples[n_i] * f0


def gradient_at(chain: PSplineChain, t_star: float, aif_samples, basis: SplineBasis, grid: TimeGrid) -> float:
    """Posterior median gradient of the fitted curve at ``t_star`` (conc/min)."""
    g = float(np.median(gradient_draws(chain, t_star, aif_samples, basis, grid)))
    if not g > 0:
        raise DegenerateGradient(f"non-positive gradient {g:g} at t*={t_star:g}", t_star=t_star, gradient=g)
    return g


def estimate_onset(chain: PSplineChain, model: PSplineModel, level: float = 0.99) -> OnsetEstimate:
    """Onset ``t0 = t* - C(t*) / C'(t*)`` with ``C`` the posterior median fit.

    A degenerate gradient falls back to ``t0 = t*`` with the flag set;
    ``NoEnhancement`` propagates.
    """
    if len(chain) == 0:
        raise DomainError("empty chain")
    grid = model.record.grid
    band = posterior_band(chain, model, level).ctc
    t_star = detect_t_star(band.lower, band.times)
    c_star = float(band.median[_tau_index(grid, t_star)])
    try:
        grad = gradient_at(chain, t_star, model.aif_samples, model.basis, grid)
    except DegenerateGradient as exc:
        return OnsetEstimate(t_star, float(exc.gradient), t_star, level, FLAG_DEGENERATE_GRADIENT, c_star)
    return OnsetEstimate(t_star, grad, t_star - c_star / grad, level, FLAG_OK, c_star)


def roi_onset(estimates) -> float:
    """Median ``t0`` over the voxels that produced an estimate."""
    values = [e.t0 for e in estimates if e is not None and np.isfinite(e.t0)]
    if not values:
        raise NoEnhancement("no voxel in the ROI produced an onset estimate")
    return float(np.median(values))
