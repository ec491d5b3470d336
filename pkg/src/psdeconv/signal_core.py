"""Domain types, the population AIF, the extended Tofts model and the
discrete convolution operator.

All times are in minutes. Conversion from seconds happens at the I/O
boundary (see :mod:`psdeconv.io`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this separation the (kep - m_i) denominator is replaced by its limit.
DEGENERATE_RATE_TOL = 1e-8


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class DimensionError(ValueError):
    """Array shapes do not agree with the time grid."""


@dataclass(frozen=True)
class TimeGrid:
    """Observation times ``tau`` paired with a uniform response grid ``t``.

    ``t`` starts at zero with spacing ``dt`` and covers ``[0, max(tau)]``.
    """

    tau: np.ndarray
    t: np.ndarray
    dt: float

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "t", t)
        if tau.ndim != 1 or tau.size == 0:
            raise DimensionError("tau must be a non-empty 1-d sequence")
        if np.any(tau < 0) or np.any(t < 0):
            raise DomainError("times must be non-negative")
        if tau.size > 1 and np.any(np.diff(tau) <= 0):
            raise DomainError("tau must be strictly increasing")
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if t.size < 1 or t[0] != 0.0:
            raise DomainError("response grid must start at 0")
        if t.size > 1 and not np.allclose(np.diff(t), self.dt, rtol=1e-9, atol=1e-12):
            raise DomainError("response grid must be uniform with spacing dt")
        if t[-1] < tau[-1] - 1e-9 * max(1.0, tau[-1]):
            raise DomainError("response grid must cover [0, max(tau)]")

    @classmethod
    def from_observations(cls, tau, refine: int = 4, dt: float | None = None) -> "TimeGrid":
        """Build the response grid with spacing ``median(diff(tau)) / refine``."""
        tau = np.asarray(tau, dtype=float)
        if dt is None:
            if refine < 1:
                raise DomainError("refine must be >= 1")
            if tau.size < 2:
                raise DimensionError("need at least two observations to infer dt")
            dt = float(np.median(np.diff(tau))) / refine
        n_t = int(np.ceil(tau[-1] / dt - 1e-9)) + 1
        t = dt * np.arange(n_t)
        return cls(tau=tau, t=t, dt=float(dt))

    @property
    def n(self) -> int:
        return self.tau.size

    @property
    def T(self) -> int:
        return self.t.size

    def last_index_before(self) -> np.ndarray:
        """For each ``tau_i`` the largest response-grid index ``j`` with ``t_j <= tau_i``."""
        slack = 1e-9 * self.dt
        return np.searchsorted(self.t, self.tau + slack, side="right") - 1


@dataclass(frozen=True)
class AifParams:
    """Biexponential arterial input function ``D * sum a_i exp(-m_i t)``."""

    dose_D: float = 0.1
    a1: float = 24.0
    a2: float = 6.2
    m1: float = 3.00
    m2: float = 0.016

    def __post_init__(self):
        if min(self.dose_D, self.a1, self.a2, self.m1, self.m2) <= 0:
            raise DomainError("AIF parameters must be positive")
        if self.m1 == self.m2:
            raise DomainError("AIF decay rates must differ")

    @property
    def amplitudes(self) -> tuple[float, float]:
        return (self.a1, self.a2)

    @property
    def rates(self) -> tuple[float, float]:
        return (self.m1, self.m2)


@dataclass(frozen=True)
class KineticParams:
    ktrans: float
    kep: float
    vp: float

    def __post_init__(self):
        if self.ktrans < 0:
            raise DomainError("ktrans must be >= 0")
        if not self.kep > 0:
            raise DomainError("kep must be > 0")
        if not 0 <= self.vp <= 1:
            raise DomainError("vp must lie in [0, 1]")

    @property
    def ve(self) -> float:
        return self.ktrans / self.kep


@dataclass
class CtcRecord:
    """One voxel's concentration series (mmol/l) sampled at ``grid.tau``."""

    voxel_id: str
    grid: TimeGrid
    values: np.ndarray
    units: str = "mmol/l"
    row: int | None = None
    col: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.tau.shape:
            raise DimensionError(
                f"voxel {self.voxel_id}: {self.values.size} values for {self.grid.n} times"
            )
        if not np.all(np.isfinite(self.values)):
            raise DomainError(f"voxel {self.voxel_id}: non-finite concentration")

    @property
    def sampling_rate_hz(self) -> float:
        if self.grid.n < 2:
            return float("nan")
        return 1.0 / (60.0 * float(np.median(np.diff(self.grid.tau))))


@dataclass(frozen=True)
class ConvolutionOperator:
    """Causal rectangle-rule convolution matrix mapping a response on ``grid.t``
    to concentrations on ``grid.tau``."""

    entries: np.ndarray
    grid: TimeGrid

    def __matmul__(self, other):
        return self.entries @ other

    @property
    def shape(self):
        return self.entries.shape


def _check_nonnegative_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("time must be non-negative")
    return t


def aif_eval(params: AifParams, t):
    """Evaluate the biexponential AIF at ``t`` minutes."""
    t = _check_nonnegative_time(t)
    return params.dose_D * (params.a1 * np.exp(-params.m1 * t) + params.a2 * np.exp(-params.m2 * t))


def exp_conv_biexp(aif: AifParams, k: float, t):
    """``sum_i a_i (exp(-m_i t) - exp(-k t)) / (k - m_i)``, times the dose.

    This is the analytic convolution of the AIF with ``exp(-k t)``; the
    ``k == m_i`` case uses the limit ``t exp(-m_i t)``.
    """
    t = np.asarray(t, dtype=float)
    total = np.zeros_like(t)
    for a, m in zip(aif.amplitudes, aif.rates):
        if abs(k - m) < DEGENERATE_RATE_TOL:
            total = total + a * t * np.exp(-m * t)
        else:
            total = total + a * (np.exp(-m * t) - np.exp(-k * t)) / (k - m)
    return aif.dose_D * total


def extended_tofts_eval(kp: KineticParams, aif: AifParams, t):
    """Closed-form extended Tofts--Kermode concentration at ``t`` minutes."""
    t = _check_nonnegative_time(t)
    if not kp.kep > 0:
        raise DomainError("kep must be > 0")
    return kp.vp * aif_eval(aif, t) + kp.ktrans * exp_conv_biexp(aif, kp.kep, t)


def build_convolution_operator(aif_samples, grid: TimeGrid) -> ConvolutionOperator:
    """Assemble ``A`` with ``A[i, j] = C_p(t[n_i - j]) * dt`` for ``j <= n_i``.

    ``n_i`` is the last response-grid index not after ``tau_i``; when
    ``tau_i`` lies on the grid this is exactly ``C_p(tau_i - t_j) dt``.
    """
    cp = np.asarray(aif_samples, dtype=float)
    if cp.shape != (grid.T,):
        raise DimensionError(f"expected {grid.T} AIF samples, got {cp.shape}")
    last = grid.last_index_before()
    j = np.arange(grid.T)
    lag = last[:, None] - j[None, :]
    causal = lag >= 0
    entries = np.where(causal, cp[np.clip(lag, 0, None)], 0.0) * grid.dt
    return ConvolutionOperator(entries=entries, grid=grid)
