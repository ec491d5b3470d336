"""Synthetic concentration curves with known kinetics.

Curves come from closed-form generators: the extended Tofts model
(``"tofts"``) or the biexponential AIF convolved with the
plateau/exponential response model (``"aath"``). Lag shifts the tissue
curve relative to the AIF; Gaussian noise is added last.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .response_fit import ResponseModelParams
from .signal_core import (
    AifParams,
    CtcRecord,
    DomainError,
    KineticParams,
    TimeGrid,
    aif_eval,
    exp_conv_biexp,
    extended_tofts_eval,
)

DEFAULT_NOISE_SD = 0.05
DEFAULT_DURATION_S = 400.0
GENERATORS = ("tofts", "aath")


@dataclass(frozen=True)
class SimExperiment:
    """Physiological inputs in min^-1 (``Fp``, ``PS``) and volume fractions."""

    Fp: float
    vp: float
    PS: float
    ve: float
    noise_sd: float = DEFAULT_NOISE_SD
    lag: float = 0.0  # seconds
    rate: float = 1.0  # Hz
    name: str = ""

    def __post_init__(self):
        if min(self.Fp, self.vp, self.PS, self.ve, self.noise_sd, self.lag) < 0:
            raise DomainError("experiment parameters must be non-negative")
        if not self.rate > 0:
            raise DomainError("sampling rate must be positive")

    def with_(self, **changes) -> "SimExperiment":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DerivedKinetics:
    ktrans: float
    kep: float
    E: float
    Tc: float


def derive_kinetics(exp: SimExperiment) -> DerivedKinetics:
    """Extraction fraction ``E = 1 - exp(-PS/Fp)`` and the derived rates."""
    if not exp.Fp > 0:
        raise DomainError("Fp must be positive")
    E = -math.expm1(-exp.PS / exp.Fp)
    ktrans = E * exp.Fp
    kep = ktrans / exp.ve if exp.ve > 0 else math.inf
    Tc = exp.vp / ktrans if ktrans > 0 else math.inf
    return DerivedKinetics(ktrans=ktrans, kep=kep, E=E, Tc=Tc)


BASELINE = SimExperiment(Fp=0.57, vp=0.06, PS=0.33, ve=0.45, name="exp01")


def experiment_bank() -> list[SimExperiment]:
    """Baseline followed by the four Fp, four vp and four PS variants."""
    bank = [BASELINE]
    for i, fp in enumerate((0.17, 0.37, 0.77, 0.97)):
        bank.append(BASELINE.with_(Fp=fp, name=f"exp{i + 2:02d}"))
    for i, vp in enumerate((1e-4, 0.03, 0.09, 0.12)):
        bank.append(BASELINE.with_(vp=vp, name=f"exp{i + 6:02d}"))
    for i, ps in enumerate((0.01, 0.17, 0.49, 0.65)):
        bank.append(BASELINE.with_(PS=ps, name=f"exp{i + 10:02d}"))
    return bank


def tofts_params(exp: SimExperiment) -> KineticParams:
    kin = derive_kinetics(exp)
    return KineticParams(ktrans=kin.ktrans, kep=kin.kep, vp=exp.vp)


def response_params(exp: SimExperiment, t0: float = 0.0) -> ResponseModelParams:
    kin = derive_kinetics(exp)
    return ResponseModelParams(Fp=exp.Fp, E=kin.E, ve=exp.ve, Tc=kin.Tc, t0=t0)


def aath_ctc(params: ResponseModelParams, aif: AifParams, t):
    """Closed-form AIF convolved with the response model, for ``t >= t0``
    (zero before)."""
    t = np.asarray(t, dtype=float)
    u = t - params.t0
    out = np.zeros_like(t)
    on = u >= 0
    u = u[on]
    w = np.minimum(u, params.Tc)
    # plateau: Fp * int_0^w C_p(u - s) ds
    plateau = np.zeros_like(u)
    for a, m in zip(aif.amplitudes, aif.rates):
        plateau += a * (np.exp(-m * (u - w)) - np.exp(-m * u)) / m
    plateau *= aif.dose_D * params.Fp
    # tail: Fp E * int_Tc^u C_p(u - s) exp(-(s - Tc) k) ds
    k = params.E * params.Fp / params.ve
    rest = np.maximum(u - params.Tc, 0.0)
    tail = params.Fp * params.E * exp_conv_biexp(aif, k, rest)
    out[on] = plateau + tail
    return out


def sim_grid(rate: float, duration_s: float = DEFAULT_DURATION_S, refine: int = 4) -> TimeGrid:
    """Observation grid ``0, 1/rate, ...`` (seconds) below ``duration_s``, in minutes."""
    n = int(math.floor(duration_s * rate + 1e-9))
    tau_s = np.arange(n) / rate
    return TimeGrid.from_observations(tau_s / 60.0, refine=refine)


def noiseless_curve(exp: SimExperiment, tau, generator: str = "tofts", aif: AifParams = AifParams()):
    """Generating curve at ``tau`` minutes, delayed by ``exp.lag`` seconds."""
    tau = np.asarray(tau, dtype=float)
    lag = exp.lag / 60.0
    if generator == "tofts":
        u = tau - lag
        out = np.zeros_like(tau)
        on = u >= 0
        out[on] = extended_tofts_eval(tofts_params(exp), aif, u[on])
        return out
    if generator == "aath":
        return aath_ctc(response_params(exp, t0=lag), aif, tau)
    raise DomainError(f"unknown generator {generator!r}; choose from {GENERATORS}")


def simulate_ctc(exp: SimExperiment, grid: TimeGrid | None = None, seed: int = 0,
                 generator: str = "tofts", aif: AifParams = AifParams(),
                 voxel_id: str | None = None) -> CtcRecord:
    """Noisy synthetic curve; noise from a PCG64 stream seeded with ``seed``."""
    grid = grid if grid is not None else sim_grid(exp.rate)
    clean = noiseless_curve(exp, grid.tau, generator, aif)
    rng = np.random.Generator(np.random.PCG64(seed))
    values = clean + exp.noise_sd * rng.standard_normal(clean.size) if exp.noise_sd > 0 else clean
    return CtcRecord(
        voxel_id=voxel_id or exp.name or "sim",
        grid=grid,
        values=values,
        meta={"generator": generator, "seed": seed, **exp.as_dict()},
    )


def downsample(ctc: CtcRecord, factor: int, refine: int | None = None) -> CtcRecord:
    """Keep every ``factor``-th sample starting at index 0."""
    if factor < 1:
        raise DomainError("factor must be >= 1")
    if factor == 1:
        return ctc
    tau = ctc.grid.tau[::factor]
    if refine is None:
        # keep the response spacing as a fraction of the new sampling interval
        old = float(np.median(np.diff(ctc.grid.tau))) if ctc.grid.n > 1 else ctc.grid.dt
        refine = max(1, int(round(old / ctc.grid.dt)))
    if tau.size > 1:
        grid = TimeGrid.from_observations(tau, refine=refine)
    else:
        grid = TimeGrid.from_observations(tau, dt=ctc.grid.dt)
    return CtcRecord(
        voxel_id=ctc.voxel_id,
        grid=grid,
        values=ctc.values[::factor],
        units=ctc.units,
        row=ctc.row,
        col=ctc.col,
        meta=dict(ctc.meta, downsample=factor),
    )
