"""Per-voxel analysis: chain, bands, onset, response fits and the
parametric reference fit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bspline import DEFAULT_DEGREE, DEFAULT_P, make_basis
from .onset import FLAG_NO_ENHANCEMENT, FLAG_OK, NoEnhancement, OnsetEstimate, estimate_onset
from .response_fit import KineticEstimate, LMConfig, fit_reference_model, fit_response_draws
from .sampler import (
    ChainConfig,
    NumericalFailure,
    PosteriorBand,
    PSplineChain,
    PSplineModel,
    posterior_band,
    run_chain,
    voxel_seed,
)
from .signal_core import AifParams, CtcRecord, KineticParams, aif_eval

FLAG_FIT_FAILURE = "FitFailure"


@dataclass(frozen=True)
class AnalysisConfig:
    p: int = DEFAULT_P
    degree: int = DEFAULT_DEGREE
    iterations: int = 6000
    burn_in: int = 2000
    thinning: int = 2
    seed: int = 0
    ci: float = 0.95
    onset_ci: float = 0.99
    lm: LMConfig = LMConfig()

    def chain_config(self, voxel_id: str) -> ChainConfig:
        return ChainConfig(self.iterations, self.burn_in, self.thinning, voxel_seed(self.seed, voxel_id))


@dataclass
class VoxelResult:
    record: CtcRecord
    flags: list
    onset: OnsetEstimate | None = None
    semi: KineticEstimate | None = None
    param: KineticParams | None = None
    param_converged: bool = False
    ssr_semi: float = float("nan")
    ssr_param: float = float("nan")
    fit_t0: float = 0.0
    band: PosteriorBand | None = None
    chain: PSplineChain | None = field(default=None, repr=False)
    model: PSplineModel | None = field(default=None, repr=False)

    @property
    def voxel_id(self) -> str:
        return self.record.voxel_id

    @property
    def flag(self) -> str:
        return ";".join(self.flags) if self.flags else FLAG_OK


def fit_semi(result: VoxelResult, t0: float, config: AnalysisConfig) -> None:
    """(Re)run the response-model fits of ``result`` with onset ``t0`` minutes."""
    model = result.model
    # the response grid starts at 0, so an onset before it is fitted at 0
    result.fit_t0 = max(float(t0), 0.0)
    result.semi = fit_response_draws(result.chain, model.basis, model.record.grid, result.fit_t0, config.lm)
    result.flags = [f for f in result.flags if f != FLAG_FIT_FAILURE]
    if not result.semi.valid:
        result.flags.append(FLAG_FIT_FAILURE)


def analyze_voxel(record: CtcRecord, config: AnalysisConfig = AnalysisConfig(),
                  aif: AifParams = AifParams(), keep_chain: bool = True) -> VoxelResult:
    """Full pipeline for one voxel. Failures are recorded as flags."""
    grid = record.grid
    result = VoxelResult(record=record, flags=[])
    basis = make_basis(0.0, float(grid.t[-1]), config.p, config.degree)
    model = PSplineModel.from_record(record, aif_eval(aif, grid.t), basis)
    result.model = model
    try:
        chain = run_chain(model, config.chain_config(record.voxel_id))
    except NumericalFailure:
        result.flags.append(FLAG_FIT_FAILURE)
        return result
    result.chain = chain
    result.band = posterior_band(chain, model, config.ci)
    result.ssr_semi = float(np.sum((result.band.ctc.median - record.values) ** 2))

    try:
        result.onset = estimate_onset(chain, model, config.onset_ci)
        if result.onset.flag != FLAG_OK:
            result.flags.append(result.onset.flag)
        t0 = result.onset.t0
    except NoEnhancement:
        result.flags.append(FLAG_NO_ENHANCEMENT)
        t0 = 0.0

    fit_semi(result, t0, config)
    kp, ssr, ok = fit_reference_model(record, aif, result.fit_t0, config.lm)
    result.param, result.ssr_param, result.param_converged = kp, float(ssr), bool(ok)
    if not ok and FLAG_FIT_FAILURE not in result.flags:
        result.flags.append(FLAG_FIT_FAILURE)
    if not keep_chain:
        result.chain = None
        result.model = None
    return result
