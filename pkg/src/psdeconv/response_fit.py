"""Levenberg--Marquardt fitting of kinetic models.

Two fits are provided: the extended Tofts model against a raw
concentration curve (the parametric reference), and the piecewise
plateau/exponential response model against each posterior draw of the
deconvolved response function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bspline import SplineBasis, design_matrix
from .signal_core import (
    AifParams,
    CtcRecord,
    DomainError,
    KineticParams,
    TimeGrid,
    extended_tofts_eval,
)


@dataclass(frozen=True)
class LMConfig:
    max_iter: int = 200
    rtol: float = 1e-8
    lam0: float = 1e-3
    lam_up: float = 10.0
    lam_down: float = 10.0
    lam_max: float = 1e16
    fd_step: float = 1e-6


@dataclass
class LMResult:
    params: np.ndarray
    ssr: float
    converged: bool
    n_iter: int
    ssr_history: list

    def __iter__(self):
        return iter((self.params, self.ssr, self.converged))


@dataclass
class LMBatchResult:
    params: np.ndarray  # (N, k)
    ssr: np.ndarray
    converged: np.ndarray
    n_iter: np.ndarray
    ssr_history: list  # one (N,) snapshot per outer iteration


def _batch_jacobian(model_fn, theta, f0, hi, h_rel, h_min):
    N, k = theta.shape
    J = np.empty((N, f0.shape[1], k))
    for j in range(k):
        h = np.maximum(h_rel * np.maximum(np.abs(theta[:, j]), 1.0), h_min[j])
        # step backwards where the forward point would leave the box
        h = np.where(theta[:, j] + h > hi[j], -h, h)
        step = theta.copy()
        step[:, j] += h
        J[:, :, j] = (model_fn(step) - f0) / h[:, None]
    return J


def _solve_damped(H, diag, lam, g):
    A = H + lam[:, None, None] * (diag[:, :, None] * np.eye(H.shape[1]))
    try:
        return np.linalg.solve(A, g[:, :, None])[:, :, 0], np.ones(len(lam), bool)
    except np.linalg.LinAlgError:
        out = np.zeros_like(g)
        ok = np.ones(len(lam), bool)
        for i in range(len(lam)):
            try:
                out[i] = np.linalg.solve(A[i], g[i])
            except np.linalg.LinAlgError:
                ok[i] = False
        return out, ok


def lm_minimize_batch(model_fn, data, init, bounds=None, config: LMConfig = LMConfig(),
                      min_step=None) -> LMBatchResult:
    """Solve ``N`` independent box-constrained least-squares problems at once.

    ``model_fn`` maps parameters ``(N, k)`` to predictions ``(N, m)``; row
    ``i`` of ``data`` is fitted by row ``i`` of the parameters. Each problem
    runs the iteration of :func:`lm_minimize` with its own damping factor,
    so results do not depend on which other problems share the batch.
    ``min_step`` sets a per-parameter floor on the finite-difference step,
    for parameters the model only resolves on a grid.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.size == 0:
        raise DomainError("no data to fit")
    theta = np.atleast_2d(np.asarray(init, dtype=float)).copy()
    N, k = theta.shape
    if bounds is None:
        lo, hi = np.full(k, -np.inf), np.full(k, np.inf)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if np.any(theta < lo) or np.any(theta > hi):
        raise DomainError("initial parameters outside bounds")
    h_min = np.zeros(k) if min_step is None else np.asarray(min_step, dtype=float)

    f = model_fn(theta)
    r = data - f
    ssr = np.einsum("nm,nm->n", r, r)
    history = [ssr.copy()]
    lam = np.full(N, config.lam0)
    converged = ssr == 0.0
    active = ~converged & np.isfinite(ssr)
    n_iter = np.zeros(N, dtype=int)
    tiny = np.finfo(float).tiny

    for _ in range(config.max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        n_iter[idx] += 1
        J = _batch_jacobian(model_fn, theta[idx], f[idx], hi, config.fd_step, h_min)
        g = np.einsum("amk,am->ak", J, r[idx])
        H = np.einsum("amk,aml->akl", J, J)
        diag = np.einsum("akk->ak", H).copy()
        diag[diag <= 0] = 1.0
        pending = np.ones(idx.size, bool)
        while np.any(pending):
            p = np.nonzero(pending)[0]
            rows = idx[p]
            delta, solved = _solve_damped(H[p], diag[p], lam[rows], g[p])
            trial = np.clip(theta[rows] + delta, lo, hi)
            f_trial = model_fn(trial)
            r_trial = data[rows] - f_trial
            ssr_trial = np.einsum("nm,nm->n", r_trial, r_trial)
            ok = solved & np.isfinite(ssr_trial) & (ssr_trial <= ssr[rows])

            acc = rows[ok]
            change = (ssr[acc] - ssr_trial[ok]) / np.maximum(ssr[acc], tiny)
            theta[acc], f[acc], r[acc], ssr[acc] = trial[ok], f_trial[ok], r_trial[ok], ssr_trial[ok]
            lam[acc] = np.maximum(lam[acc] / config.lam_down, 1e-12)
            done = (ssr[acc] == 0.0) | (change < config.rtol)
            converged[acc[done]] = True
            active[acc[done]] = False

            rej = rows[~ok]
            lam[rej] *= config.lam_up
            # damping exhausted: keep the best point found so far
            exhausted = lam[rej] > config.lam_max
            active[rej[exhausted]] = False
            pending[p[ok]] = False
            pending[p[~ok][exhausted]] = False
        history.append(ssr.copy())

    return LMBatchResult(theta, ssr, converged, n_iter, history)


def lm_minimize(model_fn, data, init, bounds=None, config: LMConfig = LMConfig()) -> LMResult:
    """Minimize ``||data - model_fn(theta)||^2`` over a box.

    Damped Gauss--Newton with a multiplicative damping schedule (x10 after a
    rejected step, /10 after an accepted one) and a forward-difference
    Jacobian with step ``1e-6 * max(|theta|, 1)``. Trial points are
    projected onto the box. Stops when an accepted step changes the SSR by
    less than ``rtol`` relative, or after ``max_iter`` iterations. Unpacks
    as ``(params, ssr, converged)``.
    """
    res = lm_minimize_batch(
        lambda th: np.stack([np.asarray(model_fn(row), dtype=float) for row in th]),
        np.asarray(data, dtype=float)[None, :],
        np.asarray(init, dtype=float)[None, :],
        bounds,
        config,
    )
    return LMResult(
        params=res.params[0],
        ssr=float(res.ssr[0]),
        converged=bool(res.converged[0]),
        n_iter=int(res.n_iter[0]),
        ssr_history=[float(h[0]) for h in res.ssr_history],
    )


# -- reference parametric model ---------------------------------------------

REF_INIT = (0.2, 0.5, 0.05)
REF_BOUNDS = ((0.0, 1e-3, 0.0), (5.0, 10.0, 1.0))


def shifted_tofts(theta, tau, aif: AifParams, t0: float):
    ktrans, kep, vp = theta
    u = np.asarray(tau, dtype=float) - t0
    out = np.zeros_like(u)
    on = u >= 0
    out[on] = extended_tofts_eval(KineticParams(ktrans, kep, vp), aif, u[on])
    return out


def fit_reference_model(ctc: CtcRecord, aif: AifParams, t0: float = 0.0, config: LMConfig = LMConfig()):
    """Fit the extended Tofts model, delayed by ``t0`` minutes, to a raw curve.

    Returns ``(KineticParams, ssr, converged)``.
    """
    tau = ctc.grid.tau
    res = lm_minimize(lambda th: shifted_tofts(th, tau, aif, t0), ctc.values, REF_INIT, REF_BOUNDS, config)
    ktrans, kep, vp = (float(v) for v in res.params)
    return KineticParams(ktrans, kep, vp), res.ssr, res.converged


# -- response model -----------------------------------------------------------


@dataclass(frozen=True)
class ResponseModelParams:
    Fp: float
    E: float
    ve: float
    Tc: float
    t0: float = 0.0

    @property
    def ktrans(self) -> float:
        return self.E * self.Fp

    @property
    def vp(self) -> float:
        return self.Tc * self.ktrans

    @property
    def kep(self) -> float:
        return self.ktrans / self.ve


def _response_curves(theta, t, t0):
    # theta (N, 4) as (Fp, E, ve, Tc) -> curves (N, len(t))
    Fp, E, ve, Tc = (theta[:, i : i + 1] for i in range(4))
    u = t[None, :] - t0
    tail = u >= Tc
    decay = np.exp(-np.where(tail, u - Tc, 0.0) * (E * Fp / ve))
    return np.where(u < 0, 0.0, np.where(tail, Fp * E * decay, Fp))


def response_model_eval(params: ResponseModelParams, t):
    """Plateau of height ``Fp`` for ``Tc`` after ``t0``, then the exponential
    tail ``Fp E exp(-(t - t0 - Tc) E Fp / ve)``; zero before ``t0``."""
    t = np.asarray(t, dtype=float)
    theta = np.array([[params.Fp, params.E, params.ve, params.Tc]])
    return _response_curves(theta, np.atleast_1d(t).ravel(), params.t0)[0].reshape(t.shape)


# (Fp, E, ve, Tc); the Tc bound is replaced by the fitted window length
RM_LOWER = np.array([1e-4, 1e-6, 1e-3, 0.0])
RM_UPPER = np.array([20.0, 1.0, 1.0, np.inf])


def response_bounds(t, t0: float):
    upper = RM_UPPER.copy()
    upper[3] = max(float(t[-1]) - t0, 0.0)
    return RM_LOWER, upper


def initial_response_params(f, t, t0: float) -> np.ndarray:
    """Moment-style starting values: peak height for ``Fp``, the time the
    curve falls below 70% of its peak for ``Tc``, and a log-linear fit of
    the tail for the decay rate and amplitude."""
    f = np.asarray(f, dtype=float)
    after = t >= t0
    tt, ff = t[after], f[after]
    if tt.size < 4 or not np.any(ff > 0):
        return np.array([0.5, 0.5, 0.3, 0.1])
    i_peak = int(np.argmax(ff))
    fp0 = max(float(ff[i_peak]), 1e-3)
    below = np.nonzero(ff[i_peak:] < 0.7 * fp0)[0]
    tc0 = float(tt[i_peak + below[0]] - t0) if below.size else float(tt[-1] - t0) / 4
    tc0 = max(tc0, 0.0)
    tail = (ff > 1e-3 * fp0) & (tt - t0 >= tc0)
    if np.count_nonzero(tail) >= 3:
        slope, icpt = np.polyfit(tt[tail] - t0 - tc0, np.log(ff[tail]), 1)
        k0 = max(-slope, 1e-3)
        K0 = math.exp(min(icpt, 10.0))
    else:
        k0, K0 = 0.5, 0.5 * fp0
    E0 = min(max(K0 / fp0, 1e-3), 1.0)
    ve0 = min(max(E0 * fp0 / k0, 1e-2), 1.0)
    return np.clip(np.array([fp0, E0, ve0, tc0]), *response_bounds(t, t0))


def fit_response_curves(curves, t, t0: float, config: LMConfig = LMConfig(), init=None) -> LMBatchResult:
    """Batched LM fit of the response model to each row of ``curves``."""
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    t = np.asarray(t, dtype=float)
    if init is None:
        init = np.stack([initial_response_params(f, t, t0) for f in curves])
    # the model moves with Tc only when a grid point changes side, so Tc's
    # difference step is at least one grid spacing
    dt = float(np.median(np.diff(t))) if t.size > 1 else 0.0
    return lm_minimize_batch(
        lambda th: _response_curves(th, t, t0), curves, init, response_bounds(t, t0), config,
        min_step=[0.0, 0.0, 0.0, dt],
    )


def fit_response_curve(f, t, t0: float, config: LMConfig = LMConfig(), init=None):
    """Fit one curve; returns ``(ResponseModelParams, LMResult)``."""
    res = fit_response_curves(f, t, t0, config, None if init is None else np.atleast_2d(init))
    Fp, E, ve, Tc = (float(v) for v in res.params[0])
    single = LMResult(res.params[0], float(res.ssr[0]), bool(res.converged[0]), int(res.n_iter[0]),
                      [float(h[0]) for h in res.ssr_history])
    return ResponseModelParams(Fp, E, ve, Tc, t0), single


@dataclass
class ParamSummary:
    median: float
    standard_error: float
    q025: float
    q975: float


PARAM_NAMES = ("ktrans", "kep", "vp", "ve", "Fp", "E", "Tc")


@dataclass
class KineticEstimate:
    params: dict
    ssr: float
    n_failed_draws: int
    n_draws: int

    @property
    def valid(self) -> bool:
        return self.n_failed_draws <= 0.5 * self.n_draws

    def __getitem__(self, name) -> ParamSummary:
        return self.params[name]


def summarize(values) -> ParamSummary:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        nan = float("nan")
        return ParamSummary(nan, nan, nan, nan)
    lo, med, hi = np.quantile(values, [0.025, 0.5, 0.975])
    se = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return ParamSummary(float(med), se, float(lo), float(hi))


def derived_table(params: np.ndarray) -> np.ndarray:
    """Columns of :data:`PARAM_NAMES` from fitted ``(Fp, E, ve, Tc)`` rows."""
    Fp, E, ve, Tc = params.T
    ktrans = E * Fp
    return np.column_stack([ktrans, ktrans / ve, Tc * ktrans, ve, Fp, E, Tc])


def fit_response_draws(chain, basis: SplineBasis, grid: TimeGrid, t0: float,
                       config: LMConfig = LMConfig()) -> KineticEstimate:
    """Fit the response model to every stored draw of ``B beta`` with ``t0`` fixed.

    Parameters are summarized over the draws whose fit converged to finite
    values. ``ssr`` is the median SSR of those fits.
    """
    if len(chain) == 0:
        raise DomainError("empty chain")
    B = design_matrix(basis, grid.t)
    curves = chain.beta @ B.T
    res = fit_response_curves(curves, grid.t, t0, config)
    table = derived_table(res.params)
    ok = res.converged & np.all(np.isfinite(table), axis=1) & np.isfinite(res.ssr)
    params = {name: summarize(table[ok, i]) for i, name in enumerate(PARAM_NAMES)}
    return KineticEstimate(
        params=params,
        ssr=float(np.median(res.ssr[ok])) if np.any(ok) else float("nan"),
        n_failed_draws=int(np.count_nonzero(~ok)),
        n_draws=int(ok.size),
    )
