"""Gibbs sampler for the adaptive Bayesian P-spline deconvolution model.

Model::

    y ~ N(D beta, sigma2 I)
    beta_t - 2 beta_{t-1} + beta_{t-2} ~ N(0, delta2_t),  t = 3..p
    delta2_t ~ IG(a_delta, b_delta),  sigma2 ~ IG(a_sigma, b_sigma)

``beta_1`` and ``beta_2`` carry flat priors. Each sweep draws
``beta -> delta2 -> sigma2`` from their full conditionals.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .bspline import SplineBasis, design_matrix
from .signal_core import ConvolutionOperator, CtcRecord, DomainError, build_convolution_operator

JITTER = 1e-10


class NumericalFailure(RuntimeError):
    """Raised when the beta precision matrix cannot be factorized."""

    def __init__(self, message, state=None, iteration=None):
        super().__init__(message)
        self.state = state
        self.iteration = iteration


@dataclass(frozen=True)
class Prior:
    a_sigma: float = 1.0
    b_sigma: float = 1e-5
    a_delta: float = 1e-5
    b_delta: float = 1e-5

    def __post_init__(self):
        if min(self.a_sigma, self.b_sigma, self.a_delta, self.b_delta) <= 0:
            raise DomainError("hyperparameters must be positive")


@dataclass
class SamplerState:
    beta: np.ndarray
    delta2: np.ndarray
    sigma2: float

    def as_dict(self) -> dict:
        return {
            "beta": np.asarray(self.beta).tolist(),
            "delta2": np.asarray(self.delta2).tolist(),
            "sigma2": float(self.sigma2),
        }


@dataclass
class PSplineModel:
    """Data, design ``D = A B`` and the pieces needed to evaluate draws.

    ``basis_matrix`` is ``B`` evaluated on the response grid; ``operator`` is
    the convolution matrix ``A``. Both may be ``None`` for a bare regression
    model built directly from a design matrix.
    """

    design: np.ndarray
    y: np.ndarray
    prior: Prior = field(default_factory=Prior)
    basis: SplineBasis | None = None
    basis_matrix: np.ndarray | None = None
    operator: ConvolutionOperator | None = None
    aif_samples: np.ndarray | None = None
    record: CtcRecord | None = None

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.design.ndim != 2 or self.design.shape[0] != self.y.size:
            raise DomainError("design rows must match the number of observations")
        if self.design.shape[1] < 3:
            raise DomainError("need at least 3 coefficients for a second-order penalty")
        self.gram = self.design.T @ self.design
        self.dty = self.design.T @ self.y
        # bandwidth of D'D plus the second-difference band of R
        nz = np.abs(self.gram) > 0
        offsets = np.abs(np.subtract.outer(np.arange(self.p), np.arange(self.p)))
        self.bandwidth = int(max(2, offsets[nz].max(initial=0)))
        self.gram_banded = _upper_banded(self.gram, self.bandwidth)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @classmethod
    def from_record(cls, record: CtcRecord, aif_samples, basis: SplineBasis, prior=None):
        grid = record.grid
        A = build_convolution_operator(aif_samples, grid)
        B = design_matrix(basis, grid.t)
        return cls(
            design=A.entries @ B,
            y=record.values,
            prior=prior or Prior(),
            basis=basis,
            basis_matrix=B,
            operator=A,
            aif_samples=np.asarray(aif_samples, dtype=float),
            record=record,
        )


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 6000
    burn_in: int = 2000
    thinning: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise DomainError("need iterations > burn_in >= 0")
        if self.thinning < 1:
            raise DomainError("thinning must be >= 1")

    @property
    def n_stored(self) -> int:
        return -(-(self.iterations - self.burn_in) // self.thinning)


@dataclass
class PSplineChain:
    """Post-burn-in, thinned draws stored as stacked arrays."""

    beta: np.ndarray
    delta2: np.ndarray
    sigma2: np.ndarray
    config: ChainConfig
    iterations_kept: np.ndarray

    def __len__(self):
        return self.sigma2.size

    def state(self, i: int) -> SamplerState:
        return SamplerState(self.beta[i].copy(), self.delta2[i].copy(), float(self.sigma2[i]))

    def fitted(self, model: PSplineModel) -> np.ndarray:
        """Per-draw fitted concentration ``D beta``, shape (draws, n)."""
        return self.beta @ model.design.T

    def response(self, model: PSplineModel) -> np.ndarray:
        """Per-draw response ``B beta`` on the response grid, shape (draws, T)."""
        if model.basis_matrix is None:
            raise DomainError("model has no response-grid basis")
        return self.beta @ model.basis_matrix.T

    def to_json(self, beta_indices=None) -> str:
        idx = list(range(self.beta.shape[1])) if beta_indices is None else list(beta_indices)
        rows = [
            {
                "iteration": int(it),
                "sigma2": float(s2),
                "beta": {str(j): float(b[j]) for j in idx},
            }
            for it, s2, b in zip(self.iterations_kept, self.sigma2, self.beta)
        ]
        return json.dumps({"schema": "psdeconv.chain/1", "config": asdict(self.config), "draws": rows})

    def to_csv(self, beta_indices=None) -> str:
        idx = list(range(self.beta.shape[1])) if beta_indices is None else list(beta_indices)
        header = ["iteration", "sigma2"] + [f"beta_{j}" for j in idx]
        lines = [",".join(header)]
        for it, s2, b in zip(self.iterations_kept, self.sigma2, self.beta):
            lines.append(",".join([str(int(it)), repr(float(s2))] + [repr(float(b[j])) for j in idx]))
        return "\n".join(lines) + "\n"


def second_difference(p: int) -> np.ndarray:
    """``(p-2, p)`` matrix mapping beta to ``beta_t - 2 beta_{t-1} + beta_{t-2}``."""
    if p < 3:
        raise DomainError("second differences need p >= 3")
    d = np.zeros((p - 2, p))
    idx = np.arange(p - 2)
    d[idx, idx] = 1.0
    d[idx, idx + 1] = -2.0
    d[idx, idx + 2] = 1.0
    return d


def prior_precision(delta2, p: int | None = None) -> np.ndarray:
    """Dense ``R = Delta2' diag(1/delta2) Delta2`` (symmetric, bandwidth 2, rank p-2)."""
    delta2 = np.asarray(delta2, dtype=float)
    p = delta2.size + 2 if p is None else p
    if delta2.size != p - 2:
        raise DomainError(f"expected {p - 2} local variances, got {delta2.size}")
    w = 1.0 / delta2
    R = np.zeros((p, p))
    coef = (1.0, -2.0, 1.0)
    for a in range(3):
        for b in range(3):
            R[np.arange(p - 2) + a, np.arange(p - 2) + b] += coef[a] * coef[b] * w
    return R


def _upper_banded(Q: np.ndarray, u: int) -> np.ndarray:
    # LAPACK upper storage: ab[u + i - j, j] = Q[i, j]
    p = Q.shape[0]
    ab = np.zeros((u + 1, p))
    for k in range(u + 1):
        ab[u - k, k:] = np.diagonal(Q, k)
    return ab


def _prior_banded(delta2: np.ndarray, p: int, u: int) -> np.ndarray:
    # R in upper banded storage without forming the dense matrix
    w = 1.0 / delta2
    coef = (1.0, -2.0, 1.0)
    ab = np.zeros((u + 1, p))
    for k in range(3):
        for a in range(3 - k):
            # R[t + a, t + a + k] += c_a c_{a+k} w_t
            ab[u - k, a + k : a + k + p - 2] += coef[a] * coef[a + k] * w
    return ab


def _factor_banded(ab: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky_banded(ab, lower=False, check_finite=False)
    except linalg.LinAlgError:
        ab = ab.copy()
        ab[-1] += JITTER * max(1.0, float(np.max(ab[-1])))
        return linalg.cholesky_banded(ab, lower=False, check_finite=False)


def _banded_factor(Q: np.ndarray, u: int) -> np.ndarray:
    return _factor_banded(_upper_banded(Q, u))


def _beta_factor(state: SamplerState, model: PSplineModel) -> np.ndarray:
    delta2 = np.asarray(state.delta2, dtype=float)
    if delta2.size != model.p - 2:
        raise DomainError(f"expected {model.p - 2} local variances, got {delta2.size}")
    ab = model.gram_banded / state.sigma2 + _prior_banded(delta2, model.p, model.bandwidth)
    if not np.all(np.isfinite(ab)):
        raise NumericalFailure("beta precision has non-finite entries", state=state.as_dict())
    try:
        return _factor_banded(ab)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(
            f"beta precision not positive definite: {exc}", state=state.as_dict()
        ) from exc


def conditional_mean(state: SamplerState, model: PSplineModel) -> np.ndarray:
    """Mean ``Q^-1 D'y / sigma2`` of the beta full conditional."""
    U = _beta_factor(state, model)
    return linalg.cho_solve_banded((U, False), model.dty / state.sigma2, check_finite=False)


def sample_beta(state: SamplerState, model: PSplineModel, rng: np.random.Generator,
                size: int | None = None) -> np.ndarray:
    """Draw beta from ``N(Q^-1 D'y / sigma2, Q^-1)``, ``Q = D'D / sigma2 + R``.

    Uses the banded Cholesky factor ``Q = U'U``: the mean comes from two
    triangular solves and the perturbation from ``U^-1 z``. With ``size``
    the factor is reused for that many independent draws, shape
    ``(size, p)``.
    """
    U = _beta_factor(state, model)
    mean = linalg.cho_solve_banded((U, False), model.dty / state.sigma2, check_finite=False)
    if size is None:
        z = rng.standard_normal(model.p)
        return mean + linalg.solve_banded((0, model.bandwidth), U, z, check_finite=False)
    z = rng.standard_normal((size, model.p))
    return mean + linalg.solve_banded((0, model.bandwidth), U, z.T, check_finite=False).T


def sample_delta2(beta, prior: Prior, rng: np.random.Generator) -> np.ndarray:
    """Independent ``IG(a + 1/2, b + d_t^2 / 2)`` draws, ``d_t`` the second differences."""
    beta = np.asarray(beta, dtype=float)
    if beta.size < 3:
        raise DomainError("p must be >= 3")
    d = beta[2:] - 2.0 * beta[1:-1] + beta[:-2]
    shape = prior.a_delta + 0.5
    rate = prior.b_delta + 0.5 * d * d
    return rate / rng.standard_gamma(shape, size=d.size)


def sample_sigma2(beta, model: PSplineModel, rng: np.random.Generator) -> float:
    """``IG(a + n/2, b + ||y - D beta||^2 / 2)`` draw."""
    resid = model.y - model.design @ np.asarray(beta, dtype=float)
    shape = model.prior.a_sigma + 0.5 * model.n
    rate = model.prior.b_sigma + 0.5 * float(resid @ resid)
    return rate / float(rng.standard_gamma(shape))


def initial_state(model: PSplineModel) -> SamplerState:
    spread = float(np.var(model.y)) if model.n > 1 else 1.0
    return SamplerState(
        beta=np.zeros(model.p),
        delta2=np.ones(model.p - 2),
        sigma2=max(spread, 1e-4),
    )


def run_chain(model: PSplineModel, config: ChainConfig = ChainConfig(), init: SamplerState | None = None) -> PSplineChain:
    """Run the Gibbs sampler; deterministic given ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    state = init or initial_state(model)
    m = config.n_stored
    betas = np.empty((m, model.p))
    deltas = np.empty((m, model.p - 2))
    sigmas = np.empty(m)
    kept = np.empty(m, dtype=int)
    slot = 0
    for it in range(config.iterations):
        try:
            state.beta = sample_beta(state, model, rng)
        except NumericalFailure as exc:
            exc.iteration = it
            raise NumericalFailure(f"iteration {it}: {exc}", state=exc.state, iteration=it) from exc
        state.delta2 = sample_delta2(state.beta, model.prior, rng)
        state.sigma2 = sample_sigma2(state.beta, model, rng)
        if it >= config.burn_in and (it - config.burn_in) % config.thinning == 0:
            betas[slot] = state.beta
            deltas[slot] = state.delta2
            sigmas[slot] = state.sigma2
            kept[slot] = it
            slot += 1
    return PSplineChain(beta=betas, delta2=deltas, sigma2=sigmas, config=config, iterations_kept=kept)


@dataclass
class Band:
    times: np.ndarray
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    level: float


@dataclass
class PosteriorBand:
    ctc: Band
    response: Band | None


def _band(samples: np.ndarray, times, level: float) -> Band:
    lo, med, hi = np.quantile(samples, [(1 - level) / 2, 0.5, (1 + level) / 2], axis=0)
    return Band(times=np.asarray(times), lower=lo, median=med, upper=hi, level=level)


def posterior_band(chain: PSplineChain, model: PSplineModel, level: float = 0.95) -> PosteriorBand:
    """Pointwise empirical quantile bands of ``D beta`` (per tau) and ``B beta`` (per t)."""
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    if len(chain) == 0:
        raise DomainError("empty chain")
    grid = model.record.grid if model.record is not None else None
    tau = grid.tau if grid is not None else np.arange(model.n)
    ctc = _band(chain.fitted(model), tau, level)
    response = None
    if model.basis_matrix is not None:
        t = grid.t if grid is not None else np.arange(model.basis_matrix.shape[0])
        response = _band(chain.response(model), t, level)
    return PosteriorBand(ctc=ctc, response=response)


def voxel_seed(base_seed: int, voxel_id: str) -> int:
    """Stable per-voxel seed derived from the batch seed and the voxel id."""
    digest = hashlib.sha256(f"{int(base_seed)}:{voxel_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
