"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``PASS``/``FAIL`` line (bypassing capture) before
asserting, so ``pytest -v`` shows the outcome and the measured numbers.
"""
import time

import numpy as np
import pytest

from psdeconv.bspline import derivative_coeffs, design_matrix, make_basis
from psdeconv.cli import main
from psdeconv.pipeline import AnalysisConfig, analyze_voxel
from psdeconv.response_fit import fit_reference_model, fit_response_draws
from psdeconv.sampler import (
    PSplineModel,
    SamplerState,
    prior_precision,
    run_chain,
    sample_beta,
    sample_delta2,
    sample_sigma2,
    posterior_band,
    Prior,
    voxel_seed,
)
from psdeconv.signal_core import AifParams, KineticParams, TimeGrid, aif_eval, build_convolution_operator, extended_tofts_eval
from psdeconv.simulate import BASELINE, derive_kinetics, experiment_bank, simulate_ctc

AIF = AifParams()
KTRANS = derive_kinetics(BASELINE).ktrans
RATE = 1 / 8
LAGS = [0, 4, 8, 12, 16, 20, 24, 28, 30]
REPLICATES = 4
REFERENCE_KTRANS = [0.251, 0.146, 0.218, 0.268, 0.280, 0.233, 0.233, 0.233, 0.233, 0.010, 0.147, 0.323, 0.388]


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, detail

    return emit


# -- 1 ------------------------------------------------------------------------


def conjugacy_checks(n=100_000):
    rng = np.random.default_rng(2024)
    out = {}
    # beta | rest ~ N(Q^-1 D'y / s2, Q^-1), Q = D'D / s2 + R(delta2); orthonormal D
    p, s2 = 6, 0.7
    D, _ = np.linalg.qr(rng.normal(size=(40, p)))
    y = rng.normal(size=40)
    delta2 = rng.uniform(0.5, 2.0, p - 2)
    model = PSplineModel(design=D, y=y)
    state = SamplerState(np.zeros(p), delta2, s2)
    cov = np.linalg.inv(D.T @ D / s2 + prior_precision(delta2))
    mean = cov @ D.T @ y / s2
    draws = sample_beta(state, model, rng, size=n)
    z_mean = np.abs(draws.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / n)
    var = draws.var(axis=0, ddof=1)
    # var of the sample variance of a normal: 2 sigma^4 / (n - 1)
    z_var = np.abs(var - np.diag(cov)) / (np.diag(cov) * np.sqrt(2 / (n - 1)))
    out["beta"] = max(z_mean.max(), z_var.max())

    # 1/delta2_t | beta ~ Gamma(a + 1/2, b + d_t^2 / 2), d_t constant
    prior = Prior()
    d = 0.3
    j = np.arange(n + 2, dtype=float)
    prec = 1 / sample_delta2(0.5 * d * j * (j - 1), prior, rng)
    a, b = prior.a_delta + 0.5, prior.b_delta + 0.5 * d * d
    out["delta2"] = abs(prec.mean() - a / b) / np.sqrt(a / b**2 / n)

    # sigma2 | beta ~ IG(a + n_obs / 2, b + SSR / 2)
    n_obs, ssr = 60, 3.0
    yy = np.zeros(n_obs)
    yy[0] = np.sqrt(ssr)
    m = PSplineModel(design=np.zeros((n_obs, 3)), y=yy)
    s = np.array([sample_sigma2(np.zeros(3), m, rng) for _ in range(n)])
    a, b = prior.a_sigma + n_obs / 2, prior.b_sigma + ssr / 2
    mu, v = b / (a - 1), b**2 / ((a - 1) ** 2 * (a - 2))
    out["sigma2"] = abs(s.mean() - mu) / np.sqrt(v / n)
    return out


def test_criterion_1_conjugacy(report):
    t = time.perf_counter()
    z = conjugacy_checks()
    elapsed = time.perf_counter() - t
    ok = max(z.values()) < 3 and elapsed < 10
    report(1, ok, ", ".join(f"{k} max|z|={v:.2f}" for k, v in z.items()) + f"; {elapsed:.1f} s")


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_deconvolution_fidelity(report):
    rec = simulate_ctc(BASELINE.with_(noise_sd=0.0, rate=RATE))
    t = time.perf_counter()
    config = AnalysisConfig()
    grid = rec.grid
    model = PSplineModel.from_record(rec, aif_eval(AIF, grid.t), make_basis(0, grid.t[-1], config.p, config.degree))
    chain = run_chain(model, config.chain_config(rec.voxel_id))
    ssr = float(np.sum((posterior_band(chain, model).ctc.median - rec.values) ** 2))
    k = fit_response_draws(chain, model.basis, grid, 0.0)["ktrans"].median
    elapsed = time.perf_counter() - t
    rel = abs(k - 0.251) / 0.251
    ok = ssr < 1e-3 and rel < 0.10 and elapsed < 30
    report(2, ok, f"SSR={ssr:.2e}, ktrans={k:.4f} ({rel:.1%} from 0.251), {elapsed:.1f} s")


# -- 3 ------------------------------------------------------------------------


def ssr_ordering(noise, n=20):
    below = 0
    for rep in range(n):
        exp = BASELINE.with_(rate=RATE, noise_sd=noise)
        rec = simulate_ctc(exp, seed=voxel_seed(3, f"r{rep}"), generator="aath", voxel_id=f"r{rep:02d}")
        res = analyze_voxel(rec, keep_chain=False)
        below += res.ssr_semi < res.ssr_param
    return below / n


def test_criterion_3_ssr_ordering(report):
    assert derive_kinetics(BASELINE).Tc > 0
    frac = ssr_ordering(0.05)
    context = ssr_ordering(0.02)
    report(3, frac >= 0.9, f"semi < param in {frac:.0%} of 20 replicates at noise 0.05 ({context:.0%} at 0.02)")


# -- 4 and 5 share one lag sweep ------------------------------------------------


def lag_sweep(generator, replicates):
    rows = []
    t = time.perf_counter()
    for lag in LAGS:
        for rep in range(replicates):
            exp = BASELINE.with_(lag=float(lag), rate=RATE, noise_sd=0.05)
            vid = f"lag{lag:02d}-r{rep}"
            rec = simulate_ctc(exp, seed=voxel_seed(11, vid), generator=generator, voxel_id=vid)
            res = analyze_voxel(rec)
            t0 = res.onset.t0 * 60 if res.onset else np.nan
            no_onset = fit_response_draws(res.chain, res.model.basis, rec.grid, 0.0)["ktrans"].median
            rows.append((lag, rep, t0, res.semi["ktrans"].median, no_onset))
    return np.array(rows), time.perf_counter() - t


@pytest.fixture(scope="module")
def sweep():
    return {"tofts": lag_sweep("tofts", REPLICATES)}


def onset_metrics(rows):
    lag, t0 = rows[:, 0], rows[:, 2]
    corr = float(np.corrcoef(lag, t0)[0, 1])
    err = float(np.max(np.abs(t0 - lag)))
    return corr, err


def mad_by_lag(rows, col):
    return np.array([np.mean(np.abs(rows[rows[:, 0] == lag, col] - KTRANS)) for lag in LAGS])


def test_criterion_4_onset_recovery(report, sweep):
    rows, elapsed = sweep["tofts"]
    corr, err = onset_metrics(rows)
    ok = corr > 0.99 and err <= 3.0 and elapsed < 300
    aath_rows, _ = lag_sweep("aath", 2)
    a_corr, a_err = onset_metrics(aath_rows)
    report(4, ok, f"corr={corr:.4f}, max|err|={err:.2f} s over {rows.shape[0]} voxels, sweep {elapsed:.0f} s "
                  f"(aath generator: corr={a_corr:.4f}, max|err|={a_err:.2f} s)")


def test_criterion_5_onset_aware_stability(report, sweep):
    rows, _ = sweep["tofts"]
    with_onset, without = mad_by_lag(rows, 3), mad_by_lag(rows, 4)
    beyond = np.array(LAGS) > 1 / RATE
    ratio_on = with_onset / with_onset[0]
    ratio_off = without[beyond] / without[0]
    ok = bool(np.all(ratio_on <= 1.5) and np.all(ratio_off > 3.0))
    report(5, ok, f"with onset max ratio {ratio_on.max():.2f} (limit 1.5); "
                  f"without onset min ratio beyond {1 / RATE:.0f} s {ratio_off.min():.2f} (needs > 3); "
                  f"MAD lag0={with_onset[0]:.4f}")


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_numerics(report):
    t = time.perf_counter()
    rng = np.random.default_rng(6)
    b = make_basis(0, 6.5, p=25)
    beta = rng.normal(size=b.p)
    gamma, db = derivative_coeffs(beta, b)
    x = rng.uniform(0.05, 6.45, 400)
    x = x[np.min(np.abs(x[:, None] - b.knots[None, 4:-4]), axis=1) > 1e-3]
    h = 1e-5
    fd = (design_matrix(b, x + h) @ beta - design_matrix(b, x - h) @ beta) / (2 * h)
    got = design_matrix(db, x) @ gamma
    spline_err = float(np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1e-8 + np.abs(got))))

    kp = KineticParams(0.25, 0.55, 0.0)

    def conv_err(refine):
        g = TimeGrid.from_observations(np.arange(400) / 60.0, refine=refine)
        A = build_convolution_operator(aif_eval(AIF, g.t), g)
        exact = extended_tofts_eval(kp, AIF, g.tau)
        return np.linalg.norm(A @ (kp.ktrans * np.exp(-kp.kep * g.t)) - exact) / np.linalg.norm(exact)

    e4, e8 = conv_err(4), conv_err(8)
    rec = simulate_ctc(experiment_bank()[1].with_(noise_sd=0.0, rate=RATE))
    truth = derive_kinetics(experiment_bank()[1])
    fit, _, _ = fit_reference_model(rec, AIF)
    lm_err = max(abs(fit.ktrans / truth.ktrans - 1), abs(fit.kep / truth.kep - 1), abs(fit.vp / 0.06 - 1))
    elapsed = time.perf_counter() - t
    ok = spline_err < 1e-3 and e4 < 0.01 and abs(e8 / e4 - 0.5) <= 0.05 and lm_err < 1e-4 and elapsed < 10
    report(6, ok, f"spline derivative {spline_err:.1e}; convolution {e4:.2%} (refine 4), ratio {e8 / e4:.3f} "
                  f"(refine 8); LM {lm_err:.1e}; {elapsed:.1f} s")


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_reference_ktrans(report):
    derived = np.array([derive_kinetics(e).ktrans for e in experiment_bank()])
    off = [f"exp{i + 1}: {d:.3f} vs {v:.3f}" for i, (d, v) in enumerate(zip(derived, REFERENCE_KTRANS))
           if abs(d - v) > 0.001 + 1e-12]
    report(7, not off, f"{13 - len(off)}/13 within 0.001" + (f"; mismatches {', '.join(off)}" if off else ""))


# -- 8 ------------------------------------------------------------------------


def cli_run(root, name):
    src, out = root / name / "sim", root / name / "out"
    src.mkdir(parents=True), out.mkdir()
    assert main(["simulate", "--exp", "1,10", "--lag", "0,12", "--rate", "0.125", "--seed", "5",
                 "--out", str(src)]) == 0
    code = main(["analyze", "--input", str(src / "exp01.csv"), str(src / "exp10.csv"), "--out", str(out),
                 "--iters", "2000", "--burnin", "1000", "--seed", "5"])
    assert code in (0, 1)
    return {p.relative_to(root / name): p.read_bytes() for p in (root / name).rglob("*") if p.is_file()}


def test_criterion_8_determinism(report, tmp_path):
    runs = [cli_run(tmp_path, f"run{i}") for i in range(2)]
    same = runs[0].keys() == runs[1].keys() and all(runs[0][k] == runs[1][k] for k in runs[0])
    report(8, same, f"{len(runs[0])} files byte-identical across two runs" if same else "outputs differ")
