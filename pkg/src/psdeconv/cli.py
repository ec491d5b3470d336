"""Command-line front end: ``simulate``, ``analyze`` and ``score``.

Exit codes: 0 success, 1 some voxels flagged, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bspline import DEFAULT_DEGREE, DEFAULT_P
from .io import InputFormatError, fmt, read_ctc_csv, read_json, read_table, write_ctc_csv, write_json, write_table
from .onset import roi_onset
from .pipeline import AnalysisConfig, analyze_voxel, fit_semi
from .response_fit import PARAM_NAMES
from .sampler import voxel_seed
from .simulate import (
    DEFAULT_DURATION_S,
    DEFAULT_NOISE_SD,
    GENERATORS,
    derive_kinetics,
    experiment_bank,
    sim_grid,
    simulate_ctc,
)

EXIT_OK, EXIT_PARTIAL, EXIT_ERROR = 0, 1, 2
SEED_ENV = "DCE_SEED"

MAP_COLUMNS = (
    ["voxel_id", "row", "col"]
    + [f"{name}{suffix}" for name in PARAM_NAMES for suffix in ("", "_se", "_q025", "_q975")]
    + ["t0_s", "t_star_s", "fit_t0_s", "ssr_semi", "ssr_param",
       "ktrans_param", "kep_param", "vp_param", "ve_param", "n_failed_draws", "flags"]
)


class CliError(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return args.seed


def _out_dir(path) -> Path:
    out = Path(path)
    if not out.is_dir():
        raise CliError(f"output directory does not exist: {out}")
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _level(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return v


def _lag_tag(lag: float) -> str:
    return f"{int(lag):02d}" if float(lag).is_integer() else fmt(lag).replace(".", "p")


# -- simulate -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    bank = experiment_bank()
    if args.bank == "all":
        chosen = bank
    else:
        idx = args.exp or [1]
        bad = [i for i in idx if not 1 <= i <= len(bank)]
        if bad:
            raise CliError(f"experiment numbers must lie in 1..{len(bank)}, got {bad}")
        chosen = [bank[i - 1] for i in idx]
    seed = _seed(args)
    grid = sim_grid(args.rate, args.duration, args.refine)
    voxels = {}
    for exp in chosen:
        records = []
        for lag in args.lag:
            for rep in range(args.replicates):
                vid = f"{exp.name}-lag{_lag_tag(lag)}"
                if args.replicates > 1:
                    vid += f"-r{rep + 1:02d}"
                e = exp.with_(lag=float(lag), rate=args.rate, noise_sd=args.noise)
                rec = simulate_ctc(e, grid, voxel_seed(seed, vid), args.generator, voxel_id=vid)
                records.append(rec)
                kin = derive_kinetics(e)
                voxels[vid] = {
                    "file": f"{exp.name}.csv",
                    "experiment": exp.name,
                    "Fp": e.Fp, "PS": e.PS, "vp": e.vp, "ve": e.ve,
                    "ktrans": kin.ktrans, "kep": kin.kep, "E": kin.E, "Tc": kin.Tc,
                    "lag_s": e.lag, "t0_s": e.lag,
                    "noise_sd": e.noise_sd, "rate_hz": e.rate,
                }
        write_ctc_csv(out / f"{exp.name}.csv", records)
    write_json(out / "manifest.json", "manifest", {
        "generator": args.generator,
        "seed": seed,
        "rate_hz": args.rate,
        "duration_s": args.duration,
        "units": {"time": "s", "rates": "1/min", "concentration": "mmol/l"},
        "voxels": voxels,
    })
    print(f"wrote {len(chosen)} series files and manifest.json to {out}")
    return EXIT_OK


# -- analyze ------------------------------------------------------------------


def _analyze_one(job):
    record, config, keep = job
    return analyze_voxel(record, config, keep_chain=keep)


def _map_row(res) -> list:
    row = [res.voxel_id, res.record.row, res.record.col]
    for name in PARAM_NAMES:
        if res.semi is not None:
            s = res.semi[name]
            row += [s.median, s.standard_error, s.q025, s.q975]
        else:
            row += [math.nan] * 4
    on = res.onset
    row += [
        on.t0 * 60 if on else math.nan,
        on.t_star * 60 if on else math.nan,
        res.fit_t0 * 60,
        res.ssr_semi,
        res.ssr_param,
    ]
    kp = res.param
    row += [kp.ktrans, kp.kep, kp.vp, kp.ve] if kp else [math.nan] * 4
    row += [res.semi.n_failed_draws if res.semi else 0, res.flag]
    return row


def _write_bands(out: Path, res) -> None:
    band = res.band
    if band is None:
        return
    c = band.ctc
    write_table(out / f"{res.voxel_id}.csv", ["time_s", "observed", "lower", "median", "upper"],
                zip(c.times * 60, res.record.values, c.lower, c.median, c.upper))
    r = band.response
    write_table(out / f"{res.voxel_id}_response.csv", ["time_s", "lower", "median", "upper"],
                zip(r.times * 60, r.lower, r.median, r.upper))


def cmd_analyze(args) -> int:
    out = _out_dir(args.out)
    records = []
    for path in args.input:
        records += read_ctc_csv(path, refine=args.refine)
    if not records:
        raise CliError("no voxels in input")
    ids = [r.voxel_id for r in records]
    dupes = sorted({v for v in ids if ids.count(v) > 1})
    if dupes:
        raise CliError(f"duplicate voxel ids across inputs: {dupes}")
    records.sort(key=lambda r: r.voxel_id)
    config = AnalysisConfig(
        p=args.p, degree=args.degree, iterations=args.iters, burn_in=args.burnin,
        thinning=args.thin, seed=_seed(args), ci=args.ci, onset_ci=args.onset_ci,
    )
    try:
        config.chain_config("check")
    except ValueError as exc:
        raise CliError(str(exc)) from None

    jobs = [(r, config, args.shared_onset) for r in records]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_analyze_one, jobs))
    else:
        results = [_analyze_one(j) for j in jobs]

    onsets = [r.onset for r in results if r.onset is not None]
    roi_t0 = roi_onset(onsets) if onsets else None
    if args.shared_onset and roi_t0 is not None:
        for res in results:
            if res.chain is not None:
                fit_semi(res, roi_t0, config)

    write_table(out / "parameter_map.csv", MAP_COLUMNS, (_map_row(r) for r in results))
    write_table(out / "onset.csv", ["voxel_id", "t_star_s", "t0_s", "gradient", "flag"], (
        [r.voxel_id,
         r.onset.t_star * 60 if r.onset else math.nan,
         r.onset.t0 * 60 if r.onset else math.nan,
         r.onset.gradient_at_t_star if r.onset else math.nan,
         r.flag]
        for r in results
    ))
    bands = out / "bands"
    bands.mkdir(exist_ok=True)
    for res in results:
        _write_bands(bands, res)

    flagged = {}
    for r in results:
        for f in r.flags:
            flagged[f] = flagged.get(f, 0) + 1
    write_json(out / "summary.json", "summary", {
        "version": __version__,
        "n_voxels": len(results),
        "n_flagged": sum(1 for r in results if r.flags),
        "flag_counts": flagged,
        "roi_onset_s": roi_t0 * 60 if roi_t0 is not None else None,
        "shared_onset": bool(args.shared_onset),
        "config": {
            "p": config.p, "degree": config.degree, "iterations": config.iterations,
            "burn_in": config.burn_in, "thinning": config.thinning, "seed": config.seed,
            "ci": config.ci, "onset_ci": config.onset_ci, "refine": args.refine,
        },
        "inputs": [Path(p).name for p in args.input],
    })
    n_bad = sum(1 for r in results if r.flags)
    print(f"analyzed {len(results)} voxels ({n_bad} flagged); outputs in {out}")
    return EXIT_PARTIAL if n_bad else EXIT_OK


# -- score --------------------------------------------------------------------


def _num(text) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def correlation(est, truth) -> float | None:
    """Pearson correlation; a constant pair counts as 1.0 when it matches exactly."""
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    ok = np.isfinite(est) & np.isfinite(truth)
    est, truth = est[ok], truth[ok]
    if est.size == 0:
        return None
    if est.size < 2 or np.ptp(est) == 0 or np.ptp(truth) == 0:
        return 1.0 if np.array_equal(est, truth) else None
    return float(np.corrcoef(est, truth)[0, 1])


def _deviation(est, truth) -> dict:
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    ok = np.isfinite(est) & np.isfinite(truth)
    if not np.any(ok):
        return {"mad": None, "relative_deviation": None, "n": 0}
    diff = np.abs(est[ok] - truth[ok])
    rel = diff[truth[ok] != 0] / np.abs(truth[ok][truth[ok] != 0])
    return {
        "mad": float(np.mean(diff)),
        "relative_deviation": float(np.mean(rel)) if rel.size else None,
        "n": int(ok.sum()),
    }


def _spread(values) -> dict:
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"min": None, "median": None, "max": None}
    return {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max())}


def score(rows: list[dict], truth: dict, threshold: float = 0.99) -> dict:
    by_id = {r["voxel_id"]: r for r in rows}
    missing_map = sorted(set(truth) - set(by_id))
    missing_truth = sorted(set(by_id) - set(truth))
    if missing_map or missing_truth:
        raise CliError(f"voxel mismatch: missing from map {missing_map}; missing from manifest {missing_truth}")
    ids = sorted(by_id)
    get = lambda col: [_num(by_id[v].get(col)) for v in ids]  # noqa: E731
    want = lambda key: [_num(truth[v].get(key)) for v in ids]  # noqa: E731
    report = {"n_voxels": len(ids), "semi": {}, "param": {}}
    for name in ("ktrans", "kep", "vp", "ve"):
        report["semi"][name] = _deviation(get(name), want(name))
        report["param"][name] = _deviation(get(f"{name}_param"), want(name))
    for name in ("Fp", "E", "Tc"):
        report["semi"][name] = _deviation(get(name), want(name))
    t0, lag = np.array(get("t0_s")), np.array(want("t0_s"))
    ok = np.isfinite(t0) & np.isfinite(lag)
    corr = correlation(t0, lag)
    report["onset"] = {
        "correlation": corr,
        "correlation_threshold": threshold,
        "correlation_passes": corr is not None and corr > threshold,
        "max_abs_error_s": float(np.max(np.abs(t0[ok] - lag[ok]))) if ok.any() else None,
        "mad_s": float(np.mean(np.abs(t0[ok] - lag[ok]))) if ok.any() else None,
        "n": int(ok.sum()),
    }
    semi, param = np.array(get("ssr_semi")), np.array(get("ssr_param"))
    both = np.isfinite(semi) & np.isfinite(param)
    report["ssr"] = {
        "semi": _spread(semi),
        "param": _spread(param),
        "fraction_semi_below_param": float(np.mean(semi[both] < param[both])) if both.any() else None,
    }
    return report


def cmd_score(args) -> int:
    rows = read_table(args.map)
    if not rows or "voxel_id" not in rows[0]:
        raise CliError(f"no voxels in parameter map: {args.map}")
    manifest = read_json(args.truth, "manifest")
    report = score(rows, manifest.get("voxels", {}), args.threshold)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(f"output directory does not exist: {out.parent}")
    write_json(out, "score", report)
    print(f"wrote score report for {report['n_voxels']} voxels to {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="psdeconv",
        description="Bayesian P-spline deconvolution of DCE concentration curves.",
        formatter_class=fmt_cls,
        epilog=f"The environment variable {SEED_ENV} overrides --seed.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write synthetic curves and a truth manifest", formatter_class=fmt_cls)
    pick = sim.add_mutually_exclusive_group()
    pick.add_argument("--bank", choices=["all"], help="simulate all 13 experiments")
    pick.add_argument("--exp", type=lambda s: [int(v) for v in s.split(",")],
                      help="comma-separated experiment numbers (1-13); default 1")
    sim.add_argument("--lag", type=_floats, default=[0.0], help="onset lag(s) in seconds, comma-separated")
    sim.add_argument("--rate", type=float, default=1.0, help="sampling rate (Hz)")
    sim.add_argument("--duration", type=float, default=DEFAULT_DURATION_S, help="acquisition length (s)")
    sim.add_argument("--noise", type=float, default=DEFAULT_NOISE_SD, help="noise sd (mmol/l)")
    sim.add_argument("--replicates", type=int, default=1, help="noise replicates per experiment and lag")
    sim.add_argument("--generator", choices=GENERATORS, default="tofts", help="curve generator")
    sim.add_argument("--refine", type=int, default=4, help="response-grid refinement")
    sim.add_argument("--seed", type=int, default=0, help="base seed")
    sim.add_argument("--out", required=True, help="existing output directory")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="deconvolve curves and fit kinetic models", formatter_class=fmt_cls)
    ana.add_argument("--input", nargs="+", required=True, help="series CSV file(s)")
    ana.add_argument("--out", required=True, help="existing output directory")
    ana.add_argument("--p", type=int, default=DEFAULT_P, help="number of B-spline basis functions")
    ana.add_argument("--degree", type=int, default=DEFAULT_DEGREE, help="B-spline degree")
    ana.add_argument("--iters", type=int, default=6000, help="MCMC iterations")
    ana.add_argument("--burnin", type=int, default=2000, help="burn-in iterations")
    ana.add_argument("--thin", type=int, default=2, help="thinning interval")
    ana.add_argument("--seed", type=int, default=0, help="base seed")
    ana.add_argument("--ci", type=_level, default=0.95, help="reported band level")
    ana.add_argument("--onset-ci", type=_level, default=0.99, help="band level for onset detection")
    ana.add_argument("--refine", type=int, default=4, help="response-grid refinement")
    ana.add_argument("--workers", type=int, default=1, help="parallel voxel workers")
    ana.add_argument("--shared-onset", action="store_true", help="refit responses with the ROI median onset")
    ana.set_defaults(func=cmd_analyze)

    sc = sub.add_parser("score", help="compare a parameter map with a truth manifest", formatter_class=fmt_cls)
    sc.add_argument("--map", required=True, help="parameter_map.csv from analyze")
    sc.add_argument("--truth", required=True, help="manifest.json from simulate")
    sc.add_argument("--out", required=True, help="report JSON path")
    sc.add_argument("--threshold", type=float, default=0.99, help="onset correlation threshold")
    sc.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, InputFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except OSError as exc:
        where = f": {exc.filename}" if exc.filename else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
