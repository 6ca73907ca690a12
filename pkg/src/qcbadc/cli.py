"""Command-line entry point: ``qcbadc <subcommand> [options]``.

Exit status is 0 on success, 1 on an experiment-level failure and 2 on a
usage or configuration error. Failures print one JSON error record to
stderr.
"""

from dataclasses import replace
import argparse
import json
import math
import os
import sys

import numpy as np

from .analysis import peak_to_floor_db, psd, snr_in_band
from .control import derive_control_params, verify_stability_conditions
from .estimator import FirFilterBank, estimate
from .experiments import (
    ConfigError, ExperimentConfig, ExperimentFailure, load_config, run_calibrate,
    run_gbwp_sweep, run_montecarlo, run_nominal, write_csv, write_manifest,
)
from .numerics import InfeasibleSpecError, rotation, scaled_rotation
from .simulator import ControlTrace


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(40)


def _error(kind, message, code):
    print(json.dumps({"error": kind, "kind": kind, "message": message}), file=sys.stderr)
    return code


def rotation_identity_residuals(rng, draws=1000):
    """Largest entrywise residual of each rotation identity over random draws."""
    worst = dict.fromkeys(("commutative", "negation", "difference", "integral", "scaled"), 0.0)
    for _ in range(draws):
        a, b = rng.uniform(-2 * math.pi, 2 * math.pi, 2)
        Ra, Rb = rotation(a), rotation(b)
        r = max(np.max(np.abs(Ra @ Rb - rotation(a + b))), np.max(np.abs(Rb @ Ra - rotation(a + b))))
        worst["commutative"] = max(worst["commutative"], r)
        worst["negation"] = max(worst["negation"], np.max(np.abs(-Ra - rotation(a + math.pi))))
        diff = Ra - rotation(-a) - 2.0 * math.sin(a) * rotation(math.pi / 2)
        worst["difference"] = max(worst["difference"], np.max(np.abs(diff)))
        # Gauss-Legendre over [-D, D] against (2/phi) sin(phi D) I
        phi, D = rng.uniform(0.1, 5.0), rng.uniform(0.05, 2.0)
        integral = sum(w * D * rotation(phi * D * t) for t, w in zip(_GL_NODES, _GL_WEIGHTS))
        worst["integral"] = max(worst["integral"],
                                np.max(np.abs(integral - (2 / phi) * math.sin(phi * D) * np.eye(2))))
        x, y = rng.uniform(-3, 3, 2)
        M = np.array([[x, -y], [y, x]])
        radius, angle = scaled_rotation(x, y)
        worst["scaled"] = max(worst["scaled"], np.max(np.abs(M - radius * rotation(angle))))
    return {k: float(v) for k, v in worst.items()}


def control_condition_residuals(rng, draws=1000):
    """Worst stability-condition residuals of derived parameters over random
    (beta, omega_n, phi_kappa, tau) draws with omega_n T_s in (0, 2 pi)."""
    worst = {"norm_match": 0.0, "tilde_norm": 0.0, "tilde_angle": 0.0, "min_slack": math.inf}
    for _ in range(draws):
        beta = 10.0 ** rng.uniform(6, 10)
        T_s = 0.5 / beta
        omega_n = rng.uniform(1e-6, 2 * math.pi - 1e-6) / T_s
        phi = rng.uniform(0, 2 * math.pi)
        tau = rng.uniform(0, 1) * T_s
        p = derive_control_params(beta, omega_n, phi, tau)
        res = verify_stability_conditions(p, beta, omega_n)
        for k in ("norm_match", "tilde_norm", "tilde_angle"):
            worst[k] = max(worst[k], abs(getattr(res, k)))
        worst["min_slack"] = min(worst["min_slack"], res.superposition_slack)
    return worst


def verify_report(seed=0, draws=1000):
    rng = np.random.default_rng(seed)
    worst = control_condition_residuals(rng, draws)
    report = {"control": worst, "rotation": rotation_identity_residuals(rng, draws)}
    ok = (max(worst["norm_match"], worst["tilde_norm"], worst["tilde_angle"]) <= 1e-12
          and worst["min_slack"] == 0.0
          and max(report["rotation"].values()) <= 1e-13)
    report["ok"] = ok
    return report


def build_parser():
    ap = argparse.ArgumentParser(prog="qcbadc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("nominal", "montecarlo", "gbwp-sweep", "calibrate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1)
    p = sub.add_parser("psd", help="PSD and SNR of a stored trace filtered by a stored bank")
    p.add_argument("--trace", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nfft", type=int, default=1 << 14)
    p.add_argument("--band", type=float, nargs=2, metavar=("F_LO", "F_HI"))
    p.add_argument("--signal", type=float, help="tone frequency for the SNR column")
    p.add_argument("--skip", type=int, default=0, help="decimated samples to drop first")
    p = sub.add_parser("verify", help="stability-condition and rotation-identity checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--out")
    return ap


def _psd_command(args):
    for path in (args.trace, args.bank):
        if not os.path.isfile(path):
            return _error("file_not_found", f"no such file: {path}", 2)
    trace = ControlTrace.load(args.trace)
    bank = FirFilterBank.load(args.bank)
    est = estimate(trace, bank)
    vals = est.values[args.skip:]
    spec = psd(vals if bank.is_complex else vals.real, args.nfft, 1.0, est.rate)
    os.makedirs(args.out, exist_ok=True)
    paths = [write_csv(os.path.join(args.out, "psd.csv"), ["f", "psd_dbfs"], zip(spec.freqs, spec.psd))]
    if args.band and args.signal is not None:
        band = tuple(args.band)
        row = [snr_in_band(spec, band, args.signal), peak_to_floor_db(spec, band, args.signal)]
        paths.append(write_csv(os.path.join(args.out, "snr.csv"), ["snr_db", "peak_to_floor_db"], [row]))
        print(f"snr_db={row[0]:.2f} peak_to_floor_db={row[1]:.2f}")
    write_manifest(args.out, ExperimentConfig(nfft=args.nfft), "psd", paths,
                   {"trace": os.path.abspath(args.trace), "bank": os.path.abspath(args.bank)})
    return 0


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "verify":
        report = verify_report(args.seed, args.draws)
        print(json.dumps(report, indent=2))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "verify.json"), "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2)
            write_manifest(args.out, ExperimentConfig(seed=args.seed), "verify", ["verify.json"])
        return 0 if report["ok"] else 1
    if args.command == "psd":
        try:
            return _psd_command(args)
        except ValueError as exc:
            return _error("invalid_input", str(exc), 2)
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.out:
            overrides["out"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = replace(cfg, **overrides)
    except ConfigError as exc:
        return _error(exc.kind, str(exc), 2)
    threads = max(1, args.threads)
    try:
        if args.command == "nominal":
            results, _ = run_nominal(cfg, threads=threads)
            for r in results:
                print(f"{r.label}: snr_db={r.snr_db:.2f} peak_to_floor_db={r.peak_to_floor_db:.2f}")
        elif args.command == "montecarlo":
            results, _ = run_montecarlo(cfg, threads=threads)
            for kind in sorted({r.kind for r in results}):
                sel = [r for r in results if r.kind == kind]
                bad = sum(not r.stable for r in sel)
                print(f"{kind}: {len(sel)} trials, {bad} unstable")
        elif args.command == "gbwp-sweep":
            runs, _ = run_gbwp_sweep(cfg, threads=threads)
            for r in runs:
                print(f"k_DC={r.dc_gain_multiple:g} OSR/pi GBWP x{r.gbwp_multiple:g}: "
                      f"snr_db={r.snr_db:.2f} ({r.status})")
        elif args.command == "calibrate":
            run, wiener, _ = run_calibrate(cfg)
            print(f"calibrated snr_db={run.snr_db:.2f} wiener snr_db={wiener.snr_db:.2f}")
    except ExperimentFailure as exc:
        return _error(exc.kind, str(exc), 1)
    except ConfigError as exc:
        return _error(exc.kind, str(exc), 2)
    except InfeasibleSpecError as exc:
        return _error("infeasible_filter", str(exc), 2)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _error("experiment_error", f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
