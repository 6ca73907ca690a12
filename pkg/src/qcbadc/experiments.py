"""Experiment harness: TOML configs, nominal / Monte Carlo / op-amp sweeps,
calibration runs, CSV artifacts and run manifests."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import csv
import hashlib
import json
import math
import os
import platform
import sys

import numpy as np

from . import __version__
from .analysis import estimate_notch, peak_to_floor_db, psd, snap_to_bin, snr_in_band
from .control import derive_control_params, lowpass_control_params
from .estimator import (
    LmsDiverged, estimate, h0_spec_for, lms_calibrate, reference_filter_h0,
    wiener_filter_bank,
)
from .simulator import InputSpec, SimulationDiverged, inject_reference, simulate
from .system import PerturbationSpec, leapfrog_lowpass, opamp_augment, perturb, quadrature_extend

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

F_S_DEFAULT = 2.0 ** 31


class ConfigError(ValueError):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class ExperimentFailure(RuntimeError):
    def __init__(self, kind, message, outputs=()):
        super().__init__(message)
        self.kind = kind
        self.outputs = list(outputs)


@dataclass(frozen=True)
class MonteCarloSpec:
    trials: int = 64
    relative_bound: float = 0.10
    notch_index: int = 2
    lowpass: bool = True
    analytic_prior: bool = True  # quadrature banks reject the mirror band (see estimator)


@dataclass(frozen=True)
class OpampGrid:
    dc_gain: tuple = (20.0, 1e3, 1e4)  # multiples of OSR/pi
    gbwp: tuple = (6.0, 18.0, 750.0)  # multiples of f_n + f_B/2


@dataclass(frozen=True)
class CalibrationSpec:
    taps: int = 512
    step: float = 1e-4
    iterations: int = 8_000_000
    reference_ratio: float = 0.1
    amplitude: float = 0.9
    train_periods: int = 1 << 20
    notch_fraction: float = 5.0 / 16.0  # f_n / f_s
    multiplication_free: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    order: int = 6
    osr: int = 8
    f_s: float = F_S_DEFAULT
    notches: tuple | None = None  # notch indices k, f_n = k f_s / (2 OSR); None = all
    lowpass_baseline: bool = True
    amplitude: float = 1.0
    estimator: str = "wiener"
    taps: int = 4096
    aliases: int = 2
    nfft: int = 1 << 14
    segments: int = 8
    warmup: int | None = None  # clock periods; default 4 OSR taps
    seed: int = 0
    out: str = "out"
    montecarlo: MonteCarloSpec = field(default_factory=MonteCarloSpec)
    opamp: OpampGrid = field(default_factory=OpampGrid)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)

    def __post_init__(self):
        if self.order < 1 or self.osr < 1:
            raise ConfigError("invalid_config", "order and osr must be >= 1")
        if self.estimator not in ("wiener", "calibrated"):
            raise ConfigError("invalid_config", f"unknown estimator {self.estimator!r}")
        for name in ("taps", "nfft"):
            v = getattr(self, name)
            if v < 8 or v & (v - 1):
                raise ConfigError("invalid_config", f"{name} must be a power of two >= 8")
        if self.segments < 1:
            raise ConfigError("invalid_config", "segments must be >= 1")
        if self.notches is not None:
            bad = [k for k in self.notches if not 0 <= k < self.osr]
            if bad:
                raise ConfigError("invalid_config", f"notch indices {bad} put f_n outside [0, f_s/2)")
        if not 0.0 < self.calibration.notch_fraction < 0.5:
            raise ConfigError("invalid_config", "calibration notch must lie in (0, f_s/2)")
        if self.montecarlo.trials < 1:
            raise ConfigError("invalid_config", "trials must be >= 1")

    @property
    def omega_B(self):
        return math.pi * self.f_s / self.osr

    @property
    def f_B(self):
        return self.f_s / (2.0 * self.osr)

    @property
    def notch_indices(self):
        return tuple(range(self.osr)) if self.notches is None else tuple(self.notches)

    @property
    def warmup_periods(self):
        return 4 * self.osr * self.taps if self.warmup is None else int(self.warmup)

    def to_dict(self):
        d = asdict(self)
        d["notches"] = None if self.notches is None else list(self.notches)
        d["opamp"] = {k: list(v) for k, v in d["opamp"].items()}
        return d

    def digest(self):
        # where the results go does not change what they are
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {
    "design": {"order": "order", "osr": "osr", "f_s": "f_s", "notches": "notches",
               "lowpass_baseline": "lowpass_baseline"},
    "input": {"amplitude": "amplitude"},
    "estimator": {"kind": "estimator", "taps": "taps", "aliases": "aliases"},
    "analysis": {"nfft": "nfft", "segments": "segments", "warmup": "warmup"},
}


def config_from_dict(doc):
    top = {}
    for key in ("name", "seed", "out"):
        if key in doc:
            top[key] = doc[key]
    for section, keys in _SECTIONS.items():
        sub = doc.get(section, {})
        unknown = set(sub) - set(keys)
        if unknown:
            raise ConfigError("invalid_config", f"unknown keys in [{section}]: {sorted(unknown)}")
        for k, attr in keys.items():
            if k in sub:
                top[attr] = sub[k]
    if isinstance(top.get("notches"), list):
        top["notches"] = tuple(int(k) for k in top["notches"])
    elif top.get("notches") == "all":
        top["notches"] = None
    try:
        if "montecarlo" in doc:
            top["montecarlo"] = MonteCarloSpec(**doc["montecarlo"])
        if "opamp" in doc:
            top["opamp"] = OpampGrid(**{k: tuple(float(x) for x in v)
                                        for k, v in doc["opamp"].items()})
        if "calibration" in doc:
            top["calibration"] = CalibrationSpec(**doc["calibration"])
        return ExperimentConfig(**top)
    except TypeError as exc:
        raise ConfigError("invalid_config", str(exc)) from None


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError("config_not_found", f"no such config file: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config_parse_error", f"{path}: {exc}") from None
    return config_from_dict(doc)


# ---------------------------------------------------------------- instances

@dataclass(frozen=True)
class Instance:
    label: str
    model: object
    params: object
    band: tuple
    f_signal: float
    snap_offset: float
    f_n: float | None = None

    def input_spec(self, amplitude):
        kind = "quadrature_tone" if self.model.is_quadrature else "lowpass_tone"
        return InputSpec(kind, amplitude, self.f_signal)


def lowpass_instance(cfg):
    design, lp = leapfrog_lowpass(cfg.order, cfg.osr, cfg.omega_B)
    rate = cfg.f_s / cfg.osr
    f0, off = snap_to_bin(cfg.f_B / 2.0, rate, cfg.nfft)
    return Instance("lowpass", lp, lowpass_control_params(design.beta), (0.0, cfg.f_B), f0, off)


def quadrature_instance(cfg, f_n, label=None):
    design, lp = leapfrog_lowpass(cfg.order, cfg.osr, cfg.omega_B)
    w_n = 2.0 * math.pi * f_n
    params = derive_control_params(design.beta, w_n)
    model = quadrature_extend(lp, w_n, params)
    rate = cfg.f_s / cfg.osr
    f0, off = snap_to_bin(f_n - cfg.f_B / 4.0, rate, cfg.nfft)
    band = (f_n - cfg.f_B, f_n + cfg.f_B)
    return Instance(label or f"notch_{f_n / cfg.f_s:.6g}fs", model, params, band, f0, off, f_n)


def notch_frequency(cfg, k):
    return k * cfg.f_s / (2.0 * cfg.osr)


def measurement_periods(cfg):
    n_dec = cfg.nfft * (cfg.segments + 1) // 2
    return cfg.warmup_periods + n_dec * cfg.osr + 2 * cfg.taps


@dataclass
class Measurement:
    label: str
    stable: bool
    snr_db: float = float("nan")
    peak_to_floor_db: float = float("nan")
    spectrum: object = None
    diverged_at: int = -1


def measure(cfg, inst, bank, model=None, amplitude=None, reference=None):
    """Simulate an instance, apply ``bank`` and measure the in-band SNR."""
    model = inst.model if model is None else model
    K = measurement_periods(cfg)
    amp = cfg.amplitude if amplitude is None else amplitude
    ref = None if reference is None else reference(K)
    trace, err = simulate(model, inst.params, inst.input_spec(amp), K, reference=ref,
                          raise_on_divergence=False)
    if isinstance(err, SimulationDiverged):
        return Measurement(inst.label, False, diverged_at=err.period)
    est = estimate(trace, bank)
    vals = est.values[est.indices >= cfg.warmup_periods]
    if not bank.is_complex:
        vals = vals.real
    spec = psd(vals, cfg.nfft, 1.0, est.rate)
    return Measurement(inst.label, True, snr_in_band(spec, inst.band, inst.f_signal),
                       peak_to_floor_db(spec, inst.band, inst.f_signal), spec)


def _pool_map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- artifacts

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def versions():
    import numba
    import scipy
    return {"qcbadc": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out, cfg, command, outputs, extra=None):
    doc = {"command": command, "config_sha256": cfg.digest(), "config": cfg.to_dict(),
           "seed": cfg.seed, "versions": versions(),
           "outputs": sorted(os.path.basename(p) for p in outputs)}
    if extra:
        doc.update(extra)
    path = os.path.join(out, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------- experiments

def nominal_instances(cfg):
    insts = [lowpass_instance(cfg)] if cfg.lowpass_baseline else []
    for k in cfg.notch_indices:
        insts.append(quadrature_instance(cfg, notch_frequency(cfg, k), label=f"notch_{k}"))
    return insts


def run_nominal(cfg, out=None, threads=1):
    """PSD and SNR per notch position (plus the low-pass baseline).

    Writes ``psd.csv`` (one dBFS column per position on the complex
    decimated grid; the real low-pass spectrum fills bins up to rate/2) and
    ``snr.csv``. Raises :class:`ExperimentFailure` after writing if any
    position was unstable.
    """
    out = cfg.out if out is None else out
    os.makedirs(out, exist_ok=True)
    insts = nominal_instances(cfg)

    def one(inst):
        bank = wiener_filter_bank(inst.model, cfg.omega_B, cfg.taps, cfg.osr, aliases=cfg.aliases)
        return measure(cfg, inst, bank)

    results = _pool_map(one, insts, threads)
    rate = cfg.f_s / cfg.osr
    freqs = np.arange(cfg.nfft) * rate / cfg.nfft
    cols = []
    for res in results:
        col = np.full(cfg.nfft, np.nan)
        if res.stable:
            col[:res.spectrum.psd.size] = res.spectrum.psd
        cols.append(col)
    psd_rows = [[f] + [c[i] for c in cols] for i, f in enumerate(freqs)]
    paths = [write_csv(os.path.join(out, "psd.csv"),
                       ["f"] + [f"psd_dbfs_{r.label}" for r in results], psd_rows)]
    snr_rows = []
    for inst, res in zip(insts, results):
        snr_rows.append([inst.label, inst.model.kind, inst.f_n, inst.f_signal, inst.snap_offset,
                         res.snr_db, res.peak_to_floor_db, res.stable, res.diverged_at])
    paths.append(write_csv(os.path.join(out, "snr.csv"),
                           ["label", "kind", "f_n", "f_signal", "snap_offset", "snr_db",
                            "peak_to_floor_db", "stable", "diverged_at"], snr_rows))
    paths.append(write_manifest(out, cfg, "nominal", paths))
    unstable = [r.label for r in results if not r.stable]
    if unstable:
        raise ExperimentFailure("unstable", f"unstable positions: {unstable}", paths)
    return results, paths


@dataclass
class TrialResult:
    trial: int
    kind: str
    stable: bool
    snr_db: float = float("nan")
    snr_delta_db: float = float("nan")
    peak_to_floor_delta_db: float = float("nan")
    f_hat: float = float("nan")
    notch_ratio: float = float("nan")
    strategy: str = ""
    diverged_at: int = -1


def _mc_bank(cfg, model):
    prior = "analytic" if cfg.montecarlo.analytic_prior and model.is_quadrature else None
    return wiener_filter_bank(model, cfg.omega_B, cfg.taps, cfg.osr, aliases=cfg.aliases, prior=prior)


def _trial(cfg, inst, nominal, idx):
    rng = np.random.default_rng(cfg.seed ^ idx)
    spec = PerturbationSpec(cfg.montecarlo.relative_bound)
    model = perturb(inst.model, spec, rng)
    res = TrialResult(idx, inst.model.kind, False)
    try:
        bank = _mc_bank(cfg, model)
    except np.linalg.LinAlgError:
        return res
    m = measure(cfg, inst, bank, model=model)
    res.stable, res.diverged_at = m.stable, m.diverged_at
    if m.stable:
        res.snr_db = m.snr_db
        res.snr_delta_db = m.snr_db - nominal.snr_db
        res.peak_to_floor_delta_db = m.peak_to_floor_db - nominal.peak_to_floor_db
    if model.is_quadrature:
        try:
            est = estimate_notch(model=model, omega_B=cfg.omega_B)
            res.f_hat, res.strategy = est.f_hat, est.strategy
            res.notch_ratio = est.f_hat / inst.f_n
        except ValueError:
            res.strategy = "none"
    return res


def run_montecarlo(cfg, out=None, threads=1):
    """Mismatch ensemble with filters from the true perturbed model.

    Trial ``i`` draws from ``seed ^ i``; instabilities are recorded, never
    fatal. Writes ``snr_hist.csv``, ``notch_hist.csv`` and
    ``instability.csv``.
    """
    out = cfg.out if out is None else out
    os.makedirs(out, exist_ok=True)
    mc = cfg.montecarlo
    if not 0 < mc.notch_index < cfg.osr:
        raise ConfigError("invalid_config", "Monte Carlo notch index must lie in [1, OSR)")
    insts = [quadrature_instance(cfg, notch_frequency(cfg, mc.notch_index), label="quadrature")]
    if mc.lowpass:
        insts.append(lowpass_instance(cfg))
    results = []
    nominal = {}
    for inst in insts:
        ref = measure(cfg, inst, _mc_bank(cfg, inst.model))
        if not ref.stable:
            raise ExperimentFailure("unstable", f"nominal {inst.label} instance diverged")
        nominal[inst.model.kind] = ref.snr_db
        results += _pool_map(lambda i, inst=inst, ref=ref: _trial(cfg, inst, ref, i),
                             range(mc.trials), threads)
    results.sort(key=lambda r: (r.kind, r.trial))
    paths = [
        write_csv(os.path.join(out, "snr_hist.csv"),
                  ["trial", "kind", "snr_db", "snr_delta_db", "peak_to_floor_delta_db",
                   "notch_ratio", "stable"],
                  [[r.trial, r.kind, r.snr_db, r.snr_delta_db, r.peak_to_floor_delta_db,
                    r.notch_ratio, r.stable] for r in results]),
        write_csv(os.path.join(out, "notch_hist.csv"),
                  ["trial", "f_hat", "notch_ratio", "strategy"],
                  [[r.trial, r.f_hat, r.notch_ratio, r.strategy]
                   for r in results if r.kind == "quadrature"]),
        write_csv(os.path.join(out, "instability.csv"),
                  ["kind", "trials", "unstable", "rate"],
                  [[kind, n, u, u / n] for kind, n, u in _instability_counts(results)]),
    ]
    extra = {"nominal_snr_db": nominal}
    paths.append(write_manifest(out, cfg, "montecarlo", paths, extra))
    return results, paths


def _instability_counts(results):
    kinds = sorted({r.kind for r in results})
    for kind in kinds:
        sel = [r for r in results if r.kind == kind]
        yield kind, len(sel), sum(not r.stable for r in sel)


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationRun:
    dc_gain_multiple: float | None
    gbwp_multiple: float | None
    snr_db: float = float("nan")
    peak_to_floor_db: float = float("nan")
    mse: float = float("nan")
    status: str = "ok"
    bank: object = None


def calibration_instance(cfg):
    cal = cfg.calibration
    f_n = cal.notch_fraction * cfg.f_s
    return quadrature_instance(cfg, f_n, label="calibration")


def calibrate_point(cfg, dc_gain_multiple=None, gbwp_multiple=None):
    """Train on an input-free trace with the reference on, then measure a
    ``calibration.amplitude`` tone. Op-amp parameters are given as multiples
    of OSR/pi (DC gain) and of ``f_n + f_B/2`` (GBWP); ``None`` means ideal."""
    cal = cfg.calibration
    inst = calibration_instance(cfg)
    model, gen = inject_reference(inst.model, cal.reference_ratio, seed=cfg.seed)
    if dc_gain_multiple is not None:
        k_A = dc_gain_multiple * cfg.osr / math.pi
        gbwp = gbwp_multiple * (inst.f_n + cfg.f_B / 2.0)
        model = opamp_augment(model, k_A, 2.0 * math.pi * gbwp / k_A)
    run = CalibrationRun(dc_gain_multiple, gbwp_multiple)
    h0 = reference_filter_h0(h0_spec_for(inst.model, cfg.omega_B), cal.taps, cfg.f_s)
    K = cal.train_periods
    trace, err = simulate(model, inst.params, InputSpec("zero"), K, reference=gen(K),
                          raise_on_divergence=False)
    if isinstance(err, SimulationDiverged):
        run.status = "unstable"
        return run
    try:
        res = lms_calibrate(trace, h0, cal.step, cal.iterations, True, osr=cfg.osr,
                            multiplication_free=cal.multiplication_free)
    except LmsDiverged:
        run.status = "lms_diverged"
        return run
    run.mse, run.bank = res.mse, res.bank
    # the test trace gets a fresh reference sequence, independent of training
    test_gen = inject_reference(inst.model, cal.reference_ratio, seed=cfg.seed + 1)[1]
    m = measure(cfg, inst, res.bank, model=model, amplitude=cal.amplitude, reference=test_gen)
    if not m.stable:
        run.status = "unstable"
        return run
    run.snr_db, run.peak_to_floor_db = m.snr_db, m.peak_to_floor_db
    return run


def wiener_reference_snr(cfg, taps=None):
    """Same-length Wiener bank on the ideal calibration instance."""
    cal = cfg.calibration
    inst = calibration_instance(cfg)
    bank = wiener_filter_bank(inst.model, cfg.omega_B, taps or cal.taps, cfg.osr, aliases=cfg.aliases)
    return measure(replace(cfg, taps=taps or cal.taps), inst, bank, amplitude=cal.amplitude)


def run_calibrate(cfg, out=None):
    """Calibrate the ideal instance; writes ``bank.fir`` and ``calibration.csv``."""
    out = cfg.out if out is None else out
    os.makedirs(out, exist_ok=True)
    short = replace(cfg, taps=cfg.calibration.taps)
    run = calibrate_point(short)
    wiener = wiener_reference_snr(cfg)
    paths = []
    if run.bank is not None:
        path = os.path.join(out, "bank.fir")
        run.bank.save(path)
        paths.append(path)
    paths.append(write_csv(os.path.join(out, "calibration.csv"),
                           ["taps", "step", "iterations", "mse", "snr_calibrated_db",
                            "peak_to_floor_db", "snr_wiener_db", "status"],
                           [[cfg.calibration.taps, cfg.calibration.step, cfg.calibration.iterations,
                             run.mse, run.snr_db, run.peak_to_floor_db, wiener.snr_db, run.status]]))
    paths.append(write_manifest(out, cfg, "calibrate", paths))
    if run.status != "ok":
        raise ExperimentFailure(run.status, f"calibration failed: {run.status}", paths)
    return run, wiener, paths


def run_gbwp_sweep(cfg, out=None, threads=1):
    """Calibrated SNR over the op-amp DC-gain x GBWP grid (``snr_vs_gbwp.csv``)."""
    out = cfg.out if out is None else out
    os.makedirs(out, exist_ok=True)
    grid = [(k, g) for k in cfg.opamp.dc_gain for g in cfg.opamp.gbwp]
    if not grid:
        raise ConfigError("invalid_config", "empty op-amp grid")
    short = replace(cfg, taps=cfg.calibration.taps)
    runs = _pool_map(lambda kg: calibrate_point(short, *kg), grid, threads)
    inst = calibration_instance(cfg)
    rows = [[r.dc_gain_multiple, r.gbwp_multiple, r.dc_gain_multiple * cfg.osr / math.pi,
             r.gbwp_multiple * (inst.f_n + cfg.f_B / 2.0), r.snr_db, r.peak_to_floor_db,
             r.mse, r.status] for r in runs]
    paths = [write_csv(os.path.join(out, "snr_vs_gbwp.csv"),
                       ["dc_gain_osr_over_pi", "gbwp_multiple", "k_A", "gbwp_hz", "snr_db",
                        "peak_to_floor_db", "calibration_mse", "status"], rows)]
    paths.append(write_manifest(out, cfg, "gbwp-sweep", paths))
    return runs, paths
