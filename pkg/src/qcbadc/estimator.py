"""Digital estimation: FIR banks, Wiener synthesis, filtering and decimation,
signal/noise transfer shapes, reference filter design and LMS calibration."""

from dataclasses import dataclass, field
import json
import math
import warnings

import numpy as np
from numba import njit
from scipy.signal import oaconvolve

from .numerics import design_fir, hann_centered
from .system import output_response

BANK_FORMAT_VERSION = 1

# the paper's reference-filter point specification, relative to f_s = 2**31
H0_SPEC_671MHZ = (
    (671e6, 0.0), (671e6 - 134e6, -3.0), (671e6 + 134e6, -3.0),
    (671e6 - 141e6, -20.0), (671e6 + 141e6, -20.0), (0.0, -np.inf), (1074e6, -np.inf),
)


class LmsDiverged(RuntimeError):
    def __init__(self, iteration, mse):
        super().__init__(f"LMS diverged near iteration {iteration} (window MSE {mse:.3g})")
        self.iteration = int(iteration)
        self.mse = mse


class BankQualityWarning(UserWarning):
    pass


@dataclass
class FirFilterBank:
    """Per-control-channel FIR taps, shape ``(M, n_out, L)``.

    ``n_out`` is 1 for a real (low-pass) estimate and 2 for a quadrature
    estimate, whose channels are the real and imaginary parts. Tap ``j`` acts
    on ``s[k - j + lag]`` with ``lag = L // 2``.
    """

    taps: np.ndarray
    T_s: float
    osr: int
    labels: tuple = ()
    n_reference: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=float)
        if self.taps.ndim != 3 or self.taps.shape[1] not in (1, 2):
            raise ValueError("taps must have shape (M, n_out in {1, 2}, L)")

    @property
    def M(self):
        return self.taps.shape[0]

    @property
    def n_out(self):
        return self.taps.shape[1]

    @property
    def L(self):
        return self.taps.shape[2]

    @property
    def lag(self):
        return self.L // 2

    @property
    def is_complex(self):
        return self.n_out == 2

    def complex_taps(self):
        if self.is_complex:
            return self.taps[:, 0] + 1j * self.taps[:, 1]
        return self.taps[:, 0].astype(complex)

    @classmethod
    def from_complex(cls, h, T_s, osr, complex_output, **kw):
        h = np.asarray(h)
        taps = np.stack([h.real, h.imag], axis=1) if complex_output else h.real[:, None, :]
        return cls(taps, T_s, osr, **kw)

    def response(self, freqs):
        """Complex frequency response of every channel, shape ``(M, len(freqs))``."""
        L = self.L
        t = np.arange(L) - self.lag
        E = np.exp(-2j * np.pi * np.outer(np.asarray(freqs, dtype=float) * self.T_s, t))
        return self.complex_taps() @ E.T

    def header(self):
        return {"version": BANK_FORMAT_VERSION, "M": self.M, "n_out": self.n_out, "L": self.L,
                "lag": self.lag, "T_s": self.T_s, "osr": self.osr, "labels": list(self.labels),
                "n_reference": self.n_reference, "meta": self.meta}

    def to_bytes(self):
        body = np.ascontiguousarray(self.taps, dtype="<f8").tobytes()
        return (json.dumps(self.header()) + "\n").encode() + body

    @classmethod
    def from_bytes(cls, blob):
        nl = blob.index(b"\n")
        h = json.loads(blob[:nl].decode())
        if h.get("version") != BANK_FORMAT_VERSION:
            raise ValueError("unsupported bank version")
        taps = np.frombuffer(blob[nl + 1:], dtype="<f8").reshape(h["M"], h["n_out"], h["L"])
        return cls(taps.copy(), h["T_s"], h["osr"], tuple(h["labels"]), h["n_reference"], h["meta"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def band_edge(model, omega_B):
    """Angular frequency where the Wiener regularization is anchored."""
    return model.omega_n + omega_B if model.is_quadrature else omega_B


def eta_squared(model, omega_B):
    G_u, _ = output_response(model, [band_edge(model, omega_B)], nudge=1e-9 * omega_B)
    return float(np.abs(G_u[0]) ** 2)


def dac_pulse(omega, T_s, tau_dc=0.0):
    """Laplace transform of the NRZ pulse on ``[tau, tau + T_s)`` at ``s = i omega``."""
    omega = np.asarray(omega, dtype=float)
    s = 1j * omega
    small = np.abs(omega * T_s) < 1e-6
    safe = np.where(small, 1.0, s)
    val = np.exp(-s * tau_dc) * (1.0 - np.exp(-s * T_s)) / safe
    series = np.exp(-s * tau_dc) * T_s * (1.0 - s * T_s / 2.0)
    return np.where(small, series, val)


def analytic_prior(omegas, omega_B):
    """Signal prior for an analytic (positive-frequency) input: 1 for
    ``omega >= 0``, 0 below ``-omega_B / 2``, raised cosine in between."""
    w = np.asarray(omegas, dtype=float)
    x = np.clip(w / (0.5 * omega_B) + 1.0, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * x)


def wiener_response(model, omega_B, omegas, tau_dc=0.0, aliases=2, eta2=None, prior=None):
    """Sampled-filter spectra ``H_l`` at ``omegas`` (rad/s), shape ``(len, m_s)``.

    ``H_l = -(1/T_s) sum_{|a|<=aliases} [G~ G_{s_l} Theta_DAC](i(omega + a omega_s))``
    with ``G~ = conj(G_u) / (|G_u|^2 + eta^2)``.

    ``prior="analytic"`` weights ``G~`` by :func:`analytic_prior`. It only
    matters for a quadrature system without its rotational symmetry: there
    the modes mirrored about 0 respond to the input, ``|G_u|`` near
    ``-omega_n`` exceeds ``eta`` and the plain filter passes that band, which
    carries the conjugate image of the input and aliases onto the signal band
    after decimation.
    """
    if prior not in (None, "analytic"):
        raise ValueError(f"unknown prior {prior!r}")
    T = model.design.T_s
    ws = 2.0 * np.pi / T
    if eta2 is None:
        eta2 = eta_squared(model, omega_B)
    omegas = np.asarray(omegas, dtype=float)
    H = np.zeros((omegas.size, model.Gamma_ctrl.shape[1]), dtype=complex)
    for a in range(-aliases, aliases + 1):
        w = omegas + a * ws
        G_u, G_s = output_response(model, w, nudge=1e-9 * omega_B)
        Gt = np.conj(G_u) / (np.abs(G_u) ** 2 + eta2)
        if prior == "analytic":
            Gt = Gt * analytic_prior(w, omega_B)
        H += (Gt * dac_pulse(w, T, tau_dc))[:, None] * G_s
    return -H / T


def wiener_filter_bank(model, omega_B, L, osr, tau_dc=0.0, aliases=2, window=True, prior=None):
    """FIR bank by frequency sampling of the Wiener-filtered control spectra.

    The spectra are sampled on an ``L``-point grid over one clock-rate period,
    transformed, centered on tap ``L // 2`` and Hann windowed.
    """
    if L < 8 or L & (L - 1):
        raise ValueError("L must be a power of two >= 8")
    T = model.design.T_s
    m = np.arange(L) - L // 2
    omegas = 2.0 * np.pi * m / (L * T)
    H = wiener_response(model, omega_B, omegas, tau_dc, aliases, prior=prior)
    # place frequency index m at FFT slot m mod L, then read lags -L/2..L/2-1
    spec = np.zeros((L, H.shape[1]), dtype=complex)
    spec[m % L] = H
    h = np.fft.ifft(spec, axis=0)
    taps = h[(np.arange(L) - L // 2) % L].T
    if window:
        taps = taps * hann_centered(L)
    meta = {"kind": "wiener", "aliases": aliases, "omega_B": omega_B, "tau_dc": tau_dc,
            "eta2": eta_squared(model, omega_B), "prior": prior}
    return FirFilterBank.from_complex(taps, T, osr, model.is_quadrature,
                                      labels=tuple(model.control_labels),
                                      n_reference=model.n_reference, meta=meta)


@dataclass(frozen=True)
class Estimate:
    values: np.ndarray  # complex for quadrature
    indices: np.ndarray  # clock index k of every value
    rate: float

    def __len__(self):
        return self.values.size


def _check_trace_bank(trace, bank):
    if trace.M != bank.M:
        raise ValueError(f"trace has {trace.M} channels, bank has {bank.M}")
    if trace.K < 2 * bank.lag + 1:
        raise ValueError("trace shorter than 2 * lag")


def filter_full_rate(trace, bank, channels=None):
    """``sum_l (h_l * s_l)[k]`` for every ``k`` with a full tap support."""
    _check_trace_bank(trace, bank)
    s = trace.decisions(np.float64)
    h = bank.complex_taps() if bank.is_complex else bank.taps[:, 0]
    L, lag, K = bank.L, bank.lag, trace.K
    acc = None
    for ch in (range(bank.M) if channels is None else channels):
        if not np.any(h[ch]):
            continue
        y = oaconvolve(s[:, ch], h[ch])
        acc = y if acc is None else acc + y
    k = np.arange(lag, K - lag + 1) if L % 2 else np.arange(lag, K - lag)
    # full-convolution index of output k is k + lag
    if acc is None:
        vals = np.zeros(k.size, dtype=complex if bank.is_complex else float)
    else:
        vals = acc[k + lag]
    return k, vals


def estimate(trace, bank, decimate=None):
    """Filter a control trace with a bank and keep every ``decimate``-th sample.

    ``decimate`` defaults to the bank's OSR. Samples within ``lag`` of either
    trace end are dropped.
    """
    q = bank.osr if decimate is None else int(decimate)
    k, vals = filter_full_rate(trace, bank)
    keep = (k % q) == 0
    return Estimate(vals[keep], k[keep], 1.0 / (bank.T_s * q))


@dataclass(frozen=True)
class SpectralShapes:
    freqs: np.ndarray
    stf_db: np.ndarray
    ntf_db: np.ndarray


def stf_ntf(model, omega_B, freqs):
    """|STF| and |NTF| in dB on a grid of frequencies (Hz)."""
    freqs = np.asarray(freqs, dtype=float)
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("grid must be strictly increasing")
    eta2 = eta_squared(model, omega_B)
    G_u, _ = output_response(model, 2.0 * np.pi * freqs)
    den = np.abs(G_u) ** 2 + eta2
    return SpectralShapes(freqs, 20.0 * np.log10(np.abs(G_u) ** 2 / den),
                          20.0 * np.log10(np.abs(G_u) / den))


def reference_filter_h0(band, L, sample_rate, **kw):
    """Reference filter taps from a point amplitude specification.

    Returns complex taps for a band centered off zero, real taps otherwise.
    For a quadrature reference pair the same ``h0`` acts on ``s0 + i sbar0``.
    """
    return design_fir(band, L, sample_rate, **kw)


def h0_spec_for(model, omega_B):
    """Scale the 671 MHz point specification to a model's notch and bandwidth.

    Offsets are expressed in units of the band half-width, so the paper's
    design (f_B = 134.2 MHz) is reproduced exactly for its own parameters.
    """
    f_B = omega_B / (2.0 * math.pi)
    f_n = model.omega_n / (2.0 * math.pi)
    f_s = model.design.f_s
    scale = f_B / 134217728.0
    pts = [(f_n, 0.0), (f_n - 134e6 * scale, -3.0), (f_n + 134e6 * scale, -3.0),
           (f_n - 141e6 * scale, -20.0), (f_n + 141e6 * scale, -20.0)]
    if model.is_quadrature:
        pts += [(f_n - 671e6 * scale, -np.inf), (f_n + 403e6 * scale, -np.inf)]
    else:
        pts = [(0.0, 0.0), (134e6 * scale, -3.0), (141e6 * scale, -20.0),
               (403e6 * scale, -np.inf)]
    return [(f % f_s if model.is_quadrature else f, g) for f, g in pts]


def reference_signal(trace, h0, complex_ref):
    """``(h0 * s0)[k]`` at full rate (``h0`` acting on ``s0 + i sbar0`` for a pair)."""
    s = trace.decisions(np.float64)
    if trace.n_reference < 1:
        raise ValueError("trace has no reference channel")
    src = s[:, 0] + 1j * s[:, 1] if (complex_ref and trace.n_reference == 2) else s[:, 0]
    return oaconvolve(src, np.asarray(h0))


@njit(cache=True, nogil=True)
def _lms_generic(S, ref, H, mu, k_lo, k_hi, iterations, lag, window, start):
    M, n_out, L = H.shape
    span = k_hi - k_lo
    k = k_lo + start % span
    wsum = 0.0
    prev = -1.0
    last = 0.0
    for it in range(iterations):
        base = k + lag
        for o in range(n_out):
            e = ref[k, o]
            for ch in range(M):
                for j in range(L):
                    e += H[ch, o, j] * S[ch, base - j]
            wsum += e * e
            g = mu * e
            for ch in range(M):
                for j in range(L):
                    H[ch, o, j] -= g * S[ch, base - j]
        k += 1
        if k >= k_hi:
            k = k_lo
        if (it + 1) % window == 0:
            cur = wsum / window
            if not cur < 1e300 or (prev > 0.0 and cur > 10.0 * prev):
                return it + 1, cur
            prev = cur
            last = cur
            wsum = 0.0
    return -1, last


@njit(cache=True, nogil=True)
def _lms_sign_select(S, ref, H, mu, k_lo, k_hi, iterations, lag, window, start):
    # +-1 inputs: both the error and the update need only additions
    M, n_out, L = H.shape
    span = k_hi - k_lo
    k = k_lo + start % span
    wsum = 0.0
    prev = -1.0
    last = 0.0
    for it in range(iterations):
        base = k + lag
        for o in range(n_out):
            e = ref[k, o]
            for ch in range(M):
                for j in range(L):
                    if S[ch, base - j] > 0:
                        e += H[ch, o, j]
                    else:
                        e -= H[ch, o, j]
            wsum += e * e
            g = mu * e
            for ch in range(M):
                for j in range(L):
                    if S[ch, base - j] > 0:
                        H[ch, o, j] -= g
                    else:
                        H[ch, o, j] += g
        k += 1
        if k >= k_hi:
            k = k_lo
        if (it + 1) % window == 0:
            cur = wsum / window
            if not cur < 1e300 or (prev > 0.0 and cur > 10.0 * prev):
                return it + 1, cur
            prev = cur
            last = cur
            wsum = 0.0
    return -1, last


@dataclass
class CalibrationResult:
    bank: FirFilterBank
    mse: float
    iterations: int


def _calibration_inputs(trace, h0, complex_out):
    n_ref = trace.n_reference
    if n_ref < 1:
        raise ValueError("calibration needs a trace with a reference channel")
    h0 = np.asarray(h0)
    L = h0.size
    lag = L // 2
    r = reference_signal(trace, h0, complex_out)
    K = trace.K
    # full-convolution index of output k is k + lag
    ref = r[lag:lag + K]
    ref2 = np.stack([ref.real, ref.imag], axis=1) if complex_out else ref.real[:, None]
    s = trace.decisions(np.float64)[:, n_ref:]
    S = np.ascontiguousarray(s.T)
    return S, np.ascontiguousarray(ref2), L, lag


def lms_calibrate(trace, h0, step, iterations, complex_output, osr=1,
                  multiplication_free=True, window=1 << 16, start=0, init=None):
    """Adapt ``h_1..h_M`` to cancel the reference-filtered sequence.

    Minimizes the energy of ``e[k] = sum_l (h_l * s_l)[k] + (h0 * s0)[k]`` by
    stochastic gradient steps ``h_l[m] -= step * e[k] * s_l[k - m]``, cycling
    over the trace interior. The bank starts at zero, or at the adaptive
    channels of ``init`` (a bank from an earlier, coarser run); ``h0`` is never
    changed and is returned as channel 0 (and ``i h0`` as the quadrature
    reference channel). Raises :class:`LmsDiverged` if the windowed MSE grows
    tenfold between consecutive windows or stops being finite.
    """
    S, ref, L, lag = _calibration_inputs(trace, h0, complex_output)
    n_out = ref.shape[1]
    M = S.shape[0]
    if init is None:
        H = np.zeros((M, n_out, L))
    else:
        # reference channels come first, one per reference decision stream
        H = np.array(init.taps[trace.n_reference:], dtype=float)
        if H.shape != (M, n_out, L):
            raise ValueError(f"init bank has adaptive taps {H.shape}, expected {(M, n_out, L)}")
    k_lo, k_hi = L - 1 - lag, trace.K - lag
    if k_hi <= k_lo:
        raise ValueError("trace too short for the filter length")
    mse = None
    if iterations > 0:
        fn = _lms_sign_select if multiplication_free else _lms_generic
        bad, last = fn(S, ref, H, float(step), k_lo, k_hi, int(iterations), lag,
                       int(window), int(start))
        if bad >= 0:
            raise LmsDiverged(bad, last)
        if iterations >= window:
            mse = last
    bank = _assemble_bank(trace, h0, H, complex_output, osr, {"kind": "lms", "step": step,
                                                              "iterations": int(iterations)})
    if mse is None:
        _, e = calibration_error(trace, bank)
        mse = float(np.mean(np.abs(e) ** 2))
    return CalibrationResult(bank, float(mse), int(iterations))


def _assemble_bank(trace, h0, H, complex_output, osr, meta):
    h0 = np.asarray(h0)
    L = H.shape[2]
    refs = []
    if complex_output:
        h0c = h0.astype(complex)
        refs.append(np.stack([h0c.real, h0c.imag]))
        if trace.n_reference == 2:
            ih = 1j * h0c
            refs.append(np.stack([ih.real, ih.imag]))
    else:
        refs.append(np.real(h0)[None, :])
    taps = np.concatenate([np.array(refs).reshape(len(refs), H.shape[1], L), H], axis=0)
    return FirFilterBank(taps, trace.T_s, osr, labels=tuple(trace.labels),
                         n_reference=trace.n_reference, meta=meta)


def calibration_error(trace, bank):
    """Full-rate error ``e[k]`` of a calibrated bank (reference channels included)."""
    return filter_full_rate(trace, bank)


def least_squares_calibrate(trace, h0, complex_output, osr=1, ridge=0.0):
    """Direct minimizer of the same objective via the normal equations.

    Builds the correlation matrix from the trace interior, so memory grows as
    ``(M L)^2``; meant for small instances and as an LMS oracle.
    """
    S, ref, L, lag = _calibration_inputs(trace, h0, complex_output)
    M = S.shape[0]
    k_lo, k_hi = L - 1 - lag, trace.K - lag
    ks = np.arange(k_lo, k_hi)
    cols = []
    for ch in range(M):
        for j in range(L):
            cols.append(S[ch, ks + lag - j])
    X = np.array(cols).T
    R = X.T @ X
    if ridge:
        R = R + ridge * np.trace(R) / R.shape[0] * np.eye(R.shape[0])
    H = np.empty((M, ref.shape[1], L))
    for o in range(ref.shape[1]):
        sol = np.linalg.solve(R, -(X.T @ ref[ks, o]))
        H[:, o, :] = sol.reshape(M, L)
    return _assemble_bank(trace, h0, H, complex_output, osr, {"kind": "least_squares"})


def warn_if_poor(residual, threshold=1e-3):
    if residual > threshold:
        warnings.warn(f"decomposition residual {residual:.2e} exceeds {threshold:.0e}; "
                      "consider more taps", BankQualityWarning, stacklevel=2)
