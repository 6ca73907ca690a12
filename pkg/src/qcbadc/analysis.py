"""Spectral analysis: Welch PSD in dBFS, in-band SNR, notch estimation and
test-tone bin snapping."""

from dataclasses import dataclass
import math

import numpy as np
from scipy.signal import medfilt, welch

from .estimator import stf_ntf
from .system import output_response


@dataclass(frozen=True)
class Spectrum:
    freqs: np.ndarray
    psd: np.ndarray  # dBFS per bin
    nfft: int
    rate: float
    window: str = "hann"
    full_scale: float = 1.0
    is_complex: bool = False

    @property
    def power(self):
        return 10.0 ** (self.psd / 10.0)

    @property
    def bin_width(self):
        return self.rate / self.nfft


def psd(x, nfft=1 << 14, full_scale=1.0, rate=1.0):
    """Welch-averaged power spectrum normalized so a full-scale,
    bin-centered tone peaks at 0 dBFS.

    Hann window, 50% overlap. Real input gives ``nfft // 2 + 1`` bins on
    ``[0, rate/2]``; complex input gives ``nfft`` bins on ``[0, rate)``.
    """
    x = np.asarray(x)
    if nfft < 8 or nfft & (nfft - 1):
        raise ValueError("nfft must be a power of two >= 8")
    if x.size < nfft:
        raise ValueError(f"sequence of {x.size} samples is shorter than nfft={nfft}")
    cplx = np.iscomplexobj(x)
    f, p = welch(x, fs=rate, window="hann", nperseg=nfft, noverlap=nfft // 2,
                 detrend=False, return_onesided=not cplx, scaling="spectrum")
    if cplx:
        order = np.argsort(np.mod(f, rate))
        f, p = np.mod(f, rate)[order], p[order]
        ref = full_scale ** 2
    else:
        ref = full_scale ** 2 / 2.0
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(p / ref)
    return Spectrum(f, db, nfft, rate, "hann", full_scale, cplx)


def band_bins(spec, f_lo, f_hi):
    """Boolean mask of bins inside ``[f_lo, f_hi]``, wrapping modulo the rate."""
    width = f_hi - f_lo
    if width < 0:
        raise ValueError("empty band")
    if width >= spec.rate:
        return np.ones(spec.freqs.size, dtype=bool)
    eps = 1e-9 * spec.bin_width
    rel = np.mod(spec.freqs - f_lo + eps, spec.rate)
    return rel <= width + 2 * eps


def snr_in_band(spec, band, signal_freq, neighbors=1):
    """Signal (tone bin +- ``neighbors``) over the remaining in-band power, in dB."""
    f_lo, f_hi = band
    mask = band_bins(spec, f_lo, f_hi)
    f0 = np.mod(signal_freq, spec.rate) if spec.is_complex else abs(signal_freq)
    k0 = int(np.argmin(np.abs(spec.freqs - f0)))
    if not mask[k0]:
        raise ValueError("signal bin lies outside the band")
    n = spec.freqs.size
    sig_idx = np.array([(k0 + d) % n if spec.is_complex else k0 + d
                        for d in range(-neighbors, neighbors + 1)])
    sig_idx = sig_idx[(sig_idx >= 0) & (sig_idx < n)]
    p = spec.power
    sig = np.sum(p[sig_idx])
    noise_mask = mask.copy()
    noise_mask[sig_idx] = False
    if not np.any(noise_mask):
        raise ValueError("no in-band noise bins left")
    return 10.0 * math.log10(sig / np.sum(p[noise_mask]))


def peak_to_floor_db(spec, band, signal_freq, neighbors=1):
    """Tone peak over the median per-bin in-band floor, in dB.

    Unlike :func:`snr_in_band` this depends on ``nfft``; it is the quantity
    one reads off a plotted PSD by eye.
    """
    mask = band_bins(spec, *band)
    f0 = np.mod(signal_freq, spec.rate) if spec.is_complex else abs(signal_freq)
    k0 = int(np.argmin(np.abs(spec.freqs - f0)))
    lo, hi = max(k0 - neighbors, 0), k0 + neighbors + 1
    floor_mask = mask.copy()
    floor_mask[lo:hi] = False
    return float(np.max(spec.psd[lo:hi]) - np.median(spec.psd[floor_mask]))


def snap_to_bin(freq, rate, nfft):
    """Nearest FFT-bin frequency and the applied offset (Hz)."""
    width = rate / nfft
    snapped = round(freq / width) * width
    return snapped, snapped - freq


@dataclass(frozen=True)
class NotchEstimate:
    f_hat: float
    strategy: str


def estimate_notch(model=None, omega_B=None, spectrum=None, grid_points=8192, search=None,
                   signal_freq=None):
    """Estimated notch frequency (Hz).

    With a model: the center of the band-wide window with the largest mean
    ``log|G_u|``, i.e. the least in-band noise when the NTF is ``~1/|G_u|``.
    Averaging over one band keeps it robust to the split pole pairs of a
    mismatched system; the raw NTF is not usable here because it also vanishes
    far out of band and, for even N, has its nulls on the poles beside the
    notch. With only a spectrum: argmin of a 32-bin median-smoothed noise
    floor, excluding the signal bins.
    """
    if model is not None:
        if not model.is_quadrature:
            raise ValueError("notch estimation needs a quadrature instance")
        f_s = model.design.f_s
        f_B = omega_B / (2.0 * math.pi)
        f_c = model.omega_n / (2.0 * math.pi)
        lo, hi = search if search else (f_c - 2 * f_B, f_c + 2 * f_B)
        # offset the grid by a fraction of a step to stay clear of exact poles
        step = (hi - lo) / grid_points
        f = lo + (np.arange(grid_points) + 0.5 / math.pi) * step
        G_u, _ = output_response(model, 2.0 * np.pi * f, nudge=1e-9 * omega_B)
        logg = np.log(np.abs(G_u))
        width = max(1, int(round(2 * f_B / step)))
        smooth = np.convolve(logg, np.ones(width) / width, mode="same")
        valid = np.arange(grid_points)
        valid = valid[(valid >= width // 2) & (valid < grid_points - width // 2)]
        if np.ptp(smooth[valid]) <= 1e-12:
            raise ValueError("flat gain: no identifiable notch")
        k = valid[np.argmax(smooth[valid])]
        return NotchEstimate(float(f[k]), "band_gain")
    if spectrum is None:
        raise ValueError("need a model or a spectrum")
    p = spectrum.power.copy()
    if signal_freq is not None:
        k0 = int(np.argmin(np.abs(spectrum.freqs - np.mod(signal_freq, spectrum.rate))))
        p[max(0, k0 - 2):k0 + 3] = np.median(p)
    smooth = medfilt(p, 33)
    if np.ptp(smooth) <= 0:
        raise ValueError("flat spectrum: no identifiable notch")
    return NotchEstimate(float(spectrum.freqs[int(np.argmin(smooth))]), "spectrum_median")
