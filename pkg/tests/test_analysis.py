from dataclasses import replace
import math

import numpy as np
import pytest
from scipy.signal.windows import hann

from qcbadc.analysis import (
    band_bins, estimate_notch, peak_to_floor_db, psd, snap_to_bin, snr_in_band,
)
from qcbadc.experiments import ExperimentConfig, lowpass_instance, measure, quadrature_instance
from qcbadc.estimator import wiener_filter_bank
from qcbadc.system import perturb, PerturbationSpec

from conftest import make_lowpass, make_quadrature

NFFT = 1 << 14


def hann_level(nfft, one_sided):
    w = hann(nfft, sym=False)
    return 10 * math.log10((4 if one_sided else 2) * np.sum(w ** 2) / np.sum(w) ** 2)


class TestPsd:
    def test_full_scale_real_tone(self):
        n = np.arange(4 * NFFT)
        sp = psd(np.cos(2 * np.pi * 512 * n / NFFT), NFFT)
        assert abs(sp.psd.max()) <= 0.1
        assert np.argmax(sp.psd) == 512
        assert sp.freqs.size == NFFT // 2 + 1 and not sp.is_complex

    def test_full_scale_complex_tone(self):
        n = np.arange(4 * NFFT)
        rate = 3.0
        sp = psd(np.exp(2j * np.pi * 700 * n / NFFT), NFFT, rate=rate)
        assert abs(sp.psd.max()) <= 0.1
        assert abs(sp.freqs[np.argmax(sp.psd)] - 700 * rate / NFFT) < 1e-12
        assert sp.freqs.size == NFFT and np.all(np.diff(sp.freqs) > 0)
        assert sp.freqs[0] == 0 and sp.freqs[-1] < rate

    def test_full_scale_argument(self):
        n = np.arange(2 * NFFT)
        sp = psd(0.25 * np.cos(2 * np.pi * 100 * n / NFFT), NFFT, full_scale=0.25)
        assert abs(sp.psd.max()) <= 0.1

    def test_white_binary_is_flat(self):
        x = np.where(np.random.default_rng(3).random(8 * NFFT) < 0.5, -1.0, 1.0)
        sp = psd(x, NFFT)
        d = sp.psd[1:-1] - hann_level(NFFT, True)
        assert abs(10 * math.log10(np.mean(10 ** (d / 10)))) < 0.2
        assert np.mean(np.abs(d) <= 3.0) >= 0.97

    def test_errors(self):
        with pytest.raises(ValueError):
            psd(np.zeros(100), 128)
        with pytest.raises(ValueError):
            psd(np.zeros(1000), 100)


def synthetic(snr_db, nfft=4096, rate=1.0, f_bin=300, seed=0, complex_=False):
    """Bin-centered tone plus white noise of a known in-band power."""
    rng = np.random.default_rng(seed)
    n = np.arange(16 * nfft)
    f0 = f_bin * rate / nfft
    if complex_:
        x = np.exp(2j * np.pi * f0 * n / rate)
        sig_p = 1.0
        noise = (rng.standard_normal(n.size) + 1j * rng.standard_normal(n.size)) / math.sqrt(2)
    else:
        x = np.cos(2 * np.pi * f0 * n / rate)
        sig_p = 0.5
        noise = rng.standard_normal(n.size)
    return x, noise, sig_p, f0


class TestSnr:
    @pytest.mark.parametrize("complex_", [False, True])
    def test_constructed_oracle(self, complex_):
        nfft, rate = 4096, 1.0
        x, noise, sig_p, f0 = synthetic(0, nfft, rate, complex_=complex_)
        band = (0.05, 0.15)
        # white noise of variance s2: in-band power = s2 * width / (rate or rate/2)
        s2 = 1e-6
        span = rate if complex_ else rate / 2
        sp = psd(x + math.sqrt(s2) * noise, nfft, rate=rate)
        want = 10 * math.log10(sig_p / (s2 * (band[1] - band[0]) / span))
        assert abs(snr_in_band(sp, band, f0) - want) <= 0.5

    def test_amplitude_halving(self):
        nfft = 4096
        x, noise, _, f0 = synthetic(0, nfft)
        a = psd(x + 1e-3 * noise, nfft)
        b = psd(0.5 * x + 1e-3 * noise, nfft)
        k0 = np.argmax(a.psd)
        assert abs(a.psd[k0] - b.psd[k0] - 20 * math.log10(2)) < 0.1
        floor = band_bins(a, 0.2, 0.3)
        assert abs(np.median(a.psd[floor]) - np.median(b.psd[floor])) < 0.5

    def test_wrapping_band(self):
        nfft, rate = 1024, 8.0
        n = np.arange(8 * nfft)
        f0 = -10 * rate / nfft
        x = np.exp(2j * np.pi * f0 * n / rate) + 1e-3 * np.random.default_rng(0).standard_normal(n.size)
        sp = psd(x, nfft, rate=rate)
        mask = band_bins(sp, -1.0, 1.0)
        assert mask[0] and mask[-1] and not mask[nfft // 2]
        assert snr_in_band(sp, (-1.0, 1.0), f0) > 40

    def test_errors(self):
        x, noise, _, f0 = synthetic(0, 1024)
        sp = psd(x + noise, 1024)
        with pytest.raises(ValueError):
            snr_in_band(sp, (0.3, 0.4), f0)
        with pytest.raises(ValueError):
            snr_in_band(sp, (f0, f0), f0)
        with pytest.raises(ValueError):
            band_bins(sp, 0.3, 0.2)

    def test_peak_to_floor(self):
        nfft = 4096
        x, noise, _, f0 = synthetic(0, nfft)
        sp = psd(x + 1e-4 * noise, nfft)
        floor = hann_level(nfft, True) + 20 * math.log10(1e-4)
        assert abs(peak_to_floor_db(sp, (0.0, 0.2), f0) - (0.0 - floor)) < 0.5


def test_snap_to_bin():
    f, off = snap_to_bin(1001.3, 1e4, 1024)
    assert abs(off) <= 0.5 * 1e4 / 1024
    assert abs(f / (1e4 / 1024) - round(f / (1e4 / 1024))) < 1e-9
    assert f - off == pytest.approx(1001.3)


class TestNotch:
    def test_nominal(self):
        for N, osr, k in ((6, 8, 2), (4, 4, 1), (5, 8, 7)):
            d, q, _ = make_quadrature(N, osr, k * 2.0 ** 31 / (2 * osr))
            est = estimate_notch(q, d.omega_B)
            assert abs(est.f_hat - q.omega_n / (2 * math.pi)) <= 4 * d.f_B / 8192

    def test_scaled_omega_n(self):
        fn = 2.0 ** 31 / 8
        d, q, _ = make_quadrature(6, 8, fn)
        A = np.array(q.A)
        for cls, mat, i, j in q.param_map:
            if cls == "omega_n":
                A[i, j] *= 1.03
        est = estimate_notch(replace(q, A=A), d.omega_B)
        assert abs(est.f_hat / fn - 1.03) <= 4 * d.f_B / 8192 / fn

    def test_monte_carlo_band(self):
        fn = 2.0 ** 31 / 8
        d, q, _ = make_quadrature(6, 8, fn)
        rng = np.random.default_rng(12)
        r = np.array([estimate_notch(perturb(q, PerturbationSpec(0.1), rng), d.omega_B).f_hat / fn
                      for _ in range(64)])
        assert np.mean((r >= 0.95) & (r <= 1.05)) >= 0.95

    def test_lowpass_rejected(self):
        d, lp, _ = make_lowpass(2, 8)
        with pytest.raises(ValueError):
            estimate_notch(lp, d.omega_B)
        with pytest.raises(ValueError):
            estimate_notch()

    def test_spectrum_fallback(self):
        # noise with a spectral dip at bin 700
        nfft, rate = 2048, 1.0
        rng = np.random.default_rng(5)
        w = rng.standard_normal(16 * nfft) + 1j * rng.standard_normal(16 * nfft)
        W = np.fft.fft(w)
        f = np.fft.fftfreq(w.size)
        W *= 1e-3 + np.minimum(1.0, np.abs(f - 700 / nfft) * 40)
        sp = psd(np.fft.ifft(W), nfft, rate=rate)
        est = estimate_notch(spectrum=sp)
        assert est.strategy == "spectrum_median"
        assert abs(est.f_hat - 700 / nfft) <= 16 / nfft


def test_measured_dbfs_consistency():
    cfg = ExperimentConfig(order=4, osr=8, taps=256, nfft=1 << 11, segments=4, notches=(2,))
    inst = quadrature_instance(cfg, 2.0 ** 31 / 8)
    bank = wiener_filter_bank(inst.model, cfg.omega_B, cfg.taps, cfg.osr)
    full = measure(cfg, inst, bank, amplitude=0.8)
    half = measure(cfg, inst, bank, amplitude=0.4)
    k0 = int(np.argmin(np.abs(full.spectrum.freqs - inst.f_signal)))
    assert abs(full.spectrum.psd[k0] - half.spectrum.psd[k0] - 6.02) <= 0.1
    mask = band_bins(full.spectrum, *inst.band)
    mask[k0 - 2:k0 + 3] = False
    a = 10 * np.log10(np.mean(full.spectrum.power[mask]))
    b = 10 * np.log10(np.mean(half.spectrum.power[mask]))
    assert abs(a - b) <= 0.5


def test_tones_in_band():
    cfg = ExperimentConfig(order=6, osr=8)
    lp = lowpass_instance(cfg)
    assert lp.band[0] <= lp.f_signal <= lp.band[1]
    assert abs(lp.snap_offset) <= 0.5 * cfg.f_s / cfg.osr / cfg.nfft
    for k in range(cfg.osr):
        q = quadrature_instance(cfg, k * cfg.f_s / (2 * cfg.osr))
        assert q.band[0] <= q.f_signal <= q.band[1]
        assert abs(q.snap_offset) <= 0.5 * cfg.f_s / cfg.osr / cfg.nfft
