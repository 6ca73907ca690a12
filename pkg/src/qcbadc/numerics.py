"""Shared numerical kernels: rotations, matrix exponentials, exact ZOH
discretization, power-of-two FFTs and a frequency-sampling FIR designer."""

from dataclasses import dataclass
import math

import numpy as np
import scipy.linalg

EXPM_MAX_DIM = 64


class InfeasibleSpecError(ValueError):
    """Raised when an FIR amplitude specification cannot be met."""


def rotation(phi):
    """Return the 2x2 rotation matrix ``[[cos, -sin], [sin, cos]]``."""
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def scaled_rotation(a, b):
    """Decompose ``[[a, -b], [b, a]]`` into ``(radius, angle)``.

    Uses ``atan2`` so the decomposition is valid in all four quadrants.
    """
    return math.hypot(a, b), math.atan2(b, a)


def wrap_angle(phi):
    """Map an angle to ``[-pi, pi)``."""
    return (phi + math.pi) % (2.0 * math.pi) - math.pi


def expm(A, max_dim=EXPM_MAX_DIM):
    """Matrix exponential (Pade-13 scaling and squaring)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {A.shape}")
    if A.shape[0] > max_dim:
        raise ValueError(f"matrix dimension {A.shape[0]} exceeds cap {max_dim}")
    if not np.all(np.isfinite(A)):
        raise ValueError("expm input has non-finite entries")
    return scipy.linalg.expm(A)


@dataclass(frozen=True)
class DiscretizedSystem:
    """One-interval exact solution ``x+ = Phi x + Gamma u`` for held ``u``."""

    Phi: np.ndarray
    Gamma: np.ndarray
    interval: float


def discretize(A, B, dt):
    """Exact zero-order-hold discretization over ``dt`` seconds.

    Both blocks are read off one augmented exponential
    ``expm([[A, B], [0, 0]] * dt)`` so a singular ``A`` needs no inversion.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("discretize input has non-finite entries")
    n, m = A.shape[0], B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A * dt
    aug[:n, n:] = B * dt
    E = expm(aug, max_dim=max(EXPM_MAX_DIM, n + m))
    return DiscretizedSystem(Phi=E[:n, :n].copy(), Gamma=E[:n, n:].copy(), interval=float(dt))


def _check_pow2(n):
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")


def fft(x):
    """Unnormalized forward DFT of a power-of-two length vector."""
    x = np.asarray(x)
    _check_pow2(x.shape[-1])
    return np.fft.fft(x)


def ifft(X):
    """Inverse of :func:`fft` (carries the ``1/n`` factor)."""
    X = np.asarray(X)
    _check_pow2(X.shape[-1])
    return np.fft.ifft(X)


def hann_centered(length):
    """Hann window equal to 1 at tap ``length // 2`` and 0 at offset ``length / 2``."""
    t = np.arange(length) - length // 2
    return 0.5 + 0.5 * np.cos(2.0 * np.pi * t / length)


def fir_response(taps, freqs, sample_rate):
    """Complex frequency response of ``taps`` at ``freqs`` (Hz)."""
    taps = np.asarray(taps)
    t = np.arange(len(taps)) - len(taps) // 2
    phase = np.exp(-2j * np.pi * np.outer(np.asarray(freqs, dtype=float) / sample_rate, t))
    return phase @ taps


def _desired_amplitude(offsets, points, stop=None):
    """Piecewise-linear (in dB) target over absolute baseband offsets.

    ``points`` is a sorted list of ``(offset, dB)`` with finite dB values.
    Beyond the last point the final slope continues until the response is
    negligible; the region before the first point is flat. ``stop`` is the
    first suppressed offset past the last point, where the target reaches 0.
    """
    f = np.array([p[0] for p in points], dtype=float)
    g = np.array([p[1] for p in points], dtype=float)
    db = np.interp(offsets, f, g) if len(f) > 1 else np.full_like(offsets, g[0])
    if len(f) > 1:
        slope = (g[-1] - g[-2]) / (f[-1] - f[-2]) if f[-1] > f[-2] else 0.0
        tail = offsets > f[-1]
        if slope < 0:
            db[tail] = g[-1] + slope * (offsets[tail] - f[-1])
    amp = 10.0 ** (db / 20.0)
    amp[db < -160.0] = 0.0
    if stop is not None and stop > f[-1]:
        tail = offsets > f[-1]
        ramp = amp[np.argmin(np.abs(offsets - f[-1]))] * (stop - offsets[tail]) / (stop - f[-1])
        amp[tail] = np.minimum(amp[tail], np.maximum(ramp, 0.0))
    return amp


def design_fir(amplitude_spec, length, sample_rate, iterations=20, tolerance_db=2.0,
               stop_db=-40.0, check=True):
    """Linear-phase FIR from point amplitude specifications.

    Parameters
    ----------
    amplitude_spec : sequence of (frequency_hz, gain_db)
        Gains may be ``-inf`` for points that must be suppressed. The point
        with the largest gain defines the band center; a nonzero center gives
        complex taps obtained by modulating a real low-pass prototype.
    length : int
        Number of taps (>= 8). The response is centered on tap ``length // 2``.
    sample_rate : float
        Sample rate in Hz.

    The prototype is frequency-sampled on a dense grid, transformed, cut to
    ``length`` taps and Hann windowed. Because windowing smears the point
    targets, the finite targets are pre-distorted by a short fixed-point
    iteration on the measured error.
    """
    if length < 8:
        raise ValueError("FIR length must be at least 8")
    spec = [(float(f), float(g)) for f, g in amplitude_spec]
    if not spec:
        raise ValueError("empty amplitude specification")
    finite = [(f, g) for f, g in spec if np.isfinite(g)]
    if not finite:
        raise InfeasibleSpecError("specification has no finite gain point")
    center = max(finite, key=lambda p: p[1])[0]

    def offset(f):
        d = (f - center + 0.5 * sample_rate) % sample_rate - 0.5 * sample_rate
        return d

    if center == 0.0:
        bad = [f for f, _ in spec if abs(offset(f)) >= sample_rate / 2]
    else:
        bad = []
    if bad:
        raise ValueError(f"frequencies {bad} not below sample_rate/2")

    # collapse +/- offsets onto one prototype target (mean of matching points)
    proto = {}
    for f, g in finite:
        key = round(abs(offset(f)), 6)
        proto.setdefault(key, []).append(g)
    targets = sorted((k, float(np.mean(v))) for k, v in proto.items())
    peak = max(g for _, g in targets)
    targets = [(k, g - peak) for k, g in targets]

    n_dense = max(16 * length, 8192)
    n_dense = 1 << int(math.ceil(math.log2(n_dense)))
    grid = np.abs(np.fft.fftfreq(n_dense, d=1.0 / sample_rate))
    t = np.arange(length) - length // 2
    window = hann_centered(length)
    tf = np.array([k for k, _ in targets])
    stops = [abs(offset(f)) for f, g in spec if not np.isfinite(g) and abs(offset(f)) > tf.max()]
    stop = min(stops) if stops else None
    tg = np.array([g for _, g in targets])

    adjusted = tg.copy()
    taps = None
    for _ in range(max(1, iterations)):
        amp = _desired_amplitude(grid, list(zip(tf, adjusted)), stop)
        h = np.real(np.fft.ifft(amp))
        proto_taps = h[t % n_dense] * window
        measured = 20.0 * np.log10(np.maximum(np.abs(fir_response(proto_taps, tf, sample_rate)), 1e-300))
        err = measured - tg
        taps = proto_taps
        if np.max(np.abs(err)) < 1e-3:
            break
        adjusted = adjusted - err
        # keep the target monotone enough to stay realizable
        adjusted[0] = min(adjusted[0], 6.0)

    gain = 10.0 ** (peak / 20.0)
    taps = taps * gain
    if center != 0.0:
        taps = taps * np.exp(2j * np.pi * center * t / sample_rate)

    if check:
        freqs = np.array([f for f, _ in spec])
        resp = 20.0 * np.log10(np.maximum(np.abs(fir_response(taps, freqs, sample_rate)), 1e-300))
        for (f, g), r in zip(spec, resp):
            if np.isfinite(g):
                ok = abs(r - g) <= tolerance_db
            else:
                ok = r <= stop_db
            if not ok:
                raise InfeasibleSpecError(
                    f"{length} taps cannot meet {g} dB at {f} Hz (got {r:.2f} dB)")
    return taps
