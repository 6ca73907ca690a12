"""Local quadrature digital control: coefficients, observation, 1-bit
quantization, NRZ DAC contribution and a checker for the stability
conditions the coefficients are derived from."""

from dataclasses import dataclass
import math

import numpy as np

from .numerics import wrap_angle

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class QuadratureControlParams:
    kappa_phi: float
    bar_kappa_phi: float
    tilde_kappa_phi: float
    bar_tilde_kappa_phi: float
    f_s: float
    T_s: float
    tau_dc: float = 0.0
    phi_kappa: float = 0.0

    @property
    def control_matrix(self):
        """2x2 DAC gain matrix applied to a decision pair."""
        return np.array([[self.kappa_phi, -self.bar_kappa_phi],
                         [self.bar_kappa_phi, self.kappa_phi]])

    @property
    def observation_matrix(self):
        return np.array([[self.tilde_kappa_phi, -self.bar_tilde_kappa_phi],
                         [self.bar_tilde_kappa_phi, self.tilde_kappa_phi]])


@dataclass(frozen=True)
class LowpassControlParams:
    """Scalar local control of the low-pass leapfrog: ``s = sign(x)``, DAC gain ``kappa``."""

    kappa: float
    f_s: float
    T_s: float
    tau_dc: float = 0.0


def _half_angle_gain(omega_n, T_s):
    # omega*T / (2 sin(omega*T/2)) with its removable singularity at 0
    half = 0.5 * omega_n * T_s
    if abs(half) < 1e-8:
        return 1.0 + half * half / 6.0
    return half / math.sin(half)


def derive_control_params(beta, omega_n, phi_kappa=0.0, tau_dc=0.0):
    """Control coefficients that keep every quadrature state pair bounded.

    The clock follows ``f_s = 2 beta``; the DAC gain norm matches the
    worst-case one-period input gain and the observation rotation anticipates
    the oscillator phase advance over half a period plus the loop delay.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    f_s = 2.0 * beta
    T_s = 1.0 / f_s
    if not 0.0 <= omega_n * T_s < TWO_PI:
        raise ValueError(f"omega_n * T_s = {omega_n * T_s} outside [0, 2*pi)")
    if tau_dc < 0:
        raise ValueError("tau_dc must be non-negative")
    phi_kappa = phi_kappa % TWO_PI
    kappa_norm = beta * _half_angle_gain(omega_n, T_s)
    angle = omega_n * (0.5 * T_s + tau_dc) - phi_kappa
    tilde_norm = 1.0 / (beta * T_s)
    return QuadratureControlParams(
        kappa_phi=kappa_norm * math.cos(phi_kappa),
        bar_kappa_phi=kappa_norm * math.sin(phi_kappa),
        tilde_kappa_phi=-tilde_norm * math.cos(angle),
        bar_tilde_kappa_phi=-tilde_norm * math.sin(angle),
        f_s=f_s,
        T_s=T_s,
        tau_dc=tau_dc,
        phi_kappa=phi_kappa,
    )


def lowpass_control_params(beta, tau_dc=0.0):
    return LowpassControlParams(kappa=-beta, f_s=2.0 * beta, T_s=0.5 / beta, tau_dc=tau_dc)


def control_observation(x, x_bar, p):
    """Rotate-and-scale a state pair into the two comparator inputs."""
    s = p.tilde_kappa_phi * x - p.bar_tilde_kappa_phi * x_bar
    s_bar = p.bar_tilde_kappa_phi * x + p.tilde_kappa_phi * x_bar
    return s, s_bar


def quantize(v):
    """1-bit comparator: ``+1`` for ``v >= 0`` and ``-1`` otherwise."""
    return np.where(np.asarray(v) >= 0, 1, -1).astype(np.int8) if np.ndim(v) else (1 if v >= 0 else -1)


def dac_contribution(d, p):
    """Constant NRZ contribution of a decision pair ``(s, s_bar)`` over one hold."""
    s, s_bar = d
    if s not in (-1, 1) or s_bar not in (-1, 1):
        raise ValueError(f"decisions must be +-1, got {d}")
    return p.control_matrix @ np.array([s, s_bar], dtype=float)


@dataclass(frozen=True)
class StabilityResiduals:
    norm_match: float
    tilde_norm: float
    tilde_angle: float
    superposition_slack: float

    def max_abs(self):
        return max(abs(self.norm_match), abs(self.tilde_norm), abs(self.tilde_angle))

    def ok(self, tol=1e-12):
        return self.max_abs() <= tol and self.superposition_slack >= -tol


def verify_stability_conditions(p, beta, omega_n):
    """Signed residuals of the matched-strength, self-stability and
    superposition conditions for a set of control coefficients.

    The first two residuals are relative to their target values, the angle
    residual is wrapped to ``[-pi, pi)`` and the slack is ``1 - 2 beta T_s``.
    """
    T_s = p.T_s
    target_norm = beta * _half_angle_gain(omega_n, T_s)
    norm = math.hypot(p.kappa_phi, p.bar_kappa_phi)
    norm_match = (norm - target_norm) / target_norm

    half = 0.5 * omega_n * T_s
    if abs(half) < 1e-8:
        target_tilde = 1.0 / (norm * T_s)
    else:
        target_tilde = omega_n / (2.0 * norm * math.sin(half))
    tilde = math.hypot(p.tilde_kappa_phi, p.bar_tilde_kappa_phi)
    tilde_norm = (tilde - target_tilde) / target_tilde

    phi_kappa = math.atan2(p.bar_kappa_phi, p.kappa_phi)
    target_angle = omega_n * (0.5 * T_s + p.tau_dc) - phi_kappa + math.pi
    angle = math.atan2(p.bar_tilde_kappa_phi, p.tilde_kappa_phi)
    tilde_angle = wrap_angle(angle - target_angle)

    # 2 beta / f_s rather than 2 beta T_s: exact when f_s = 2 beta
    return StabilityResiduals(norm_match, tilde_norm, tilde_angle, 1.0 - 2.0 * beta / p.f_s)
