"""Build a quadrature leapfrog CBADC and look at it in the frequency domain.

Prints the design quantities, the control parameters for a chosen notch, the
circuit values for C = 1 pF, and the signal / noise transfer around the notch.

    python demos/01_design_and_transfer.py
"""

import math

import numpy as np

from qcbadc.analysis import estimate_notch
from qcbadc.control import derive_control_params, verify_stability_conditions
from qcbadc.estimator import stf_ntf
from qcbadc.system import leapfrog_lowpass, quadrature_extend

F_S = 2.0 ** 31
OSR = 4
N = 6
F_N = 5 * F_S / 16
C = 1e-12

omega_B = math.pi * F_S / OSR
design, lp = leapfrog_lowpass(N, OSR, omega_B)
params = derive_control_params(design.beta, 2 * math.pi * F_N)
model = quadrature_extend(lp, 2 * math.pi * F_N, params)

print(f"N={N} OSR={OSR} f_s={F_S / 1e9:.4f} GHz f_B={design.f_B / 1e6:.1f} MHz f_n={F_N / 1e6:.1f} MHz")
print(f"beta={design.beta:.4e}  kappa={design.kappa:.4e}  alpha={design.alpha:.4e}")
print(f"kappa_phi={params.kappa_phi:.4e}  tilde kappa=({params.tilde_kappa_phi:.4f}, "
      f"{params.bar_tilde_kappa_phi:.4f})")
print(f"R_beta={1 / (design.beta * C):.1f} Ohm  R_kappa={1 / (params.kappa_phi * C):.1f} Ohm  "
      f"R_omega_n={1 / (2 * math.pi * F_N * C):.1f} Ohm")

res = verify_stability_conditions(params, design.beta, 2 * math.pi * F_N)
print("stability residuals:", res)

# transfer functions across twice the band around the notch
f = F_N + np.linspace(-2, 2, 17) * design.f_B + 0.5
shapes = stf_ntf(model, omega_B, f)
print("\n  (f - f_n)/f_B    STF dB    NTF dB")
for fi, s, n in zip(f, shapes.stf_db, shapes.ntf_db):
    print(f"  {(fi - F_N) / design.f_B:+10.2f} {s:9.2f} {n:9.2f}")

est = estimate_notch(model, omega_B)
print(f"\nestimated notch {est.f_hat / 1e6:.3f} MHz ({est.strategy})")
