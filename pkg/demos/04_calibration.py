"""Calibrate the digital estimator from control signals alone.

A known random reference is injected through an extra DAC while no input is
applied; LMS then fits the FIR bank so the reference path is cancelled. The
result is compared with a Wiener bank of the same length built from the
exact model. Reduced to 1e6 updates here (about half a minute); the
calibrate config uses 8e6.

    python demos/04_calibration.py [iterations]
"""

from dataclasses import replace
import sys

from qcbadc.experiments import ExperimentConfig, calibrate_point, wiener_reference_snr

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1_000_000
base = ExperimentConfig(name="demo_cal", order=6, osr=4)
cfg = replace(base, taps=base.calibration.taps,
              calibration=replace(base.calibration, iterations=iterations))

run = calibrate_point(cfg)
wiener = wiener_reference_snr(cfg)
print(f"{cfg.calibration.taps} taps, {iterations} LMS updates at step {cfg.calibration.step}")
print(f"calibrated: SNR {run.snr_db:.2f} dB  (final MSE {run.mse:.4g}, {run.status})")
print(f"Wiener:     SNR {wiener.snr_db:.2f} dB")

# a slow op-amp breaks the ideal model the Wiener bank assumes; calibration
# sees the real system
slow = calibrate_point(cfg, dc_gain_multiple=20.0, gbwp_multiple=750.0)
print(f"op-amp DC gain 20 OSR/pi: calibrated SNR {slow.snr_db:.2f} dB ({slow.status})")
