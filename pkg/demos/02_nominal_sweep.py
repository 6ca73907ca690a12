"""Simulate every notch position of one design and measure the in-band SNR.

Uses a shortened analysis (2^12-point PSD, 1024-tap banks) so it runs in
well under a minute. The full-size sweep is

    qcbadc nominal --config demos/configs/nominal_8_6.toml

Usage:
    python demos/02_nominal_sweep.py [N] [OSR]
"""

import sys

from qcbadc.experiments import ExperimentConfig, run_nominal

N = int(sys.argv[1]) if len(sys.argv) > 1 else 6
OSR = int(sys.argv[2]) if len(sys.argv) > 2 else 8

cfg = ExperimentConfig(name="demo_nominal", order=N, osr=OSR, taps=1024, nfft=1 << 12,
                       out="out/demo_nominal")
results, paths = run_nominal(cfg)

print(f"N={N} OSR={OSR}, {cfg.taps}-tap Wiener banks, {cfg.nfft}-point PSD")
print(f"{'position':>12} {'SNR dB':>8} {'peak/floor dB':>14}")
for r in results:
    print(f"{r.label:>12} {r.snr_db:8.2f} {r.peak_to_floor_db:14.2f}")
print("wrote", ", ".join(paths))
