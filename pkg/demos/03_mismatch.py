"""Component mismatch: draw perturbed systems, rebuild their filters and
compare against the nominal SNR. A short ensemble; see
demos/configs/montecarlo.toml for the full one.

    python demos/03_mismatch.py [trials]
"""

import sys

import numpy as np

from qcbadc.experiments import ExperimentConfig, MonteCarloSpec, run_montecarlo

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 16
cfg = ExperimentConfig(name="demo_mc", order=6, osr=8, taps=1024, nfft=1 << 12, seed=7,
                       montecarlo=MonteCarloSpec(trials=trials), out="out/demo_mc")
results, paths = run_montecarlo(cfg)

for kind in ("quadrature", "lowpass"):
    sel = [r for r in results if r.kind == kind]
    ok = [r for r in sel if r.stable]
    delta = np.array([r.snr_delta_db for r in ok])
    print(f"{kind}: {len(sel) - len(ok)}/{len(sel)} unstable")
    if ok:
        print(f"  SNR delta  min {delta.min():+.2f}  median {np.median(delta):+.2f}  max {delta.max():+.2f} dB")
    if kind == "quadrature":
        ratio = np.array([r.notch_ratio for r in sel])
        print(f"  f_hat/f_n  {np.nanmin(ratio):.4f} .. {np.nanmax(ratio):.4f}")
        counts, edges = np.histogram(ratio, bins=8, range=(0.95, 1.05))
        for c, lo in zip(counts, edges):
            print(f"    {lo:.4f} {'#' * c}")
print("wrote", ", ".join(paths))
