"""Run the reverse chain with a perfect denoiser and with a noisy one, step by step."""

import numpy as np

from upsr.analysis import psnr
from upsr.core import make_rng
from upsr.degradation import DegradationConfig, synthetic_dataset
from upsr.denoiser import OracleDenoiser
from upsr.diffusion import WeightingConfig, run_reverse_chain
from upsr.predictor import smoothing_predictor
from upsr.schedule import build_schedule

s = build_schedule()
(x0, y0), = synthetic_dataset(1, 64, DegradationConfig(scale=4), seed=3)
print("PSNR(y0, x0) = %.2f dB" % psnr(y0, x0))

# %% watch the state drift from y0 + noise towards x0
trace = []
out = run_reverse_chain(y0, smoothing_predictor(2), OracleDenoiser(x0), s, WeightingConfig(),
                        make_rng(0, "demo:oracle"),
                        on_step=lambda t, x, inj: trace.append((t, psnr(np.clip(x, 0, 1), x0), inj.std())))
for t, p, sd in trace:
    print(f"x_{t}: PSNR {p:6.2f} dB   injected std {sd:.4f}")
print("final MSE:", float(np.mean((out - x0) ** 2)))

# %% an imperfect oracle: each call returns x0 plus fresh error
for err in (0.01, 0.05, 0.1):
    den = OracleDenoiser(x0, err, make_rng(1, f"demo:err{err}"))
    out = run_reverse_chain(y0, smoothing_predictor(2), den, s, WeightingConfig(), make_rng(2))
    print(f"denoiser error {err:.2f} -> output PSNR {psnr(out, x0):.2f} dB")

# the last step is deterministic, so the output error is just the t=1 denoiser error
