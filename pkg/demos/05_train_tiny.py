"""A short training run end to end: learned predictor, then the denoiser, then sampling.

Takes a couple of minutes on one core. Pass a larger iteration count for a better model.
"""

import sys
import time

import numpy as np

from upsr.analysis import psnr
from upsr.core import make_rng
from upsr.degradation import DegradationConfig, synthetic_dataset
from upsr.denoiser import TrainConfig, TrainLog, train, train_predictor
from upsr.diffusion import run_reverse_chain
from upsr.predictor import learned_predictor
from upsr.schedule import build_schedule

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
cfg = DegradationConfig(scale=4)
data = synthetic_dataset(300, 32, cfg, seed=1)
test = synthetic_dataset(20, 32, cfg, seed=2)
s = build_schedule()

# %% step 1: a plain regressor y0 -> x0 serves as g(y0)
t0 = time.time()
g_cfg = TrainConfig(iterations=iters, n_layers=6, optimizer="adam", lr=3e-3)
g_net = train_predictor(data, g_cfg, make_rng(0, "demo:g"))
g = learned_predictor(g_net)
print("predictor trained in %.0fs" % (time.time() - t0))

# %% step 2: the denoiser, conditioned on x_t, y0 and g(y0)
log = TrainLog()
net = train(data, g, s, TrainConfig(iterations=iters, hidden=48, optimizer="adam", lr=1e-3,
                                    log_every=max(1, iters // 10)),
            make_rng(0, "demo:f"), train_log=log)
for it, loss, m, per in log.rows:
    print(f"  it {it:5d}  loss {loss:.4f}  (mse {m:.4f}, grad {per:.4f})")
print("skip gates per step:", np.round(net.params["skip_gate"], 3))

# %% step 3: compare on held-out pairs
rng = make_rng(0, "demo:sr")
rows = [(psnr(y0, x0), psnr(np.clip(g(y0), 0, 1), x0), psnr(run_reverse_chain(y0, g, net, s, None, rng), x0))
        for x0, y0 in test]
b, p, c = np.mean(rows, axis=0)
print(f"held-out PSNR  y0 {b:.2f}  g(y0) {p:.2f}  chain {c:.2f} dB")
