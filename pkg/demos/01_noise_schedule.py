"""Walk through the shifting schedule: how fast y0 replaces x0, and how much noise rides along."""

import numpy as np

from upsr.schedule import build_schedule, sigma_max

# %% default five-step schedule
s = build_schedule()
print("T =", s.T, " kappa =", s.kappa, " p =", s.p)
print(" t   eta_t     alpha_t   noise std (w=1)")
for t in range(1, s.T + 1):
    print(f"{t:2d}  {s.eta[t]:.5f}   {s.alphas[t - 1]:.5f}   {s.kappa * np.sqrt(s.eta[t]):.4f}")
print("sum of alphas:", s.alphas.sum(), "(equals eta_T)")
print("sigma_max:", sigma_max(s))

# %% the shape exponent p moves where the shift happens
for p in (0.3, 1.0, 3.0):
    e = build_schedule(p=p).eta
    print(f"p={p}: eta =", np.round(e[1:], 4))

# small p front-loads the shift: by t=2 a large share of (y0 - x0) is already in x_t.
# large p keeps x_t close to x0 for longer and does most of the work in the last step.

# %% write the table for plotting elsewhere
print()
print(s.to_csv())
