"""The noise schedule and both directions of the diffusion walk.

Shows how signal decays along the schedule, that forward noising has the
advertised variance, and that the reverse step with the true noise is an
exact inverse at the last step.

Run: python3 demos/02_diffusion_walk.py
"""

import numpy as np

from gmdiff.diffusion import linear_schedule, q_sample, reverse_step

s = linear_schedule()
print(f"T = {s.T}, beta {s.beta[0]:.4f} .. {s.beta[-1]:.4f}")
print("signal retention sqrt(alpha_bar_t):")
for t in (0, 24, 49, 74, 99):
    print(f"  t={t:3d}  sqrt(ab)={np.sqrt(s.alpha_bar[t]):.4f}   "
          f"noise share={np.sqrt(1 - s.alpha_bar[t]):.4f}")

rng = np.random.default_rng(1)
z0 = rng.normal(size=(4, 8, 8))

print("\nempirical variance of q_sample at z0 = 0 (10k draws):")
for t in (10, 50, 90):
    draws = np.stack([q_sample(s, np.zeros(8), t, rng.normal(size=8)) for _ in range(10_000)])
    print(f"  t={t:3d}  var={draws.var():.4f}  expected={1 - s.alpha_bar[t]:.4f}")

print("\nreverse step with the true noise recovers z0 exactly at t=0:")
eps = rng.normal(size=z0.shape)
z1 = q_sample(s, z0, 0, eps)
back = reverse_step(s, z1, eps, 0, np.zeros_like(z0))
print(f"  max |back - z0| = {np.abs(back - z0).max():.2e}")

print("\nand lands on sqrt(ab_(t-1)) z0 plus a known noise term for t > 0:")
t = 40
z_t = q_sample(s, z0, t, eps)
stepped = reverse_step(s, z_t, eps, t, np.zeros_like(z0))
c = (np.sqrt(1 - s.alpha_bar[t]) - s.beta[t] / np.sqrt(1 - s.alpha_bar[t])) / np.sqrt(s.alpha[t])
print(f"  max |stepped - (sqrt(ab_39) z0 + c eps)| = "
      f"{np.abs(stepped - (np.sqrt(s.alpha_bar[t-1]) * z0 + c * eps)).max():.2e}")
