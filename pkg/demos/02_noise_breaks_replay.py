"""Blind replay of a demonstration against actuation noise.

Open-loop replay is perfect at zero noise and falls apart quickly as noise
grows, which is what motivates a controller that watches where it is.

    python demos/02_noise_breaks_replay.py [trials]
"""
import sys
from pathlib import Path

from rpf.eval import plot_sweep, sweep
from rpf.policy import Policy

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 100
levels = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]

results = sweep(Policy.create("open_loop"), "noise", levels, n_trials=trials, clearance=0.6)
print("noise  success  spl    median d_f/d_0")
for n, rep in results:
    print(f"{n:4.1f}   {rep.success_rate:6.3f}  {rep.spl:5.3f}  {rep.median_norm_dist:5.3f}")

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
print("wrote", plot_sweep(out / "noise_open_loop.png", "noise", {"open_loop": results}))
