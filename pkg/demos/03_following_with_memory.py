"""Trained path follower vs blind replay on the same noisy trials.

Needs a checkpoint from  python -m rpf train --config configs/following_rpf.yaml
(or pass another checkpoint directory as the first argument).

    python demos/03_following_with_memory.py [checkpoint] [trials]
"""
import sys
from pathlib import Path

import numpy as np

from rpf.eval import make_episodes, render_topview, run_trials, spl, success_rate
from rpf.policy import Policy
from rpf.train import load_policy

ckpt = Path(sys.argv[1] if len(sys.argv) > 1 else "checkpoints/following_rpf/checkpoint")
trials = int(sys.argv[2]) if len(sys.argv) > 2 else 100
if not (ckpt / "manifest.json").exists():
    sys.exit(f"no checkpoint at {ckpt}; train one first")

learned, cfg = load_policy(ckpt)
episodes = make_episodes(trials, (20000, 30000), 0, task="following", J=30, clearance=0.6)

runs = {}
for name, pol in (("open_loop", Policy.create("open_loop")), ("rpf", learned)):
    runs[name] = run_trials(pol, episodes, noise=0.2, horizon=40, seed=0)
    print(f"{name:10s} success {success_rate(runs[name]):.3f}  spl {spl(runs[name]):.3f}")

ok = [t.success for t in runs["rpf"]]
print("trials only the learned policy finished:",
      int(np.sum(np.array(ok) & ~np.array([t.success for t in runs["open_loop"]]))))

# draw the first trial where the two disagree
k = next((i for i, (a, b) in enumerate(zip(runs["rpf"], runs["open_loop"])) if a.success != b.success), 0)
ep = episodes[k]
svg = render_topview(ep.exec_world, ep.demo, [(n, runs[n][k].poses) for n in runs])
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
(out / f"trial_{k}.svg").write_text(svg)
print("wrote", out / f"trial_{k}.svg")
