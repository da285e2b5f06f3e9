"""A walk through one world: generate it, record a demonstration, replay it.

Run from the repository root:  python demos/01_worlds_and_demonstrations.py
Writes demos/out/world.svg.
"""
from pathlib import Path

import numpy as np

from rpf.envgen import generate_world, replay, reverse_demonstration, sample_demonstration
from rpf.eval import render_topview
from rpf.sim import Action, NoiseSpec, move

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# %% a world is a boolean occupancy grid plus tagged objects
world = generate_world(42)
print("grid", world.occupancy.shape, "occupied cells", int(world.occupancy.sum()))

# %% a demonstration: the poses, actions and scans seen along a planned path
demo = sample_demonstration(world, seed=0, length=30)
print("demo: %d actions, %d scans of shape %s" % (len(demo.actions), len(demo.observations),
                                                  demo.observations.shape[1:]))
print("action histogram", np.bincount([int(a) for a in demo.actions], minlength=4))

# without noise, replaying the actions lands exactly on the goal
end = replay(world, demo.start, demo.actions)[-1]
print("noiseless replay ends at (%.2f, %.2f), goal (%.2f, %.2f)" % (end.x, end.y, demo.goal.x, demo.goal.y))

# with noise every step is a little off, and the errors add up
rng = np.random.default_rng(0)
pose = demo.start
for a in demo.actions:
    pose = move(world, pose, Action(a), NoiseSpec(0.2), rng)[0]
print("noisy replay ends %.2f m from the goal" % np.hypot(pose.x - demo.goal.x, pose.y - demo.goal.y))

# %% homing runs the same path backwards
home = reverse_demonstration(demo, world)
print("homing starts where following ended:", (home.start.x, home.start.y) == (demo.goal.x, demo.goal.y))

(out / "world.svg").write_text(render_topview(world, demo))
print("wrote", out / "world.svg")
