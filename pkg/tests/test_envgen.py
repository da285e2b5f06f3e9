import math
from collections import deque

import numpy as np
import pytest

from rpf import _kernels as K
from rpf.envgen import (N_HEADINGS, Demonstration, GenerationError, LatticeState, SamplingError,
                        WorldSpec, astar_length, distance_field, generate_world, heading_bin, replay,
                        reverse_demonstration, sample_demonstration)
from rpf.sim import NOISELESS, Action, ContractError, Pose, World, move, render_poses

from oracles import lattice_bfs_from, steps_to_block

WORLD = generate_world(11)


def single_component(occ):
    """Plain BFS flood fill from the first free cell; True if it reaches every free cell."""
    free = np.argwhere(~occ)
    W, H = occ.shape
    seen = {tuple(free[0])}
    q = deque(seen)
    while q:
        i, j = q.popleft()
        for n in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= n[0] < W and 0 <= n[1] < H and not occ[n] and n not in seen:
                seen.add(n)
                q.append(n)
    return len(seen) == len(free)


# --- generation --------------------------------------------------------------

def test_generate_world_deterministic():
    assert generate_world(5) == generate_world(5)
    assert generate_world(5) != generate_world(6)


def test_generate_world_without_objects():
    w = generate_world(5, WorldSpec(object_count=0))
    assert w.objects == ()
    assert np.array_equal(w.occupancy, w.walls)


def test_generate_world_impossible_layout():
    with pytest.raises(GenerationError):
        generate_world(0, WorldSpec(object_count=5000), max_tries=2)


def test_generated_worlds_are_connected():
    bad = [s for s in range(1000) if not single_component(generate_world(s).occupancy)]
    assert bad == []


def test_generated_world_has_tagged_objects():
    assert len(WORLD.objects) == 20
    assert {ob.cls for ob in WORLD.objects} <= {"A", "B"}


# --- lattice and distance field ----------------------------------------------

def test_lattice_state_bijection():
    seen = set()
    for i in range(3):
        for j in range(3):
            for k in range(N_HEADINGS):
                seen.add(LatticeState(i, j, k).index())
    assert len(seen) == 9 * 12
    assert heading_bin(359.9) == 0 and heading_bin(15.1) == 1 and heading_bin(14.9) == 0


def free_state(world, rng):
    free = np.argwhere(~world.occupancy)
    i, j = free[rng.integers(len(free))]
    return LatticeState(int(i), int(j), int(rng.integers(12)))


def test_distance_field_goal_and_one_forward():
    rng = np.random.default_rng(0)
    edges = WORLD.lattice_edges
    while True:
        s = free_state(WORLD, rng)
        i, j, k = s.index()
        if edges[i, j, k]:
            break
    goal = (i + K.LATTICE_DX[k], j + K.LATTICE_DY[k])
    field = distance_field(WORLD, LatticeState(goal[0], goal[1], 0))
    assert field[LatticeState(goal[0], goal[1], 5)] == 0
    assert field[s] <= 1  # one Forward lands on the goal cell


def test_distance_field_rejects_occupied_goal():
    i, j = np.argwhere(WORLD.occupancy)[0]
    with pytest.raises(ContractError):
        distance_field(WORLD, LatticeState(int(i), int(j), 0))


def test_distance_field_matches_astar_and_bfs():
    rng = np.random.default_rng(1)
    for _ in range(25):
        start, goal = free_state(WORLD, rng), free_state(WORLD, rng)
        field = distance_field(WORLD, goal)
        d = field[start]
        assert d == astar_length(WORLD, start, (goal.cell_i, goal.cell_j))
        dist = lattice_bfs_from(WORLD.lattice_edges, WORLD.occupancy, start.index(),
                                K.LATTICE_DX, K.LATTICE_DY)
        assert d == steps_to_block(dist, (goal.cell_i, goal.cell_j))


def test_distance_field_bellman_consistency():
    field = distance_field(WORLD, free_state(WORLD, np.random.default_rng(2)))
    steps = field.as_float()
    edges = WORLD.lattice_edges
    W, H, _ = steps.shape
    for i, j in np.argwhere(~WORLD.occupancy)[::7]:
        for k in range(12):
            d = steps[i, j, k]
            succ = [steps[i, j, (k + 1) % 12], steps[i, j, (k - 1) % 12]]
            if edges[i, j, k]:
                succ.append(steps[i + K.LATTICE_DX[k], j + K.LATTICE_DY[k], k])
            if math.isinf(d):
                assert all(math.isinf(v) for v in succ)
                continue
            assert all(d <= v + 1 for v in succ)
            assert d == 0 or d == min(succ) + 1
            assert abs(d - succ[0]) <= 1 and abs(d - succ[1]) <= 1  # rotations are reversible


# --- demonstrations ----------------------------------------------------------

def min_center_distance(world, pose):
    occ = np.argwhere(world.occupancy)
    centers = (occ + 0.5) * world.cell
    return float(np.min(np.hypot(centers[:, 0] - pose.x, centers[:, 1] - pose.y)))


@pytest.mark.parametrize("seed", range(6))
def test_sample_demonstration_contract(seed):
    demo = sample_demonstration(WORLD, seed, length=30, min_clearance=0.6)
    assert len(demo) == 30 and len(demo.actions) == 30 and demo.observations.shape == (30, 32, 5)
    assert demo.actions[-1] == Action.STAY
    assert replay(WORLD, demo.start, demo.actions[:-1]) == demo.poses  # bit-exact
    assert 27 <= demo.meta["plan_length"] <= 33
    assert all(not WORLD.collides(p) for p in demo.poses)
    assert min(min_center_distance(WORLD, p) for p in demo.poses) >= 0.6 - 1e-9
    assert np.array_equal(demo.observations, render_poses(WORLD, demo.poses))


def test_sample_demonstration_hard_clearance():
    demo = sample_demonstration(WORLD, 3, length=30, min_clearance=0.2)
    assert min(min_center_distance(WORLD, p) for p in demo.poses) >= 0.2 - 1e-9


def test_sample_demonstration_single_pose():
    demo = sample_demonstration(WORLD, 0, length=1)
    assert len(demo) == 1 and demo.actions == [Action.STAY]


def test_sample_demonstration_infeasible():
    with pytest.raises(SamplingError):
        sample_demonstration(WORLD, 0, length=30, min_clearance=5.0)


def test_sample_demonstration_deterministic():
    a = sample_demonstration(WORLD, 7)
    b = sample_demonstration(WORLD, 7)
    assert a.poses == b.poses and a.actions == b.actions


def test_demonstration_jsonl_round_trip():
    demo = sample_demonstration(WORLD, 4, length=10)
    again = Demonstration.from_jsonl(demo.to_jsonl())
    assert again.poses == demo.poses and again.actions == demo.actions
    assert np.array_equal(again.observations, demo.observations)
    header = demo.to_jsonl().splitlines()[0]
    assert '"length": 10' in header


def hand_demo(world, start, moves):
    poses = replay(world, start, moves)
    return Demonstration(poses, list(moves) + [Action.STAY], render_poses(world, poses))


def test_reverse_straight_demo():
    w = World(np.zeros((80, 80), dtype=bool))
    d = hand_demo(w, Pose(4.1, 4.1, 0.0), [Action.FORWARD] * 3)
    r = reverse_demonstration(d, w)
    assert r.actions == [Action.FORWARD] * 3 + [Action.STAY]
    assert all(p.theta == pytest.approx(180.0) for p in r.poses)
    assert r.poses[-1].x == pytest.approx(4.1)


def test_reverse_l_shaped_demo():
    w = World(np.zeros((80, 80), dtype=bool))
    d = hand_demo(w, Pose(4.1, 4.1, 0.0), [Action.FORWARD, Action.FORWARD, Action.ROTATE_LEFT,
                                           Action.ROTATE_LEFT, Action.ROTATE_LEFT, Action.FORWARD])
    r = reverse_demonstration(d, w)
    assert r.actions.count(Action.ROTATE_RIGHT) == 3 and Action.ROTATE_LEFT not in r.actions
    end = replay(w, r.start, r.actions[:-1])[-1]
    assert math.hypot(end.x - d.start.x, end.y - d.start.y) <= 0.4
    assert end.theta == pytest.approx(d.start.flipped().theta)


def test_reverse_is_involution_on_poses():
    d = sample_demonstration(WORLD, 2, length=12)
    rr = reverse_demonstration(reverse_demonstration(d, WORLD), WORLD)
    assert [p.as_tuple() for p in rr.poses] == pytest.approx([p.as_tuple() for p in d.poses])
    assert rr.actions == d.actions


def test_reverse_observations_are_rotated_renders():
    d = sample_demonstration(WORLD, 5, length=12)
    r = reverse_demonstration(d, WORLD)
    from rpf.sim import rotated_render
    for k, p in enumerate(reversed(d.poses)):
        assert np.array_equal(r.observations[k], rotated_render(WORLD, p).rays)


def test_reversed_replay_ends_near_start():
    for seed in range(5):
        d = sample_demonstration(WORLD, seed, length=30)
        r = reverse_demonstration(d, WORLD)
        end = r.start
        for a in r.actions[:-1]:
            end = move(WORLD, end, a, NOISELESS, None)[0]
        assert math.hypot(end.x - d.start.x, end.y - d.start.y) <= 0.4 + 1e-9
