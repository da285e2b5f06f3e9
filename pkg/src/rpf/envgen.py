"""Procedural floor plans, lattice distance fields and demonstration sampling."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .sim import (AGENT_RADIUS, FORWARD_M, NOISELESS, Action, ContractError, Observation, Pose, World,
                  WorldObject, move, render_poses)

N_HEADINGS = 12
GOAL_BLOCK = 1  # goal region: cells within this many indices of the goal cell


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    rooms: int = 4
    object_count: int = 20
    door_width: int = 8
    width: int = 80
    height: int = 80
    min_room: int = 14


@dataclass(frozen=True)
class LatticeState:
    cell_i: int
    cell_j: int
    theta_bin: int

    def __post_init__(self):
        if not 0 <= self.theta_bin < N_HEADINGS:
            raise ValueError("theta_bin must be in [0, 12)")

    @classmethod
    def of(cls, world: World, pose: Pose) -> LatticeState:
        i, j = world.cell_of(pose.x, pose.y)
        return cls(i, j, heading_bin(pose.theta))

    def index(self):
        return (self.cell_i, self.cell_j, self.theta_bin)


def heading_bin(theta):
    return int(math.floor(theta / 30.0 + 0.5)) % N_HEADINGS


# ---------------------------------------------------------------------------
# world generation

def _free_components(occ):
    """Label 4-connected free components; returns (labels, count)."""
    from scipy import ndimage
    lab, n = ndimage.label(~occ)
    return lab, n


def is_connected(world: World) -> bool:
    _, n = _free_components(world.occupancy)
    return n == 1


def _split_rooms(rng, spec: WorldSpec, walls):
    W, H = spec.width, spec.height
    regions = [(1, 1, W - 2, H - 2)]  # inclusive interior bounds
    doors = []  # (axis, wall_coord, lo, hi): axis 'x' means a wall at x = wall_coord
    while len(regions) < spec.rooms:
        regions.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]))
        x0, y0, x1, y1 = regions.pop()
        vertical = (x1 - x0) >= (y1 - y0)
        lo, hi = (x0, x1) if vertical else (y0, y1)
        cands = list(range(lo + spec.min_room, hi - spec.min_room + 1))
        # a new wall must not end inside an existing door on the region border
        bad = set()
        for axis, coord, dlo, dhi in doors:
            if vertical and axis == "y" and coord in (y0 - 1, y1 + 1):
                bad.update(range(dlo - 2, dhi + 3))
            if not vertical and axis == "x" and coord in (x0 - 1, x1 + 1):
                bad.update(range(dlo - 2, dhi + 3))
        cands = [c for c in cands if c not in bad]
        if not cands:
            raise GenerationError("region too small to split")
        s = int(rng.choice(cands))
        span_lo, span_hi = (y0, y1) if vertical else (x0, x1)
        if span_hi - span_lo + 1 < spec.door_width + 2:
            raise GenerationError("wall too short for a door")
        d0 = int(rng.integers(span_lo + 1, span_hi - spec.door_width + 1))
        d1 = d0 + spec.door_width - 1
        for t in range(span_lo, span_hi + 1):
            if d0 <= t <= d1:
                continue
            if vertical:
                walls[s, t] = True
            else:
                walls[t, s] = True
        doors.append(("x" if vertical else "y", s, d0, d1))
        if vertical:
            regions += [(x0, y0, s - 1, y1), (s + 1, y0, x1, y1)]
        else:
            regions += [(x0, y0, x1, s - 1), (x0, s + 1, x1, y1)]
    return doors


def _door_zone(shape, doors, margin):
    zone = np.zeros(shape, dtype=bool)
    for axis, coord, lo, hi in doors:
        if axis == "x":
            zone[max(coord - margin, 0):coord + margin + 1, max(lo - 1, 0):hi + 2] = True
        else:
            zone[max(lo - 1, 0):hi + 2, max(coord - margin, 0):coord + margin + 1] = True
    return zone


def generate_world(seed, spec: WorldSpec = WorldSpec(), max_tries=50) -> World:
    """Rooms from recursive splits, joined by doors, with tagged box objects."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        walls = np.zeros((spec.width, spec.height), dtype=bool)
        walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
        try:
            doors = _split_rooms(rng, spec, walls)
        except GenerationError:
            continue
        if not is_connected(World(walls)):
            continue
        no_go = _door_zone(walls.shape, doors, 4)
        objects = []
        occ = walls.copy()
        for oid in range(spec.object_count):
            for _try in range(200):
                w, h = (int(v) for v in rng.integers(2, 5, size=2))
                i = int(rng.integers(1, spec.width - w - 1))
                j = int(rng.integers(1, spec.height - h - 1))
                # boxes may touch walls but keep one free cell from each other
                if walls[i:i + w, j:j + h].any():
                    continue
                if no_go[i:i + w, j:j + h].any():
                    continue
                others = occ[i - 1:i + w + 1, j - 1:j + h + 1] & ~walls[i - 1:i + w + 1, j - 1:j + h + 1]
                if others.any():
                    continue
                trial = occ.copy()
                trial[i:i + w, j:j + h] = True
                if _free_components(trial)[1] != 1:
                    continue
                occ = trial
                cells = tuple((a, b) for a in range(i, i + w) for b in range(j, j + h))
                objects.append(WorldObject(oid, "A" if rng.random() < 0.5 else "B", cells))
                break
            else:
                break
        if len(objects) == spec.object_count:
            return World(walls, objects)
    raise GenerationError(f"could not generate a world for seed {seed}")


# ---------------------------------------------------------------------------
# distance oracle

@dataclass(frozen=True, eq=False)
class DistanceField:
    """Macro-action steps to reach the goal cell from every lattice state."""

    steps: np.ndarray  # int32 [W, H, 12], -1 = unreachable
    goal_cell: tuple
    cell: float

    def __getitem__(self, state: LatticeState) -> float:
        i, j, k = state.index()
        W, H, _ = self.steps.shape
        if not (0 <= i < W and 0 <= j < H):
            return math.inf
        v = self.steps[i, j, k]
        return math.inf if v < 0 else float(v)

    def at(self, pose: Pose) -> float:
        i = int(math.floor(pose.x / self.cell))
        j = int(math.floor(pose.y / self.cell))
        return self[LatticeState(i, j, heading_bin(pose.theta))]

    def as_float(self):
        out = self.steps.astype(float)
        out[self.steps < 0] = np.inf
        return out


def distance_field(world: World, goal) -> DistanceField:
    """BFS over the noiseless macro-action lattice toward ``goal``'s cell.

    ``goal`` may be a LatticeState or a Pose; only its cell matters. Every
    state whose cell lies in the 3x3 block around the goal cell scores 0, so
    the field is not dominated by the 2-cell stride of Forward.
    """
    if isinstance(goal, Pose):
        gi, gj = world.cell_of(goal.x, goal.y)
    else:
        gi, gj = goal.cell_i, goal.cell_j
    W, H = world.shape
    if not (0 <= gi < W and 0 <= gj < H) or world.occupancy[gi, gj]:
        raise ContractError(f"goal cell {(gi, gj)} is occupied or outside the grid")
    steps = K.bfs_to_goal(world.lattice_edges, world.occupancy, gi, gj, GOAL_BLOCK, K.LATTICE_DX, K.LATTICE_DY)
    return DistanceField(steps, (gi, gj), world.cell)


def astar_length(world: World, start: LatticeState, goal_cell, radius=GOAL_BLOCK):
    """Shortest lattice plan length into the goal block (math.inf if none), by A*."""
    acts = plan(world, start, goal_cell, radius=radius)
    return math.inf if acts is None else len(acts)


def plan(world: World, start: LatticeState, goal_cell, allowed=None, radius=0):
    """A* plan as a list of Actions, or None when the goal is unreachable.

    ``radius = 0`` targets the exact goal cell.
    """
    if allowed is None:
        allowed = ~world.occupancy
    si, sj, sk = start.index()
    gi, gj = goal_cell
    acts, found = K.astar(world.lattice_edges, allowed, si, sj, sk, gi, gj, radius,
                          K.LATTICE_DX, K.LATTICE_DY)
    if not found:
        return None
    return [Action(int(a)) for a in acts]


# ---------------------------------------------------------------------------
# demonstrations

@dataclass(eq=False)
class Demonstration:
    poses: list
    actions: list
    observations: np.ndarray  # [J, 32, 5] float32
    world_seed: int = -1
    change_r: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.poses) == len(self.actions) == len(self.observations)):
            raise ValueError("poses, actions and observations must have equal length")
        if len(self.poses) == 0:
            raise ValueError("empty demonstration")

    def __len__(self):
        return len(self.poses)

    @property
    def start(self) -> Pose:
        return self.poses[0]

    @property
    def goal(self) -> Pose:
        return self.poses[-1]

    def observation(self, j) -> Observation:
        return Observation(self.observations[j])

    # JSON-lines: a header line, then one line per step
    def to_jsonl(self) -> str:
        header = {"kind": "demonstration", "length": len(self), "world_seed": int(self.world_seed),
                  "change_r": float(self.change_r), "meta": self.meta}
        lines = [json.dumps(header, sort_keys=True)]
        for t, (p, a, o) in enumerate(zip(self.poses, self.actions, self.observations)):
            lines.append(json.dumps({"t": t, "pose": list(p.as_tuple()), "action": int(a),
                                     "rays": np.asarray(o, dtype=float).reshape(-1).tolist()}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text) -> Demonstration:
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        header, steps = rows[0], rows[1:]
        if header.get("length") != len(steps):
            raise ValueError("demonstration header length does not match step count")
        poses = [Pose(*r["pose"]) for r in steps]
        actions = [Action(r["action"]) for r in steps]
        obs = np.array([np.reshape(r["rays"], (32, 5)) for r in steps], dtype=np.float32)
        return cls(poses, actions, obs, header["world_seed"], header["change_r"], header.get("meta", {}))


def replay(world: World, start: Pose, actions):
    """Noiseless open-loop replay; returns every visited pose (start included)."""
    poses = [start]
    for a in actions:
        poses.append(move(world, poses[-1], a, NOISELESS, None)[0])
    return poses


def _forward_table():
    # identical arithmetic to a noiseless sim.move so replays are bit-exact
    fdx = np.array([FORWARD_M * math.cos(math.radians(30.0 * k)) for k in range(N_HEADINGS)])
    fdy = np.array([FORWARD_M * math.sin(math.radians(30.0 * k)) for k in range(N_HEADINGS)])
    return fdx, fdy


_FDX, _FDY = _forward_table()


def sample_demonstration(world: World, seed, length=30, min_clearance=0.6, anchor: World = None,
                         max_tries=100, world_seed=-1, change_r=0.0) -> Demonstration:
    """Sample a planner rollout with ``length`` poses (``length - 1`` moves, final Stay).

    A breadth-first planner expands noiseless continuous poses (one node per
    lattice state), so the recorded path is exactly a noiseless replay and
    every pose keeps ``min_clearance`` meters to occupied cell centers. The
    goal is a cell whose shortest clearance-respecting plan has exactly
    ``length - 1`` moves. The unconstrained lattice distance, which ignores
    clearance and is what evaluation measures, is stored in
    ``meta["lattice_geodesic"]``. With ``anchor`` the start and goal must
    also be clear in that world (used for object-change trials).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    ends_ok = (world.cell_clearance >= min_clearance) & ~world.occupancy
    if anchor is not None:
        ends_ok &= (anchor.cell_clearance >= min_clearance) & ~anchor.occupancy
    starts = np.argwhere(ends_ok)
    if len(starts) == 0:
        raise SamplingError("no cell satisfies the clearance requirement")
    n_moves = length - 1
    for _ in range(max_tries):
        si, sj = (int(v) for v in starts[rng.integers(len(starts))])
        sk = int(rng.integers(N_HEADINGS))
        start = Pose(*world.cell_center(si, sj), 30.0 * sk)
        if world.collides(start):
            continue
        actions = []
        if n_moves:
            depth, node_of, parent, act = K.hybrid_bfs(
                world.occupancy, start.x, start.y, sk, _FDX, _FDY, min_clearance,
                AGENT_RADIUS, world.cell, n_moves)
            cand = np.argwhere((depth == n_moves) & ends_ok[:, :, None])
            if len(cand) == 0:
                continue
            # keep cells whose shallowest heading is exactly n_moves deep
            shallow = np.where(depth < 0, np.iinfo(np.int32).max, depth).min(axis=2)
            cand = cand[shallow[cand[:, 0], cand[:, 1]] == n_moves]
            if len(cand) == 0:
                continue
            gi, gj, gk = (int(v) for v in cand[rng.integers(len(cand))])
            node = node_of[gi, gj, gk]
            while parent[node] >= 0:
                actions.append(Action(int(act[node])))
                node = parent[node]
            actions.reverse()
        poses = replay(world, start, actions)
        if any(world.collides(p) or world.clearance(p.x, p.y) < min_clearance for p in poses):
            continue
        goal = poses[-1]
        gi, gj = world.cell_of(goal.x, goal.y)
        if not ends_ok[gi, gj]:
            continue
        lattice_d = distance_field(world, goal).at(start) if n_moves else 0.0
        if n_moves and (not math.isfinite(lattice_d) or lattice_d <= 0):
            continue
        actions = list(actions) + [Action.STAY]
        obs = render_poses(world, poses)
        return Demonstration(poses, actions, obs, world_seed, change_r,
                             {"seed": int(seed) if np.isscalar(seed) else str(seed),
                              "min_clearance": min_clearance, "plan_length": n_moves,
                              "lattice_geodesic": lattice_d})
    raise SamplingError(f"no feasible demonstration after {max_tries} tries")


_SWAP = {Action.ROTATE_LEFT: Action.ROTATE_RIGHT, Action.ROTATE_RIGHT: Action.ROTATE_LEFT,
         Action.FORWARD: Action.FORWARD, Action.STAY: Action.STAY}


def reverse_demonstration(demo: Demonstration, world: World) -> Demonstration:
    """The homing version of a demo: flipped poses in reverse order.

    Observations are renders from a 180-degree rotated camera at the original
    poses (``world`` is the demonstration-time world), which is exactly the
    view at each reversed pose.
    """
    J = len(demo)
    poses = [p.flipped() for p in reversed(demo.poses)]
    moves = [_SWAP[a] for a in reversed(demo.actions[:J - 1])]
    actions = moves + [Action.STAY]
    obs = render_poses(world, poses)
    meta = dict(demo.meta)
    meta["reversed"] = not meta.get("reversed", False)
    return Demonstration(poses, actions, obs, demo.world_seed, demo.change_r, meta)


def bfs_free_path_exists(world: World, a, b) -> bool:
    """Plain 4-connected BFS over free cells; used as an independent connectivity check."""
    occ = world.occupancy
    W, H = occ.shape
    seen = np.zeros_like(occ)
    q = deque([a])
    seen[a] = True
    while q:
        i, j = q.popleft()
        if (i, j) == b:
            return True
        for ni, nj in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= ni < W and 0 <= nj < H and not occ[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                q.append((ni, nj))
    return False
