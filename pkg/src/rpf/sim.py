"""2D grid world with macro-actions, truncated-normal actuation noise and range scans."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import _kernels as K

CELL_M = 0.2
AGENT_RADIUS = 0.15
LATTICE_RADIUS = AGENT_RADIUS  # lattice edges sweep the agent's own disk
PRESSED_RADIUS = 0.1  # ...or this, from cells whose center is closer than that to an obstacle
ROTATE_DEG = 30.0
FORWARD_M = 0.4
N_RAYS = 32
FOV_DEG = 120.0
MAX_RANGE_M = 8.0
RAY_CHANNELS = 5  # depth + one-hot over CLASSES

CLASSES = ("wall", "objectA", "objectB", "nothing")
OBJECT_CLASSES = ("A", "B")


class ContractError(AssertionError):
    """A caller broke an operation's precondition."""


class Action(enum.IntEnum):
    STAY = 0
    ROTATE_LEFT = 1
    ROTATE_RIGHT = 2
    FORWARD = 3


def _wrap_deg(theta):
    t = float(theta) % 360.0
    return 0.0 if t >= 360.0 else t


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float  # degrees, counter-clockwise from +x

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ContractError(f"non-finite pose {self!r}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", _wrap_deg(self.theta))

    def flipped(self) -> Pose:
        return Pose(self.x, self.y, self.theta + 180.0)

    def as_tuple(self):
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class NoiseSpec:
    level: float = 0.2
    rot_sigma: float = 57.3
    trans_sigma: float = 0.05

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("noise level must be >= 0")


@dataclass(frozen=True, eq=False)
class WorldObject:
    id: int
    cls: str
    cells: tuple

    def __eq__(self, other):
        return (isinstance(other, WorldObject) and self.id == other.id
                and self.cls == other.cls and tuple(self.cells) == tuple(other.cells))

    def __hash__(self):
        return hash((self.id, self.cls, tuple(self.cells)))


class World:
    """Immutable occupancy grid: permanent walls plus removable tagged objects.

    Grid index ``[i, j]`` covers x in ``[i*cell, (i+1)*cell)`` and y in
    ``[j*cell, (j+1)*cell)``.
    """

    def __init__(self, walls, objects=(), cell=CELL_M):
        walls = np.array(walls, dtype=bool)
        if walls.ndim != 2:
            raise ValueError("walls must be a 2D boolean grid")
        walls.setflags(write=False)
        self.walls = walls
        self.cell = float(cell)
        objs = []
        for ob in objects:
            cells = tuple((int(i), int(j)) for i, j in ob.cells)
            for i, j in cells:
                if not (0 <= i < walls.shape[0] and 0 <= j < walls.shape[1]):
                    raise ValueError(f"object {ob.id} cell {(i, j)} out of bounds")
                if walls[i, j]:
                    raise ValueError(f"object {ob.id} overlaps a wall at {(i, j)}")
            if ob.cls not in OBJECT_CLASSES:
                raise ValueError(f"unknown object class {ob.cls!r}")
            objs.append(WorldObject(int(ob.id), ob.cls, cells))
        self.objects = tuple(objs)

    @property
    def shape(self):
        return self.walls.shape

    def __eq__(self, other):
        return (isinstance(other, World) and self.cell == other.cell
                and np.array_equal(self.walls, other.walls) and self.objects == other.objects)

    __hash__ = None

    def with_objects(self, objects) -> World:
        return World(self.walls, objects, self.cell)

    @cached_property
    def labels(self):
        """int8 grid: -1 free, otherwise index into CLASSES."""
        lab = np.full(self.walls.shape, -1, dtype=np.int8)
        for ob in self.objects:
            code = 1 if ob.cls == "A" else 2
            for i, j in ob.cells:
                lab[i, j] = code
        lab[self.walls] = 0
        lab.setflags(write=False)
        return lab

    @cached_property
    def occupancy(self):
        occ = self.labels >= 0
        occ.setflags(write=False)
        return occ

    @cached_property
    def lattice_edges(self):
        return K.lattice_edges(self.occupancy, self.cell_clearance, self.cell, LATTICE_RADIUS,
                               K.LATTICE_DX, K.LATTICE_DY, PRESSED_RADIUS)

    @cached_property
    def cell_clearance(self):
        """Distance (m) from each cell center to the nearest occupied cell center."""
        if not self.occupancy.any():
            return np.full(self.shape, np.inf)
        return ndimage.distance_transform_edt(~self.occupancy) * self.cell

    @cached_property
    def _occupied_tree(self):
        idx = np.argwhere(self.occupancy)
        if len(idx) == 0:
            return None
        return cKDTree((idx + 0.5) * self.cell)

    def clearance(self, x, y):
        """Distance (m) from a point to the nearest occupied cell center."""
        tree = self._occupied_tree
        if tree is None:
            return np.inf
        d, _ = tree.query([x, y])
        return float(d)

    def inside(self, x, y):
        return 0.0 <= x < self.shape[0] * self.cell and 0.0 <= y < self.shape[1] * self.cell

    def collides(self, pose: Pose) -> bool:
        return bool(K.disk_hits(self.occupancy, pose.x, pose.y, AGENT_RADIUS, self.cell))

    def cell_of(self, x, y):
        return int(math.floor(x / self.cell)), int(math.floor(y / self.cell))

    def cell_center(self, i, j):
        return (i + 0.5) * self.cell, (j + 0.5) * self.cell

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        return {
            "grid_w": int(self.shape[0]),
            "grid_h": int(self.shape[1]),
            "cell_m": self.cell,
            "walls": [[int(i), int(j)] for i, j in np.argwhere(self.walls)],
            "objects": [{"id": ob.id, "class": ob.cls, "cells": [list(c) for c in ob.cells]}
                        for ob in self.objects],
        }

    @classmethod
    def from_dict(cls, doc) -> World:
        walls = np.zeros((doc["grid_w"], doc["grid_h"]), dtype=bool)
        for i, j in doc["walls"]:
            walls[i, j] = True
        objs = [WorldObject(o["id"], o["class"], tuple(tuple(c) for c in o["cells"]))
                for o in doc["objects"]]
        return cls(walls, objs, doc["cell_m"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text) -> World:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Observation:
    """32 rays left-to-right; each row is (depth, wall, objectA, objectB, nothing)."""

    rays: np.ndarray

    @property
    def depth(self):
        return self.rays[:, 0]

    @property
    def classes(self):
        return self.rays[:, 1:].argmax(axis=1)

    def __eq__(self, other):
        return isinstance(other, Observation) and np.array_equal(self.rays, other.rays)

    def flat(self):
        return self.rays.reshape(-1).tolist()


# ---------------------------------------------------------------------------
# noise

def _truncated_block(mu, sigma, delta, rng, n):
    # narrow windows: uniform proposal accepted with the gaussian density ratio;
    # wide windows: gaussian proposal accepted when it lands inside
    if delta < sigma:
        v = rng.uniform(mu - delta, mu + delta, size=n)
        keep = rng.random(n) < np.exp(-0.5 * ((v - mu) / sigma) ** 2)
    else:
        v = rng.normal(mu, sigma, size=n)
        keep = np.abs(v - mu) < delta
    return v[keep & (np.abs(v - mu) < delta)]


def sample_truncated_normal(mu, sigma, delta, rng, size=None):
    """Rejection-sample N(mu, sigma^2) restricted to (mu - delta, mu + delta).

    ``delta == 0`` returns ``mu`` without touching the stream. With ``size``
    an array of that many samples is returned. Acceptance is at least
    ``exp(-1/2)`` for any window width, so tiny noise levels cannot stall.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return mu if size is None else np.full(size, float(mu))
    if not sigma > 0:
        raise ContractError("sigma must be positive when delta > 0")
    if size is None:
        while True:
            v = _truncated_block(mu, sigma, delta, rng, 4)
            if v.size:
                return float(v[0])
    out = np.empty(size, dtype=float)
    filled = 0
    while filled < size:
        need = size - filled
        keep = _truncated_block(mu, sigma, delta, rng, int(need * 1.7) + 16)[:need]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out


# ---------------------------------------------------------------------------
# dynamics

def move(world: World, pose: Pose, action: Action, noise: NoiseSpec, rng):
    """Apply one macro-action; returns ``(new_pose, blocked)``."""
    action = Action(action)
    if world.collides(pose):
        raise ContractError(f"pose {pose} is in collision")
    n = noise.level
    if action == Action.STAY:
        return pose, False
    if action in (Action.ROTATE_LEFT, Action.ROTATE_RIGHT):
        sign = 1.0 if action == Action.ROTATE_LEFT else -1.0
        turn = sample_truncated_normal(ROTATE_DEG, noise.rot_sigma, n * ROTATE_DEG, rng)
        return Pose(pose.x, pose.y, pose.theta + sign * turn), False
    heading = pose.theta + sample_truncated_normal(0.0, noise.rot_sigma, n * ROTATE_DEG, rng)
    dist = sample_truncated_normal(FORWARD_M, noise.trans_sigma, n * FORWARD_M, rng)
    rad = math.radians(heading)
    dx, dy = dist * math.cos(rad), dist * math.sin(rad)
    t, blocked = K.sweep_disk(world.occupancy, pose.x, pose.y, dx, dy, AGENT_RADIUS, world.cell)
    return Pose(pose.x + t * dx, pose.y + t * dy, heading), bool(blocked)


def step(world: World, pose: Pose, action: Action, noise: NoiseSpec, rng) -> Pose:
    return move(world, pose, action, noise, rng)[0]


NOISELESS = NoiseSpec(level=0.0)


def noiseless_step(world, pose, action):
    return move(world, pose, action, NOISELESS, None)[0]


# ---------------------------------------------------------------------------
# rendering

_RAY_OFFSETS = np.radians(FOV_DEG / 2 - np.arange(N_RAYS) * (FOV_DEG / N_RAYS))


def _encode(depth, cls):
    out = np.zeros(depth.shape + (RAY_CHANNELS,), dtype=np.float32)
    out[..., 0] = depth
    np.put_along_axis(out[..., 1:], cls[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def render_arrays(world: World, xs, ys, thetas):
    """Batch render to a ``[N, 32, 5]`` float32 array."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    angles = np.radians(np.asarray(thetas, dtype=np.float64))[:, None] + _RAY_OFFSETS[None, :]
    depth = np.empty((len(xs), N_RAYS), dtype=np.float64)
    cls = np.empty((len(xs), N_RAYS), dtype=np.int64)
    K.cast_rays_batch(world.labels, xs, ys, angles, MAX_RANGE_M, world.cell, depth, cls)
    return _encode(np.minimum(depth, 1.0), cls)


def render_poses(world: World, poses):
    return render_arrays(world, [p.x for p in poses], [p.y for p in poses], [p.theta for p in poses])


def render(world: World, pose: Pose) -> Observation:
    if not world.inside(pose.x, pose.y):
        raise ContractError(f"pose {pose} outside the grid")
    return Observation(render_poses(world, [pose])[0])


def rotated_render(world: World, pose: Pose, offset_deg=180.0) -> Observation:
    return render(world, Pose(pose.x, pose.y, pose.theta + offset_deg))


# ---------------------------------------------------------------------------
# environmental change

def apply_change(world: World, removal_prob, rng) -> World:
    """Drop each object independently with probability ``removal_prob``.

    One uniform is drawn per object in order, so two calls with equally
    seeded generators give nested object sets for different probabilities.
    """
    if not 0.0 <= removal_prob <= 1.0:
        raise ValueError("removal probability must lie in [0, 1]")
    u = rng.random(len(world.objects))
    kept = [ob for ob, ui in zip(world.objects, u) if ui >= removal_prob]
    return world.with_objects(kept)
