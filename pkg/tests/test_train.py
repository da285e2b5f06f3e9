import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpf import grad as G
from rpf import train as T
from rpf.config import RunConfig
from rpf.envgen import LatticeState, distance_field
from rpf.eval import make_episodes
from rpf.policy import Policy
from rpf.sim import Action, ContractError, Pose, World

EMPTY = World(np.zeros((80, 80), dtype=bool))
FIELD = distance_field(EMPTY, LatticeState(40, 40, 0))


def cell_pose(i, j, theta):
    return Pose((i + 0.5) * 0.2, (j + 0.5) * 0.2, theta)


# --- loss --------------------------------------------------------------------

@pytest.mark.parametrize("good,expected", [([1, 0, 0, 0], math.log(4)), ([1, 1, 0, 0], math.log(2)),
                                           ([1, 1, 1, 1], 0.0)])
def test_loss_closed_forms_on_uniform_logits(good, expected):
    with G.using_dtype(np.float64):
        loss = T.imitation_loss(np.zeros((3, 4)), np.tile(np.array(good, dtype=bool), (3, 1)))
    assert float(loss.data) == pytest.approx(expected, abs=1e-4)


def test_loss_averages_steps_then_episodes():
    logits = np.zeros((2, 2, 4))
    masks = np.zeros((2, 2, 4), dtype=bool)
    masks[:, 0, 0] = True  # log 4 each step
    masks[:, 1, :2] = True  # log 2 each step
    with G.using_dtype(np.float64):
        both = float(T.imitation_loss(logits, masks).data)
        first = float(T.imitation_loss(logits, masks, valid=[True, False]).data)
    assert both == pytest.approx((math.log(4) + math.log(2)) / 2)
    assert first == pytest.approx(math.log(4))


def test_loss_rejects_empty_good_set():
    masks = np.ones((2, 4), dtype=bool)
    masks[1] = False
    with pytest.raises(ContractError):
        T.imitation_loss(np.zeros((2, 4)), masks)


def test_loss_gradient_moves_mass_to_good_actions():
    logits = G.parameter(np.zeros((1, 4)))
    T.imitation_loss(logits, np.array([[False, False, False, True]])).backward()
    assert logits.grad[0, 3] < 0 and np.all(logits.grad[0, :3] > 0)


# --- labels ------------------------------------------------------------------

def test_facing_goal_labels_forward():
    assert T.good_actions(EMPTY, cell_pose(30, 40, 0), None, FIELD) == {Action.FORWARD}


def test_goal_behind_labels_both_rotations():
    # Forward loses ground, but Stay gains nothing, so it is not good either
    assert T.good_actions(EMPTY, cell_pose(30, 40, 180), None, FIELD) == {Action.ROTATE_LEFT, Action.ROTATE_RIGHT}


def test_goal_to_the_left_labels_rotate_left():
    assert T.good_actions(EMPTY, cell_pose(40, 30, 0), None, FIELD) == {Action.ROTATE_LEFT}


def test_at_goal_staying_is_good():
    assert Action.STAY in T.good_actions(EMPTY, cell_pose(40, 40, 0), None, FIELD)


@settings(max_examples=300)
@given(i=st.integers(0, 79), j=st.integers(0, 79), k=st.integers(0, 11))
def test_good_actions_follow_the_field_downhill(i, j, k):
    """Away from the goal, every good action is one lattice step closer to it."""
    pose = cell_pose(i, j, 30 * k)
    d = FIELD.at(pose)
    gains = T.action_gains(EMPTY, pose, FIELD)
    good = T.good_action_mask(EMPTY, pose, FIELD)
    if d == 0:
        assert good[Action.STAY]
    else:
        assert np.all(gains[good] == 1) and not good[Action.STAY]


def test_pressed_against_a_wall_still_has_a_way_out():
    walls = np.zeros((80, 80), dtype=bool)
    walls[50, :] = True
    w = World(walls)
    field = distance_field(w, LatticeState(40, 40, 0))
    pose = Pose(49 * 0.2 + 0.2 - 0.15, 40 * 0.2 + 0.1, 0)  # touching the wall
    assert not w.collides(pose) and np.isfinite(field.at(pose))


def test_unreachable_pose_raises_label_error():
    walls = np.zeros((80, 80), dtype=bool)
    walls[20, :] = True
    w = World(walls)
    field = distance_field(w, LatticeState(40, 40, 0))
    with pytest.raises(T.LabelError):
        T.good_action_mask(w, cell_pose(5, 5, 0), field)


def test_clip_grads():
    g, norm = T.clip_grads({"a": np.array([3.0, 4.0])}, max_norm=1.0)
    assert norm == pytest.approx(5.0) and g["a"] == pytest.approx([0.6, 0.8])
    g, _ = T.clip_grads({"a": np.array([0.3, 0.4])}, max_norm=1.0)
    assert g["a"] == pytest.approx([0.3, 0.4])


# --- rollout information barrier ---------------------------------------------

class Spy:
    """Wraps a policy and records everything handed to it."""

    def __init__(self, inner):
        self.inner = inner
        self.seen = []

    def prepare(self, demos, sources=None):
        self.seen.append(("prepare", demos))
        return self.inner.prepare(demos)

    def initial_state(self, batch):
        return self.inner.initial_state(batch)

    def step(self, memory, obs, state):
        self.seen.append(("step", memory, obs, state))
        return self.inner.step(memory, obs, state)


def test_rollout_hands_policy_no_pose():
    eps = make_episodes(2, (0, 100), 0, task="following", J=10)
    spy = Spy(Policy.create("rpf", seed=0))
    batch = T.rollout(spy, eps, 0.2, 5, np.random.default_rng(0))
    steps = [s for s in spy.seen if s[0] == "step"]
    assert len(steps) == 5
    for _, memory, obs, state in steps:
        assert isinstance(obs, np.ndarray) and obs.shape == (2, 32, 5)
        assert not any(isinstance(v, Pose) for v in vars(state).values())
        assert not any(isinstance(v, Pose) for v in vars(memory).values())
    assert batch.logits.shape == (5, 2, 4) and batch.masks.shape == (5, 2, 4)
    assert len(batch.poses[0]) == 6


# --- training loop -----------------------------------------------------------

def tiny_config(tmp_path, **kw):
    base = dict(J=10, horizon=12, iterations=8, batch=2, pool_size=4, val_every=0, val_trials=0,
                checkpoint_every=4, out=str(tmp_path))
    base.update(kw)
    return RunConfig(**base)


def test_training_is_deterministic(tmp_path):
    a = T.train(tiny_config(tmp_path / "a"))
    b = T.train(tiny_config(tmp_path / "b"))
    assert (a / "params.bin").read_bytes() == (b / "params.bin").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_training_stops_on_non_finite_loss(tmp_path, monkeypatch):
    real = T.init_params

    def poisoned(config, seed=0):
        p = real(config, seed)
        p["pi.act.b"].data[:] = np.nan
        return p
    monkeypatch.setattr(T, "init_params", poisoned)
    with pytest.raises(T.TrainingError):
        T.train(tiny_config(tmp_path))
    assert (tmp_path / "checkpoint" / "manifest.json").exists()


def test_smoke_training_run(tmp_path):
    cfg = RunConfig.load("configs/smoke.yaml").with_overrides(out=str(tmp_path))
    ckpt = T.train(cfg)
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert len(rows) == cfg.iterations
    losses = np.array([float(r["loss"]) for r in rows])
    assert np.all(np.isfinite(losses))
    assert losses[-50:].mean() < losses[:50].mean()
    assert [r["iteration"] for r in rows if r["val_success"]] == ["100", "200"]
    policy, loaded = T.load_policy(ckpt)
    assert loaded == cfg and policy.kind == "rpf"


def test_learning_rate_decays_from_lr_to_final():
    cfg = RunConfig(iterations=101, lr=1e-3, lr_final=1e-4)
    lrs = [T.learning_rate(cfg, it) for it in range(1, 102)]
    assert lrs[0] == pytest.approx(1e-3) and lrs[50] == pytest.approx(5.5e-4) and lrs[-1] == pytest.approx(1e-4)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
