import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpf import grad as G
from rpf.envgen import generate_world, reverse_demonstration, sample_demonstration
from rpf.policy import (KINDS, ConfigError, ControllerState, Policy, PolicyConfig, act, attention_weights,
                        phi, relative_pose, step_deltas)
from rpf.sim import Action, Pose

WORLD = generate_world(11)
DEMOS = [sample_demonstration(WORLD, s, length=10) for s in range(3)]
OBS = np.stack([d.observations[0] for d in DEMOS])


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        PolicyConfig(kind="transformer")
    with pytest.raises(ConfigError):
        PolicyConfig(kind="gru", synthesize=True)


def test_phi_shape_and_purity():
    p = Policy.create("rpf", seed=0)
    a = phi(p.params, OBS).data
    b = phi(p.params, OBS).data
    assert a.shape == (3, 64)
    assert a.tobytes() == b.tobytes()
    assert phi(p.params, np.stack([OBS, OBS])).shape == (2, 3, 64)


def test_relative_pose_examples():
    assert relative_pose(Pose(1, 1, 0), Pose(2, 1, 0)) == pytest.approx((1, 0, 0, 1))
    assert relative_pose(Pose(1, 1, 90), Pose(1, 2, 90)) == pytest.approx((1, 0, 0, 1))
    assert relative_pose(Pose(0, 0, 0), Pose(0, 0, 90)) == pytest.approx((0, 0, 1, 0))
    d = step_deltas([Pose(0, 0, 0), Pose(0.4, 0, 0)])
    assert d[0] == pytest.approx([0.4, 0, 0, 1]) and d[1] == pytest.approx([0, 0, 0, 1])


def test_attention_weight_examples():
    with G.using_dtype(np.float64):
        w = attention_weights(G.as_tensor(np.array([1.0, 2.5])), 3).data
    assert w[0] == pytest.approx([1, math.exp(-1), math.exp(-2)])
    assert w[1] == pytest.approx([math.exp(-1.5), math.exp(-0.5), math.exp(-0.5)])


def test_attention_span_cuts_far_entries():
    with G.using_dtype(np.float64):
        w = attention_weights(G.as_tensor(np.array([5.0])), 10, span=2).data[0]
    assert np.all(w[[0, 1, 7, 8, 9]] == 0) and np.all(w[2:7] > 0)


def test_single_entry_memory():
    p = Policy.create("rpf", seed=1)
    demo = sample_demonstration(WORLD, 0, length=1)
    mem = p.prepare([demo])
    logits, state, inc = p.step(mem, demo.observations[:1], p.initial_state(1))
    assert logits.shape == (1, 4) and np.all(np.isfinite(logits.data))


def test_nvm_memory_has_no_visual_features():
    p = Policy.create("rpf_nvm", seed=0)
    mem = p.prepare(DEMOS)
    assert np.all(mem.features.data == 0)
    assert mem.actions.shape == (3, 10, 4)


def test_every_kind_steps():
    for kind in KINDS:
        p = Policy.create(kind, seed=0)
        mem = p.prepare(DEMOS)
        state = p.initial_state(3)
        for t in range(3):
            logits, state, inc = p.step(mem, OBS, state)
            assert logits.shape == (3, 4) and np.all(np.isfinite(logits.data)), kind


def test_policy_step_never_sees_pose():
    params = inspect.signature(Policy.step).parameters
    assert list(params) == ["self", "memory", "obs", "state"]


def test_rpf_const_pointer_counts_steps():
    p = Policy.create("rpf_const", seed=0)
    mem = p.prepare(DEMOS)
    state = p.initial_state(3)
    for t in range(1, 6):
        _, state, inc = p.step(mem, OBS, state)
        assert state.eta.data == pytest.approx([1 + t] * 3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**4), scale=st.floats(0.1, 20))
def test_pointer_never_moves_backwards(seed, scale):
    p = Policy.create("rpf", seed=seed)
    p.params["pi.inc.w"].data = p.params["pi.inc.w"].data * scale
    mem = p.prepare(DEMOS)
    rng = np.random.default_rng(seed)
    state = p.initial_state(3)
    with G.no_grad():
        for _ in range(6):
            obs = rng.random((3, 32, 5))
            _, new, inc = p.step(mem, obs, state)
            assert np.all(inc >= 0) and np.all(inc <= 2)
            assert np.all(new.eta.data >= state.eta.data)
            state = new


def test_controller_depends_on_memory_only_through_attended_read():
    """Entries outside a finite attention span cannot change the action."""
    p = Policy.create("rpf", seed=2, attention_span=2.0)
    demos = [sample_demonstration(WORLD, 4, length=10)]
    other = sample_demonstration(WORLD, 5, length=10)
    mixed = type(demos[0])(demos[0].poses[:4] + other.poses[4:], demos[0].actions[:4] + other.actions[4:],
                           np.concatenate([demos[0].observations[:4], other.observations[4:]]))
    outs = []
    for d in (demos[0], mixed):
        mem = p.prepare([d])
        logits, _, _ = p.step(mem, d.observations[:1], p.initial_state(1))  # eta = 1 reads entries 1..3
        outs.append(logits.data)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_all_parameters_receive_gradient():
    p = Policy.create("rpf", seed=3, synthesize=True)
    homing = [reverse_demonstration(d, WORLD) for d in DEMOS]
    with G.using_dtype(np.float64):
        for v in p.params.values():
            v.data = v.data.astype(np.float64)
        mem = p.prepare(homing)
        state = p.initial_state(3)
        total = None
        for t in range(4):
            logits, state, _ = p.step(mem, homing[0].observations[t:t + 1].repeat(3, 0), state)
            term = G.sum_(G.logsumexp(logits, axis=-1))
            total = term if total is None else G.add(total, term)
        total.backward()
    for name, v in p.params.items():
        assert v.grad is not None and np.abs(v.grad).max() > 0, name


def test_open_loop_replays_then_stays():
    p = Policy.create("open_loop")
    demo = DEMOS[0]
    mem = p.prepare([demo])
    state = p.initial_state(1)
    chosen = []
    for t in range(len(demo) + 3):
        a, state = act(p, mem, demo.observations[0], state)
        chosen.append(a)
    assert chosen[:len(demo)] == demo.actions
    assert chosen[len(demo):] == [Action.STAY] * 3
    assert p.params == {}


def test_sampled_action_uses_rng():
    p = Policy.create("rpf", seed=0)
    mem = p.prepare(DEMOS[:1])
    a1, _ = act(p, mem, OBS[0], p.initial_state(1), greedy=False, rng=np.random.default_rng(0))
    a2, _ = act(p, mem, OBS[0], p.initial_state(1), greedy=False, rng=np.random.default_rng(0))
    assert a1 == a2 and isinstance(a1, Action)


def test_create_is_seeded():
    a, b = Policy.create("rpf", seed=7), Policy.create("rpf", seed=7)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert isinstance(a.initial_state(2), ControllerState)
