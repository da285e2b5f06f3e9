"""Attention-pointer path following controller and its baselines.

All policies share one batched interface: ``prepare`` turns demonstrations
into a :class:`PathMemory`, ``initial_state`` creates per-episode state and
``step`` maps (memory, observation, state) to action logits. Nothing else
reaches a policy; in particular it never sees the agent's true pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import grad as G
from .sim import Action, Pose

KINDS = ("rpf", "rpf_nvm", "rpf_const", "rpf_norec", "gru", "nn", "open_loop")
N_ACTIONS = 4
POSE_DIMS = 4  # (dx, dy, sin dtheta, cos dtheta)
RELU_BIAS = 0.01  # keeps all-zero input patches off the relu kink


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "rpf"
    feature: int = 64
    hidden: int = 128
    synthesize: bool = False  # build memory features with the synthesis network
    attention_span: float = 0.0  # 0 = attend over the whole memory

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.synthesize and self.kind != "rpf":
            raise ConfigError("feature synthesis is only defined for the full rpf policy")


# ---------------------------------------------------------------------------
# parameters

def _glorot(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(config: PolicyConfig, seed=0) -> dict:
    """Fresh parameters for ``config``; open-loop policies have none."""
    rng = np.random.default_rng(seed)
    F, H = config.feature, config.hidden
    p = {}

    def add(name, arr):
        p[name] = G.parameter(arr, name=name)

    if config.kind == "open_loop":
        return p
    # observation encoder: 32x5 scan -> conv(16, k5, s2) -> conv(32, k5, s2) -> dense F
    add("phi.conv1.w", _glorot(rng, (5, 5, 16), 25, 80))
    add("phi.conv1.b", np.full(16, RELU_BIAS))
    add("phi.conv2.w", _glorot(rng, (5, 16, 32), 80, 160))
    add("phi.conv2.b", np.full(32, RELU_BIAS))
    add("phi.fc.w", _glorot(rng, (5 * 32, F), 160, F))
    add("phi.fc.b", np.zeros(F))
    if config.kind == "nn":
        add("nn.beta", np.array([5.0]))
        return p
    if config.kind != "gru":
        d_in = N_ACTIONS + POSE_DIMS + F
        add("psi.l1.w", _glorot(rng, (d_in, F), d_in, F))
        add("psi.l1.b", np.full(F, RELU_BIAS))
        add("psi.l2.w", _glorot(rng, (F, F), F, F))
        add("psi.l2.b", np.zeros(F))
    if config.kind == "rpf_norec":
        add("pi.ff.w", _glorot(rng, (2 * F, H), 2 * F, H))
        add("pi.ff.b", np.zeros(H))
    else:
        add("pi.gru.wx", _glorot(rng, (2 * F, 3 * H), 2 * F, H))
        add("pi.gru.wh", _glorot(rng, (H, 3 * H), H, H))
        add("pi.gru.bx", np.zeros(3 * H))
        add("pi.gru.bh", np.zeros(3 * H))
    add("pi.act.w", _glorot(rng, (H, N_ACTIONS), H, N_ACTIONS))
    add("pi.act.b", np.zeros(N_ACTIONS))
    add("pi.inc.w", 0.1 * _glorot(rng, (H, 1), H, 1))
    add("pi.inc.b", np.zeros(1))
    if config.synthesize:
        add("omega.l1.w", _glorot(rng, (F + POSE_DIMS, F), F + POSE_DIMS, F))
        add("omega.l1.b", np.full(F, RELU_BIAS))
        add("omega.l2.w", _glorot(rng, (F, F + 1), F, F + 1))
        add("omega.l2.b", np.zeros(F + 1))
    return p


# ---------------------------------------------------------------------------
# geometry helpers

def relative_pose(src: Pose, tgt: Pose):
    """``tgt`` in the frame of ``src``: (dx, dy, sin dtheta, cos dtheta), meters."""
    c, s = math.cos(math.radians(src.theta)), math.sin(math.radians(src.theta))
    ex, ey = tgt.x - src.x, tgt.y - src.y
    dth = math.radians(tgt.theta - src.theta)
    return (c * ex + s * ey, -s * ex + c * ey, math.sin(dth), math.cos(dth))


def relative_pose_grid(sources, targets):
    """``[len(sources), len(targets), 4]`` relative poses, vectorized."""
    s = np.array([p.as_tuple() for p in sources])
    t = np.array([p.as_tuple() for p in targets])
    th = np.radians(s[:, 2])[:, None]
    ex = t[None, :, 0] - s[:, None, 0]
    ey = t[None, :, 1] - s[:, None, 1]
    c, sn = np.cos(th), np.sin(th)
    dth = np.radians(t[None, :, 2] - s[:, None, 2])
    return np.stack([c * ex + sn * ey, -sn * ex + c * ey, np.sin(dth), np.cos(dth)], axis=-1)


def step_deltas(poses):
    """Per-entry motion to the next pose in the entry's own frame; identity for the last."""
    out = np.zeros((len(poses), POSE_DIMS))
    out[:, 3] = 1.0
    for j in range(len(poses) - 1):
        out[j] = relative_pose(poses[j], poses[j + 1])
    return out


def one_hot_actions(actions):
    out = np.zeros((len(actions), N_ACTIONS))
    out[np.arange(len(actions)), [int(a) for a in actions]] = 1.0
    return out


# ---------------------------------------------------------------------------
# networks

def phi(params, obs):
    """Encode scans ``[..., 32, 5]`` into ``[..., F]`` features."""
    obs = G.as_tensor(obs)
    lead = obs.shape[:-2]
    x = obs.reshape((-1,) + obs.shape[-2:])
    x = G.relu(G.conv1d(x, params["phi.conv1.w"], params["phi.conv1.b"], stride=2))
    x = G.relu(G.conv1d(x, params["phi.conv2.w"], params["phi.conv2.b"], stride=2))
    x = x.reshape((x.shape[0], x.shape[1] * x.shape[2]))
    f = G.dense(x, params["phi.fc.w"], params["phi.fc.b"])
    return f.reshape(lead + (f.shape[-1],))


def psi(params, entries):
    h = G.relu(G.dense(entries, params["psi.l1.w"], params["psi.l1.b"]))
    return G.dense(h, params["psi.l2.w"], params["psi.l2.b"])


def synthesize_features(source_obs, source_poses, target_poses, params):
    """Predict features at ``target_poses`` from observations taken at ``source_poses``.

    Batched: ``source_obs[B, Js, 32, 5]`` and per-episode pose lists. Each
    source contributes ``Omega(phi(I_i), delta(p_i, target_j))``; contributions
    are mixed by a softmax over sources of a weight logit Omega also emits.
    Returns ``[B, Jt, F]``.
    """
    f = phi(params, source_obs)  # [B, Js, F]
    F = f.shape[-1]
    rel = np.stack([relative_pose_grid(s, t) for s, t in zip(source_poses, target_poses)])
    w1 = params["omega.l1.w"]
    # dense over concat(phi, delta), split so phi is projected once per source
    a = G.matmul(f, w1[:F])
    a = a.reshape((a.shape[0], a.shape[1], 1, a.shape[2]))
    c = G.matmul(G.as_tensor(rel), w1[F:])
    hidden = G.relu(G.add(G.add(a, c), params["omega.l1.b"]))
    out = G.dense(hidden, params["omega.l2.w"], params["omega.l2.b"])  # [B, Js, Jt, F+1]
    contrib = out[..., :F]
    weights = G.softmax(out[..., F], axis=1)
    weights = weights.reshape(weights.shape + (1,))
    return G.sum_(G.mul(weights, contrib), axis=1)


@dataclass
class PathMemory:
    actions: np.ndarray  # [B, J, 4] one-hot
    deltas: np.ndarray  # [B, J, 4]
    features: G.Tensor  # [B, J, F]
    action_ids: np.ndarray  # [B, J] ints, for open-loop replay
    psi_cache: G.Tensor = None

    @property
    def length(self):
        return self.actions.shape[1]

    @property
    def batch(self):
        return self.actions.shape[0]

    def entries(self):
        return G.concat([G.as_tensor(self.actions), G.as_tensor(self.deltas), self.features], axis=-1)


def build_memory(demos, params, feature=64, visual=True, synthesize=False, sources=None):
    """Path memory for a batch of equal-length demonstrations.

    ``visual=False`` zeroes the feature slot, keeping action and pose.
    With ``synthesize`` the features come from :func:`synthesize_features`
    using ``sources`` (defaults to the demos themselves) as source images.
    """
    J = len(demos[0])
    if any(len(d) != J for d in demos):
        raise ValueError("all demonstrations in a batch must have the same length")
    acts = np.stack([one_hot_actions(d.actions) for d in demos])
    deltas = np.stack([step_deltas(d.poses) for d in demos])
    ids = np.array([[int(a) for a in d.actions] for d in demos])
    if not visual:
        feats = G.Tensor(np.zeros((len(demos), J, feature)))
    elif synthesize:
        src = demos if sources is None else sources
        feats = synthesize_features(np.stack([d.observations for d in src]),
                                    [d.poses for d in src], [d.poses for d in demos], params)
    else:
        feats = phi(params, np.stack([d.observations for d in demos]))
    return PathMemory(acts, deltas, feats, ids)


def attention_weights(eta, J, span=0.0):
    """``exp(-|eta - j|)`` for j = 1..J; ``eta`` is a Tensor of shape [B]."""
    j = np.arange(1, J + 1, dtype=G.default_dtype())[None, :]
    diff = G.sub(eta.reshape((eta.shape[0], 1)), j)
    w = G.exp(G.neg(G.abs_(diff)))
    if span > 0:
        w = G.mul(w, (np.abs(diff.data) <= span).astype(w.data.dtype))
    return w


def attend(memory: PathMemory, eta, params, span=0.0):
    """Soft read of the memory centred at pointer ``eta`` (unnormalized weights)."""
    if memory.psi_cache is None:
        memory.psi_cache = psi(params, memory.entries())
    w = attention_weights(G.as_tensor(eta), memory.length, span)
    return G.weighted_sum(w, memory.psi_cache)


@dataclass
class ControllerState:
    h: G.Tensor
    eta: G.Tensor
    t: int = 0


def increment(b, constant=False):
    if constant:
        return G.Tensor(np.ones(b.shape))
    return G.add(G.tanh(b), 1.0)


def controller_step(state: ControllerState, mu, obs_feat, params, recurrent=True, constant_increment=False):
    """One pass of the recurrent controller; returns ``(new_state, logits, b)``."""
    x = G.concat([mu, obs_feat], axis=-1)
    if recurrent:
        h = G.gru_cell(state.h, x, params, prefix="pi.gru")
    else:
        h = G.tanh(G.dense(x, params["pi.ff.w"], params["pi.ff.b"]))
    logits = G.dense(h, params["pi.act.w"], params["pi.act.b"])
    b = G.dense(h, params["pi.inc.w"], params["pi.inc.b"])[..., 0]
    eta = G.add(state.eta, increment(b, constant_increment))
    return ControllerState(h, eta, state.t + 1), logits, b


# ---------------------------------------------------------------------------
# unified policy

@dataclass
class Policy:
    config: PolicyConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, kind="rpf", seed=0, **kw) -> Policy:
        cfg = PolicyConfig(kind=kind, **kw)
        return cls(cfg, init_params(cfg, seed))

    @property
    def kind(self):
        return self.config.kind

    def prepare(self, demos, sources=None) -> PathMemory:
        c = self.config
        if c.kind in ("open_loop", "gru"):
            return build_memory(demos, self.params, c.feature, visual=False)
        return build_memory(demos, self.params, c.feature, visual=c.kind != "rpf_nvm",
                            synthesize=c.synthesize, sources=sources)

    def initial_state(self, batch) -> ControllerState:
        return ControllerState(G.Tensor(np.zeros((batch, self.config.hidden))), G.Tensor(np.ones(batch)), 0)

    def step(self, memory: PathMemory, obs, state: ControllerState):
        """Returns ``(logits[B, 4], new_state, increments[B])`` from memory, scan and state only."""
        kind = self.kind
        B = memory.batch
        if kind == "open_loop":
            t = state.t
            ids = memory.action_ids[:, t] if t < memory.length else np.zeros(B, dtype=int)
            logits = np.full((B, N_ACTIONS), -10.0)
            logits[np.arange(B), ids] = 10.0
            eta = G.Tensor(state.eta.data + 1.0)
            return G.Tensor(logits), ControllerState(state.h, eta, t + 1), np.ones(B)
        f = phi(self.params, obs)
        if kind == "nn":
            return self._nn_step(memory, f, state)
        if kind == "gru":
            mu = G.Tensor(np.zeros((B, self.config.feature)))
        else:
            mu = attend(memory, state.eta, self.params, self.config.attention_span)
        new, logits, _ = controller_step(state, mu, f, self.params, recurrent=kind != "rpf_norec",
                                         constant_increment=kind == "rpf_const")
        return logits, new, new.eta.data - state.eta.data

    def _nn_step(self, memory, f, state):
        # cosine similarity against stored features; matched entries vote their actions
        def unit(x):
            return G.mul(x, G.power(G.add(G.sum_(G.mul(x, x), axis=-1, keepdims=True), 1e-6), -0.5))
        q = unit(f)  # [B, F]
        m = unit(memory.features)  # [B, J, F]
        sims = G.sum_(G.mul(m, q.reshape((q.shape[0], 1, q.shape[1]))), axis=-1)  # [B, J]
        w = G.softmax(G.mul(sims, self.params["nn.beta"]), axis=-1)  # [B, J]
        probs = G.weighted_sum(w, G.as_tensor(memory.actions))  # [B, 4]
        logits = G.log(G.add(probs, 1e-6))
        eta = G.Tensor(state.eta.data + 1.0)
        return logits, ControllerState(state.h, eta, state.t + 1), np.ones(memory.batch)


def act(policy: Policy, memory: PathMemory, obs, state: ControllerState, greedy=True, rng=None):
    """Single-episode convenience: returns ``(Action, new_state)``."""
    with G.no_grad():
        logits, new, _ = policy.step(memory, np.asarray(obs)[None] if np.ndim(obs) == 2 else obs, state)
    z = logits.data[0]
    if greedy:
        return Action(int(np.argmax(z))), new
    p = np.exp(z - z.max())
    p /= p.sum()
    return Action(int(rng.choice(N_ACTIONS, p=p))), new


def make_policy(kind, params=None, seed=0, **kw) -> Policy:
    cfg = PolicyConfig(kind=kind, **kw)
    return Policy(cfg, params if params is not None else init_params(cfg, seed))


def with_params(policy: Policy, params) -> Policy:
    return replace(policy, params=params)
