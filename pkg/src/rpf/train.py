"""Imitation learning on the policy's own rollouts, labelled by the distance field."""

from __future__ import annotations

import csv
import logging
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grad as G
from .config import RunConfig
from . import _kernels as K
from .envgen import N_HEADINGS, DistanceField, heading_bin
from .eval import Episode, make_episode, make_episodes, run_trials, success_rate
from .policy import N_ACTIONS, Policy, init_params
from .sim import Action, ContractError, NoiseSpec, World, move

log = logging.getLogger("rpf.train")

class TrainingError(RuntimeError):
    pass


class LabelError(ValueError):
    """The labelled pose cannot reach the goal; its episode is dropped."""


# ---------------------------------------------------------------------------
# labels and loss

def action_gains(world: World, pose, dist_field: DistanceField):
    """``Delta(a) = d(s) - d(s')`` for every action, Stay first.

    ``s`` is the lattice state holding ``pose`` and ``s'`` its noiseless
    successor on the lattice the field was built on, so the gains obey the
    field's own Bellman equation: away from the goal some action always gains
    exactly one step. A Forward with no free lattice edge leaves ``s`` unchanged.
    """
    i, j = world.cell_of(pose.x, pose.y)
    k = heading_bin(pose.theta)
    steps = dist_field.steps
    W, H, _ = steps.shape
    d = steps[i, j, k] if 0 <= i < W and 0 <= j < H else -1
    if d < 0:
        raise LabelError(f"pose {pose} cannot reach the goal")

    def gain(i2, j2, k2):
        v = steps[i2, j2, k2]
        return d - v if v >= 0 else -math.inf

    gains = np.zeros(N_ACTIONS)
    gains[Action.ROTATE_LEFT] = gain(i, j, (k + 1) % N_HEADINGS)
    gains[Action.ROTATE_RIGHT] = gain(i, j, (k - 1) % N_HEADINGS)
    if world.lattice_edges[i, j, k]:
        gains[Action.FORWARD] = gain(i + K.LATTICE_DX[k], j + K.LATTICE_DY[k], k)
    return gains


def good_action_mask(world: World, pose, dist_field: DistanceField) -> np.ndarray:
    """Boolean mask over actions that reduce the distance, and by more than Forward does.

    When nothing qualifies the label is the maximizer, Forward preferred on
    ties; away from the goal that is Forward itself. At the goal every action
    that keeps the agent there is good.
    """
    gains = action_gains(world, pose, dist_field)
    mask = (gains > gains[Action.FORWARD]) & (gains > 0)
    if not mask.any():
        best = gains == gains.max()
        if dist_field.at(pose) == 0:
            return best
        mask[Action.FORWARD if best[Action.FORWARD] else int(np.argmax(best))] = True
    return mask


def good_actions(world: World, pose, goal, dist_field: DistanceField) -> set:
    """Set form of :func:`good_action_mask`; ``goal`` is implied by ``dist_field``."""
    mask = good_action_mask(world, pose, dist_field)
    return {Action(int(i)) for i in np.flatnonzero(mask)}


def imitation_loss(logits, masks, valid=None):
    """Mean over episodes of the mean over steps of ``-log sum_{a in G_t} p_a``.

    ``logits`` is ``[T, B, 4]`` (or ``[T, 4]`` for one episode) and ``masks`` is the
    matching boolean good-action array. Episodes with ``valid[b] == False``
    are left out of the average.
    """
    logits = G.as_tensor(logits)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != logits.shape:
        raise ValueError(f"masks {masks.shape} do not match logits {logits.shape}")
    if not masks.any(axis=-1).all():
        raise ContractError("every step needs a non-empty good-action set")
    per_step = G.sub(G.logsumexp(logits, axis=-1), G.logsumexp(logits, axis=-1, mask=masks))
    T = masks.shape[0]
    if masks.ndim == 2:
        return G.mean(per_step)
    keep = np.ones(masks.shape[1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not keep.any():
        raise TrainingError("no valid episode in batch")
    w = np.broadcast_to(keep / (T * keep.sum()), masks.shape[:2])
    return G.sum_(G.mul(per_step, w.astype(per_step.data.dtype)))


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class EpisodeBatch:
    """One on-policy batch: ``logits [T, B, 4]`` on the tape plus labels and the visited poses."""
    episodes: list
    logits: G.Tensor
    masks: np.ndarray  # [T, B, 4]
    valid: np.ndarray  # [B]
    actions: np.ndarray  # [T, B]
    poses: list  # per episode, T + 1 poses


def _sample(logits, rng):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(len(p))[:, None]
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), N_ACTIONS - 1)


def rollout(policy: Policy, episodes, noise, horizon, rng) -> EpisodeBatch:
    """Run the policy's own sampled actions under noise, labelling every visited state.

    The policy is called with (memory, scan, state) only; ground-truth poses
    stay on this side of the loop and only feed the labeller.
    """
    from .eval import observe

    spec = NoiseSpec(level=noise)
    B = len(episodes)
    poses = [ep.demo.start for ep in episodes]
    trace = [[p] for p in poses]
    valid = np.ones(B, dtype=bool)
    masks = np.ones((horizon, B, N_ACTIONS), dtype=bool)
    chosen = np.zeros((horizon, B), dtype=np.int64)
    memory = policy.prepare([ep.demo for ep in episodes])
    state = policy.initial_state(B)
    steps = []
    for t in range(horizon):
        logits, state, _ = policy.step(memory, observe(episodes, poses), state)
        steps.append(logits)
        acts = _sample(logits.data, rng)
        chosen[t] = acts
        for b, ep in enumerate(episodes):
            if valid[b]:
                try:
                    masks[t, b] = good_action_mask(ep.exec_world, poses[b], ep.field)
                except LabelError:
                    valid[b] = False
                    masks[:, b] = True
            poses[b] = move(ep.exec_world, poses[b], Action(int(acts[b])), spec, rng)[0]
            trace[b].append(poses[b])
    return EpisodeBatch(episodes, G.stack(steps, axis=0), masks, valid, chosen, trace)


class EpisodePool:
    """A rolling pool of training episodes.

    Demonstration sampling costs more than a training step, so batches are
    drawn from a pool and one entry is replaced per iteration.
    """

    def __init__(self, cfg: RunConfig, size=None, seed=0):
        self.cfg = cfg
        self.size = size or cfg.pool_size
        self.counter = 0
        self.rng = np.random.default_rng([int(seed), 0xB001])
        self.items = [self._fresh() for _ in range(self.size)]

    def _fresh(self) -> Episode:
        c = self.cfg
        lo, hi = c.train_seeds
        while True:
            self.counter += 1
            ws = int(self.rng.integers(lo, hi))
            ep = make_episode(ws, [int(c.seed), 0xDE30, self.counter], task=c.task, J=c.J,
                              clearance=c.clearance, r_demo=c.r_demo, r_exec=c.r_exec)
            if ep is not None:
                return ep

    def draw(self, rng, n):
        return [self.items[i] for i in rng.choice(self.size, n, replace=False)]

    def refresh(self, rng, count=1):
        for _ in range(count):
            self.items[int(rng.integers(self.size))] = self._fresh()


def clip_grads(grads: dict, max_norm=5.0):
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# training loop

def validation_episodes(cfg: RunConfig):
    return make_episodes(cfg.val_trials, cfg.val_seeds, root_seed=cfg.seed, task=cfg.task,
                         J=cfg.J, clearance=cfg.clearance, r_demo=cfg.r_demo, r_exec=cfg.r_exec)


def learning_rate(cfg: RunConfig, it):
    """Cosine decay from ``cfg.lr`` at iteration 1 to ``cfg.lr_final`` at the last."""
    frac = (it - 1) / max(cfg.iterations - 1, 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))


def train(cfg: RunConfig, out=None, max_seconds=None) -> Path:
    """Train one policy and return its checkpoint directory (``<out>/checkpoint``).

    Writes ``metrics.csv`` (iteration, loss, val_success) beside it. On a
    non-finite loss training stops, the last good checkpoint stays in place
    and :class:`TrainingError` is raised.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    policy = Policy(cfg.policy, init_params(cfg.policy, cfg.seed))
    params = policy.params
    adam = G.AdamState(lr=cfg.lr)
    pool = EpisodePool(cfg, seed=cfg.seed)
    val_eps = validation_episodes(cfg) if cfg.val_every > 0 and cfg.val_trials > 0 else []
    meta = {"config": cfg.to_flat(), "iteration": 0}
    G.save_checkpoint(ckpt, params, meta)
    fh = (out / "metrics.csv").open("w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["iteration", "loss", "val_success"])
    t0 = time.time()
    try:
        for it in range(1, cfg.iterations + 1):
            rng = np.random.default_rng([int(cfg.seed), it])
            episodes = pool.draw(rng, cfg.batch)
            for p in params.values():
                p.grad = None
            batch = rollout(policy, episodes, cfg.noise, cfg.horizon, rng)
            if not batch.valid.any():
                pool.refresh(rng)
                continue
            loss = imitation_loss(batch.logits, batch.masks, batch.valid)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at iteration {it}; last good checkpoint kept at {ckpt}")
            loss.backward()
            grads, _ = clip_grads({n: p.grad for n, p in params.items() if p.grad is not None})
            adam.lr = learning_rate(cfg, it)
            G.adam_step(params, grads, adam)
            pool.refresh(rng)
            last = it == cfg.iterations or (max_seconds is not None and time.time() - t0 > max_seconds)
            val = ""
            if val_eps and (it % cfg.val_every == 0 or last):
                val = f"{success_rate(run_trials(policy, val_eps, cfg.noise, cfg.horizon, seed=cfg.seed)):.4f}"
                log.info("iter %d loss %.4f val_success %s (%.0fs)", it, value, val, time.time() - t0)
            writer.writerow([it, f"{value:.6f}", val])
            if it % 50 == 0:
                fh.flush()
            if it % cfg.checkpoint_every == 0 or last:
                if not all(np.isfinite(p.data).all() for p in params.values()):
                    raise TrainingError(f"non-finite parameters at iteration {it}; last good checkpoint kept at {ckpt}")
                meta["iteration"] = it
                tmp = out / "checkpoint.tmp"
                G.save_checkpoint(tmp, params, meta)
                shutil.rmtree(ckpt, ignore_errors=True)
                tmp.rename(ckpt)
            if last:
                break
    finally:
        fh.close()
    return ckpt


def load_policy(checkpoint) -> tuple[Policy, RunConfig]:
    params, meta = G.load_checkpoint(checkpoint)
    cfg = RunConfig.from_flat(meta["config"])
    return Policy(cfg.policy, params), cfg


# ---------------------------------------------------------------------------
# gradient check on the full controller

def replay_loss(policy: Policy, demos, observations, masks):
    """Imitation loss of the policy run over a fixed scan sequence ``[T, B, 32, 5]``.

    Teacher-forced (no action sampling), so it is a smooth function of the
    parameters and suitable for finite differences.
    """
    memory = policy.prepare(demos)
    state = policy.initial_state(len(demos))
    steps = []
    for obs in observations:
        logits, state, _ = policy.step(memory, obs, state)
        steps.append(logits)
    return imitation_loss(G.stack(steps, axis=0), masks)


def controller_gradcheck(dtype=np.float32, seed=0, steps=4, batch=2, max_entries=6):
    """Check backprop through encoder, memory, attention, controller, synthesis and loss.

    Analytic gradients (32- or 64-bit) are compared with long-double central
    differences.
    """
    from .config import RunConfig
    from .eval import observe

    cfg = RunConfig(task="homing", kind="rpf", synthesize=True, J=8, horizon=steps)
    with G.using_dtype(dtype):
        episodes = []
        k = 0
        while len(episodes) < batch:
            ep = make_episode(50000 + k, [seed, k], task="homing", J=cfg.J, clearance=0.6)
            k += 1
            if ep is not None:
                episodes.append(ep)
        policy = Policy(cfg.policy, init_params(cfg.policy, seed))
        rng = np.random.default_rng(seed)
        batch_ = rollout(policy, episodes, 0.2, steps, rng)
        obs = [observe(episodes, [tr[t] for tr in batch_.poses]) for t in range(steps)]
        demos = [ep.demo for ep in episodes]
        # relu kinks sit close to some entries, so steps from 1e-3 down to 1e-7
        # are tried; long double keeps rounding small even at the finest one
        return G.grad_check(lambda: replay_loss(policy, demos, obs, batch_.masks), policy.params,
                            tolerance=1e-3 if dtype == np.float32 else 1e-7, h=1e-3, ladder=5,
                            max_entries=max_entries, seed=seed, fd_dtype=np.longdouble, stencil=4)
