"""Trial harness, navigation metrics, bootstrap intervals, sweeps and top-view SVGs."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import grad as G
from .envgen import (DistanceField, SamplingError, distance_field, generate_world,
                     reverse_demonstration, sample_demonstration)
from .sim import Action, NoiseSpec, World, apply_change, move, render_poses

SWEEP_AXES = ("noise", "clearance", "length", "change")
METRICS = ("success_rate", "spl", "median_norm_dist")
HARD_CLEARANCE = 0.2


def trial_rng(root_seed, index):
    """Per-trial generator; depends only on (root seed, trial index), never on scheduling."""
    return np.random.default_rng([int(root_seed), int(index)])


# ---------------------------------------------------------------------------
# episodes

@lru_cache(maxsize=256)
def cached_world(seed) -> World:
    return generate_world(seed)


def change_rng(world_seed):
    # the same stream for every r, so removal sets are nested across r values
    return np.random.default_rng([int(world_seed), 0x5EED])


@dataclass(eq=False)
class Episode:
    """Everything needed to run one trial; ``demo`` is what the policy receives."""
    world_seed: int
    exec_world: World
    demo: object
    field: DistanceField
    d0: float
    task: str = "following"


def make_episode(world_seed, episode_seed, task="following", J=30, clearance=0.6,
                 r_demo=0.0, r_exec=0.0) -> Episode | None:
    """Build a trial, or return None if the world admits no such demonstration.

    The demonstration is recorded in the world with removal probability
    ``r_demo``; execution happens with ``r_exec``. When they differ, start and
    goal are required to be clear in the world with every object present so
    both variants can host the endpoints.
    """
    full = cached_world(int(world_seed))
    demo_world = apply_change(full, r_demo, change_rng(world_seed)) if r_demo > 0 else full
    exec_world = apply_change(full, r_exec, change_rng(world_seed)) if r_exec > 0 else full
    anchor = full if r_demo != r_exec else None
    try:
        demo = sample_demonstration(demo_world, episode_seed, length=J, min_clearance=clearance,
                                    anchor=anchor, max_tries=20, world_seed=int(world_seed),
                                    change_r=r_demo)
    except SamplingError:
        return None
    if task == "homing":
        demo = reverse_demonstration(demo, demo_world)
    if exec_world.collides(demo.start):
        return None
    fld = distance_field(exec_world, demo.goal)
    d0 = fld.at(demo.start)
    if not math.isfinite(d0) or d0 <= 0:
        return None
    return Episode(int(world_seed), exec_world, demo, fld, d0, task)


def make_episodes(n, seed_range, root_seed=0, **kw):
    """``n`` feasible episodes; trial k uses world ``lo + k`` (wrapping) and seed ``(root, k)``.

    Infeasible worlds are skipped, so the k-th episode is fixed by the
    arguments alone.
    """
    lo, hi = seed_range
    out = []
    k = 0
    while len(out) < n:
        if k >= 20 * n + 100:
            raise SamplingError(f"could only build {len(out)} of {n} episodes")
        ep = make_episode(lo + k % (hi - lo), [int(root_seed), k], **kw)
        if ep is not None:
            out.append(ep)
        k += 1
    return out


# ---------------------------------------------------------------------------
# trials

@dataclass
class TrialResult:
    d0: float
    df: float
    p: int  # executed non-Stay actions
    l: float  # shortest path length, steps
    success: bool
    collisions: int = 0
    poses: list = field(default_factory=list, repr=False)
    actions: list = field(default_factory=list, repr=False)

    @property
    def spl_term(self):
        return spl_term(self.success, self.l, self.p)


def success_threshold(d0):
    return max(2.0, 0.1 * d0)


def is_success(d0, df):
    return df <= success_threshold(d0)


def spl_term(success, l, p):
    return float(success) * l / max(p, l) if l > 0 else float(success)


def spl(trials):
    if not trials:
        return 0.0
    return float(np.mean([spl_term(t.success, t.l, t.p) for t in trials]))


def success_rate(trials):
    return float(np.mean([t.success for t in trials])) if trials else 0.0


def median_norm_dist(trials):
    return float(np.median([t.df / t.d0 for t in trials])) if trials else float("nan")


def shortest_length(ep):
    """Shortest path under the demonstration's clearance constraint (its planned move count)."""
    return float(ep.demo.meta.get("plan_length", len(ep.demo) - 1) or ep.d0)


def observe(episodes, poses):
    return np.concatenate([render_poses(ep.exec_world, [p]) for ep, p in zip(episodes, poses)])


def run_trials(policy, episodes, noise, horizon=40, seed=0, first_index=0) -> list[TrialResult]:
    """Greedy batched rollouts. Trial ``i`` draws noise from ``trial_rng(seed, first_index + i)``.

    The policy only ever receives the path memory, the rendered scan and its own state.
    """
    spec = NoiseSpec(level=noise)
    rngs = [trial_rng(seed, first_index + i) for i in range(len(episodes))]
    poses = [ep.demo.start for ep in episodes]
    trajs = [[p] for p in poses]
    acts = [[] for _ in episodes]
    hits = [0] * len(episodes)
    with G.no_grad():
        memory = policy.prepare([ep.demo for ep in episodes])
        state = policy.initial_state(len(episodes))
        for _ in range(horizon):
            logits, state, _ = policy.step(memory, observe(episodes, poses), state)
            choice = np.argmax(logits.data, axis=1)
            for i, ep in enumerate(episodes):
                a = Action(int(choice[i]))
                poses[i], blocked = move(ep.exec_world, poses[i], a, spec, rngs[i])
                hits[i] += blocked
                trajs[i].append(poses[i])
                acts[i].append(a)
    out = []
    for i, ep in enumerate(episodes):
        df = ep.field.at(poses[i])
        p = sum(a != Action.STAY for a in acts[i])
        out.append(TrialResult(ep.d0, df, p, shortest_length(ep), is_success(ep.d0, df), hits[i], trajs[i], acts[i]))
    return out


def run_trial(world_exec, demo, policy, noise, horizon=40, seed=0) -> TrialResult:
    """Single trial from ``demo.start`` toward ``demo.goal`` in ``world_exec``."""
    fld = distance_field(world_exec, demo.goal)
    ep = Episode(demo.world_seed, world_exec, demo, fld, fld.at(demo.start))
    if not ep.d0 > 0:
        raise ValueError("trial must start away from the goal (d0 > 0)")
    return run_trials(policy, [ep], noise, horizon, seed)[0]


def _run_chunk(args):
    policy, episodes, noise, horizon, seed, first = args
    return run_trials(policy, episodes, noise, horizon, seed, first)


def run_trials_parallel(policy, episodes, noise, horizon=40, seed=0, workers=1, chunk=100):
    """Same results as :func:`run_trials`, split over processes when ``workers > 1``."""
    if workers <= 1:
        out = []
        for s in range(0, len(episodes), chunk):
            out += run_trials(policy, episodes[s:s + chunk], noise, horizon, seed, s)
        return out
    jobs = [(policy, episodes[s:s + chunk], noise, horizon, seed, s) for s in range(0, len(episodes), chunk)]
    with ProcessPoolExecutor(workers) as ex:
        return [t for part in ex.map(_run_chunk, jobs) for t in part]


# ---------------------------------------------------------------------------
# statistics

def bootstrap_ci(values, metric_fn=np.mean, B=1000, level=0.95, seed=0):
    """Percentile bootstrap interval of ``metric_fn`` over resamples of ``values``."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return (float("nan"), float("nan"))
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(values), size=(B, len(values)))
    stats = np.array([metric_fn(values[row]) for row in idx])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    est = metric_fn(values)
    # percentile intervals can miss the estimate by rounding on degenerate samples
    return (float(min(lo, est)), float(max(hi, est)))


@dataclass
class MetricsReport:
    success_rate: float
    spl: float
    median_norm_dist: float
    ci: dict  # metric -> (low, high)
    n_trials: int

    @classmethod
    def from_trials(cls, trials, B=1000, seed=0) -> MetricsReport:
        succ = np.array([t.success for t in trials], dtype=float)
        terms = np.array([t.spl_term for t in trials])
        norm = np.array([t.df / t.d0 for t in trials])
        ci = {"success_rate": bootstrap_ci(succ, np.mean, B, seed=seed),
              "spl": bootstrap_ci(terms, np.mean, B, seed=seed),
              "median_norm_dist": bootstrap_ci(norm, np.median, B, seed=seed)}
        return cls(float(succ.mean()), float(terms.mean()), float(np.median(norm)), ci, len(trials))

    def rows(self, axis_value=""):
        return [{"axis_value": axis_value, "metric": m, "estimate": getattr(self, m),
                 "ci_low": self.ci[m][0], "ci_high": self.ci[m][1], "n": self.n_trials} for m in METRICS]


def write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis_value", "metric", "estimate", "ci_low", "ci_high", "n"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


# ---------------------------------------------------------------------------
# sweeps

def sweep_setting(axis, value, task="following", noise=0.2, J=30, horizon=40, clearance=0.6):
    """Episode and rollout settings for one point of a generalization sweep."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    s = {"task": task, "noise": noise, "J": J, "horizon": horizon, "clearance": clearance,
         "r_demo": 0.0, "r_exec": 0.0}
    if axis == "noise":
        s["noise"] = float(value)
    elif axis == "clearance":
        s["clearance"] = float(value)
    elif axis == "length":
        s["J"] = int(value)
        s["horizon"] = int(round(horizon * int(value) / J))  # keep the horizon/length ratio
    else:
        s["r_demo"], s["r_exec"] = 0.5, float(value)
    return s


def evaluate(policy, n_trials, seed_range, root_seed=0, workers=1, B=1000, **setting):
    """Build episodes for ``setting`` and return ``(MetricsReport, trials)``."""
    noise, horizon = setting.pop("noise"), setting.pop("horizon")
    episodes = make_episodes(n_trials, seed_range, root_seed, **setting)
    trials = run_trials_parallel(policy, episodes, noise, horizon, root_seed, workers)
    return MetricsReport.from_trials(trials, B, root_seed), trials


def sweep(policy, axis, values, n_trials=500, seed_range=(20000, 30000), root_seed=0, workers=1,
          task="following", **base):
    """Evaluate without retraining at each value of ``axis``; returns ``[(value, MetricsReport)]``."""
    out = []
    for v in values:
        s = sweep_setting(axis, v, task=task, **base)
        report, _ = evaluate(policy, n_trials, seed_range, root_seed, workers, **s)
        out.append((v, report))
    return out


def plot_sweep(path, axis, results_by_policy: dict):
    """Success-rate curves with CI bands, one line per policy."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, results in results_by_policy.items():
        xs = [v for v, _ in results]
        ys = [r.success_rate for _, r in results]
        lo = [r.ci["success_rate"][0] for _, r in results]
        hi = [r.ci["success_rate"][1] for _, r in results]
        ax.plot(xs, ys, marker="o", label=name, color=STROKES.get(name, None))
        ax.fill_between(xs, lo, hi, alpha=0.2, color=STROKES.get(name, None))
    ax.set_xlabel(axis)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# top view

STROKES = {"rpf": "#d62728", "open_loop": "#1f77b4", "reference": "#2ca02c"}
_OBJECT_FILL = {"A": "#ff9f1c", "B": "#8e44ad"}


def render_topview(world: World, demo, rollouts=(), px=8) -> str:
    """SVG 1.1 top view: walls gray, objects by class, reference path, rollout polylines.

    ``rollouts`` is a sequence of ``(policy_name, poses)``; each becomes one
    polyline with CSS class ``rollout <policy_name>``.
    """
    W, H = world.shape
    scale = px / world.cell

    def xy(p):
        return f"{p.x * scale:.2f},{(H * px - p.y * scale):.2f}"

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W * px}" height="{H * px}" '
           f'viewBox="0 0 {W * px} {H * px}">',
           "<style>polyline{fill:none;stroke-width:2}"
           + "".join(f".{k}{{stroke:{v}}}" for k, v in sorted(STROKES.items()))
           + ".rollout{stroke-opacity:0.8}</style>",
           f'<rect width="{W * px}" height="{H * px}" fill="#ffffff"/>', '<g class="walls" fill="#808080">']
    for i, j in np.argwhere(world.walls):
        out.append(f'<rect x="{i * px}" y="{(H - 1 - j) * px}" width="{px}" height="{px}"/>')
    out.append("</g>")
    for ob in world.objects:
        out.append(f'<g class="object class-{escape(ob.cls)}" fill="{_OBJECT_FILL.get(ob.cls, "#444")}">')
        for i, j in ob.cells:
            out.append(f'<rect x="{i * px}" y="{(H - 1 - j) * px}" width="{px}" height="{px}"/>')
        out.append("</g>")
    if demo is not None:
        out.append(f'<polyline class="reference" stroke-dasharray="4,3" points="{" ".join(xy(p) for p in demo.poses)}"/>')
        s, g = demo.start, demo.goal
        out.append(f'<circle class="start" cx="{xy(s).split(",")[0]}" cy="{xy(s).split(",")[1]}" r="{px * 0.6}" fill="#2ca02c"/>')
        out.append(f'<circle class="goal" cx="{xy(g).split(",")[0]}" cy="{xy(g).split(",")[1]}" r="{px * 0.6}" fill="none" stroke="#2ca02c"/>')
    for name, poses in rollouts:
        cls = escape(str(name))
        out.append(f'<polyline class="rollout {cls}" points="{" ".join(xy(p) for p in poses)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
