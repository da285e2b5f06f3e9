"""Command line entry point: ``python -m rpf <command>``.

Commands: gen, demo, train, eval, sweep, render, gradcheck. Each one that
writes outputs also writes ``manifest.json`` (config hash, seed, versions)
next to them. Set ``RPF_LOG`` to a logging level name to change verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import RunConfig
from .policy import ConfigError

log = logging.getLogger("rpf")


class CommandError(RuntimeError):
    pass


def versions():
    import numba
    import scipy
    return {"rpf": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(directory, command, cfg: RunConfig | None, seed, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "seed": seed, "versions": versions()}
    if cfg is not None:
        doc["config_hash"] = cfg.digest()
        doc["config"] = cfg.to_flat()
    doc.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = yaml.safe_load(value)
    if overrides:
        flat = cfg.to_flat()
        flat.update(overrides)
        cfg = RunConfig.from_flat(flat)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.workers is not None:
        kw["workers"] = args.workers
    if getattr(args, "out", None):
        kw["out"] = args.out
    return cfg.with_overrides(**kw) if kw else cfg


def _policy_for(args, cfg):
    from .policy import Policy
    from .train import load_policy

    kind = getattr(args, "policy", None)
    if kind == "open_loop":
        return Policy.create("open_loop"), cfg
    if not args.checkpoint:
        raise CommandError("this command needs --checkpoint DIR (or --policy open_loop)")
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise CommandError(f"no checkpoint at {ckpt} (expected {ckpt / 'manifest.json'})")
    policy, trained = load_policy(ckpt)
    # evaluation settings come from --config; the network from the checkpoint
    return policy, cfg.with_overrides(kind=policy.kind, synthesize=policy.config.synthesize,
                                      task=cfg.task if args.config else trained.task)


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args):
    from .envgen import generate_world
    world = generate_world(args.seed if args.seed is not None else 0)
    out = Path(args.out or "world.json")
    out.write_text(world.to_json())
    print(out)


def cmd_demo(args):
    from .envgen import reverse_demonstration, sample_demonstration
    from .sim import World
    cfg = load_config(args)
    if args.world:
        world = World.from_json(Path(args.world).read_text())
    else:
        from .envgen import generate_world
        world = generate_world(args.world_seed)
    demo = sample_demonstration(world, cfg.seed, length=cfg.J, min_clearance=cfg.clearance,
                                world_seed=args.world_seed if not args.world else -1)
    if cfg.task == "homing":
        demo = reverse_demonstration(demo, world)
    out = Path(args.out or "demo.jsonl")
    out.write_text(demo.to_jsonl())
    print(out)


def cmd_train(args):
    from .train import train
    cfg = load_config(args)
    out = Path(cfg.out)
    write_manifest(out, "train", cfg, cfg.seed)
    ckpt = train(cfg, out)
    print(ckpt)


def cmd_eval(args):
    from .eval import evaluate, sweep_setting, write_csv
    cfg = load_config(args)
    policy, cfg = _policy_for(args, cfg)
    setting = sweep_setting("noise", cfg.noise, task=cfg.task, noise=cfg.noise, J=cfg.J,
                            horizon=cfg.horizon, clearance=cfg.clearance)
    setting["r_demo"], setting["r_exec"] = cfg.r_demo, cfg.r_exec
    report, trials = evaluate(policy, cfg.trials, cfg.test_seeds, cfg.seed, cfg.workers, **setting)
    out = Path(cfg.out)
    write_csv(out / "metrics.csv", report.rows(""))
    write_manifest(out, "eval", cfg, cfg.seed, {"policy": policy.kind, "checkpoint": args.checkpoint})
    print(f"success_rate={report.success_rate:.3f} spl={report.spl:.3f} "
          f"median_norm_dist={report.median_norm_dist:.3f} n={report.n_trials}")


def cmd_sweep(args):
    from .eval import plot_sweep, sweep, write_csv
    from .policy import Policy
    cfg = load_config(args)
    policy, cfg = _policy_for(args, cfg)
    values = [float(v) for v in args.values.split(",")]
    base = dict(noise=cfg.noise, J=cfg.J, horizon=cfg.horizon, clearance=cfg.clearance)
    out = Path(cfg.out)
    curves = {}
    for pol in [policy] + ([Policy.create("open_loop")] if args.baseline and policy.kind != "open_loop" else []):
        res = sweep(pol, args.axis, values, cfg.trials, cfg.test_seeds, cfg.seed, cfg.workers, cfg.task, **base)
        rows = [r for v, rep in res for r in rep.rows(v)]
        write_csv(out / f"sweep_{args.axis}_{pol.kind}.csv", rows)
        curves[pol.kind] = res
    plot_sweep(out / f"sweep_{args.axis}.png", args.axis, curves)
    write_manifest(out, "sweep", cfg, cfg.seed, {"axis": args.axis, "values": values,
                                                "checkpoint": args.checkpoint})
    print(out)


def cmd_render(args):
    from .eval import make_episodes, render_topview, run_trials
    from .policy import Policy
    cfg = load_config(args)
    policy, cfg = _policy_for(args, cfg)
    ep = make_episodes(args.trial + 1, cfg.test_seeds, cfg.seed, task=cfg.task, J=cfg.J,
                       clearance=cfg.clearance, r_demo=cfg.r_demo, r_exec=cfg.r_exec)[-1]
    rollouts = []
    for pol in [policy, Policy.create("open_loop")] if policy.kind != "open_loop" else [policy]:
        trial = run_trials(pol, [ep], cfg.noise, cfg.horizon, cfg.seed, args.trial)[0]
        rollouts.append((pol.kind, trial.poses))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"topview_{args.trial}.svg"
    path.write_text(render_topview(ep.exec_world, ep.demo, rollouts))
    write_manifest(out, "render", cfg, cfg.seed, {"trial": args.trial, "checkpoint": args.checkpoint})
    print(path)


def cmd_gradcheck(args):
    from .train import controller_gradcheck
    dtype = np.float64 if args.precision == 64 else np.float32
    report = controller_gradcheck(dtype, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    print(f"max relative error {report.worst:.3e} (tolerance {report.tolerance:g})")
    if not report.ok:
        raise CommandError("gradient check failed")


COMMANDS = {"gen": cmd_gen, "demo": cmd_demo, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "render": cmd_render, "gradcheck": cmd_gradcheck}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel trial processes (results identical to 1)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = argparse.ArgumentParser(prog="rpf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a world as JSON")
    d = sub.add_parser("demo", parents=[common], help="record a demonstration as JSON lines")
    d.add_argument("--world", help="world JSON (default: generate from --world-seed)")
    d.add_argument("--world-seed", type=int, default=0)
    sub.add_parser("train", parents=[common], help="train a policy")
    for name, text in (("eval", "evaluate a policy"), ("sweep", "generalization sweep"),
                       ("render", "SVG top view of one trial")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoint")
        s.add_argument("--policy", choices=["open_loop"], help="evaluate the open-loop baseline instead")
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=["noise", "clearance", "length", "change"])
            s.add_argument("--values", required=True, help="comma separated axis values")
            s.add_argument("--baseline", action="store_true", help="also sweep the open-loop baseline")
        if name == "render":
            s.add_argument("--trial", type=int, default=0)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full controller")
    g.add_argument("--precision", type=int, choices=[32, 64], default=32)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("RPF_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, CommandError, FileNotFoundError) as e:
        print(f"rpf {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
