"""Command line entry point: ``uavirs gen-expert | train | run | sweep``.

Set UAVIRS_LOG to DEBUG, INFO or WARNING (default) for log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import imitation, runner
from .scenario import ConfigError, default_scenario, load_scenario_file

log = logging.getLogger("uavirs")


def _scenario(args):
    return load_scenario_file(args.config) if args.config else default_scenario()


def _out_path(path, default_name):
    p = Path(path)
    if p.suffix:
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
    p.mkdir(parents=True, exist_ok=True)
    return p / default_name


def cmd_gen_expert(args):
    sc = _scenario(args)
    cfg = sc.learning
    rng = np.random.default_rng(args.seed)
    starts = imitation.random_starts(sc, args.starts or cfg.expert_starts, rng)
    data = imitation.generate_expert(sc, starts, args.slots or cfg.expert_slots)
    out = _out_path(args.out, "expert.csv")
    imitation.save_transitions(out, data)
    print(f"wrote {len(data)} expert transitions to {out}")


def cmd_train(args):
    sc = _scenario(args)
    expert = imitation.load_transitions(args.expert)
    res = imitation.train(sc, expert, args.seed, online_steps=args.online_steps)
    out = _out_path(args.out, "q.json")
    imitation.save_q(out, res.q)
    print(f"trained {res.grad_steps} gradient steps over {res.env_steps} online transitions; "
          f"wrote {out}")


def _load_model(args, algos):
    if any(a in ("aisle", "fsd") for a in algos):
        if not args.model:
            raise SystemExit("error: --model is required for aisle and fsd")
        return imitation.load_q(args.model)
    return None


def cmd_run(args):
    sc = _scenario(args)
    q = _load_model(args, [args.algo])
    res = runner.run_algorithm(args.algo, sc, q, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.algo}_seed{args.seed}"
    runner.write_episode(res, out / f"{stem}.csv", out / f"{stem}.json")
    print(json.dumps(runner.episode_summary(res)))


def _parse_values(axis, text):
    if axis == "start":
        out = []
        for chunk in text.split(";"):
            xyz = [float(v) for v in chunk.split(",")]
            if len(xyz) != 3:
                raise SystemExit("error: start values are x,y,z triples separated by ';'")
            out.append(tuple(xyz))
        return out
    conv = float if axis == "power" else int
    return [conv(v) for v in text.split(",")]


def cmd_sweep(args):
    sc = _scenario(args)
    algos = args.algorithms.split(",")
    q = _load_model(args, algos)
    values = _parse_values(args.axis, args.values)
    seeds = list(range(args.seed, args.seed + args.seeds))
    table = runner.sweep(sc, args.axis, values, seeds, q=q, algorithms=algos)
    out = _out_path(args.out, f"sweep_{args.axis}.csv")
    out.write_text(table.to_csv())
    for row in table.summary():
        print(json.dumps(row, default=str))


def build_parser():
    ap = argparse.ArgumentParser(prog="uavirs", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="scenario JSON (defaults to the built-in scenario)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output file or directory")

    p = sub.add_parser("gen-expert", help="roll out the exhaustive expert")
    common(p)
    p.add_argument("--starts", type=int, help="number of random start points")
    p.add_argument("--slots", type=int, help="slots per start")
    p.set_defaults(func=cmd_gen_expert)

    p = sub.add_parser("train", help="train the association policy")
    common(p)
    p.add_argument("--expert", required=True, help="expert transitions CSV")
    p.add_argument("--online-steps", type=int, help="online steps after the buffer gate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run one episode")
    common(p)
    p.add_argument("--algo", choices=runner.ALGORITHMS, required=True)
    p.add_argument("--model", help="Q-function checkpoint (aisle, fsd)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one scenario parameter")
    common(p)
    p.add_argument("--axis", choices=("elements", "power", "slots", "start"), required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated values; for start, x,y,z triples separated by ';'")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--algorithms", default=",".join(runner.ALGORITHMS))
    p.add_argument("--model", help="Q-function checkpoint (aisle, fsd)")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    level = os.environ.get("UAVIRS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
