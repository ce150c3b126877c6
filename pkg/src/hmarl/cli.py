"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``sweep``, ``analyze``, ``oracle`` and
``replay``. Failures print one JSON line on stderr, for example::

    {"error": "InvalidInput", "exit": 3, "message": "..."}

Exit codes: 0 success, 2 usage, 3 input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli_w

from . import __version__
from .errors import BudgetExceeded, HmarlError, InvalidArgument, NumericFailure, ReplayDivergence, UpdateRejected

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

SCHEMA_HELP = """\
scenario file (TOML, schema = 1); every table is optional:
  schema = 1
  [room]      lo = [x, y, z], hi = [x, y, z]                       metres
  [ap]        position = [x, y, z]
  [limits]    theta_half_deg, phi_half_deg, grid_step
  [channel]   carrier_freq, tx_power (dBm), wall_loss (dB or "inf"),
              tile_gain_beamwidth_deg, aperture
  [env]       K, T, delta_max, episode_len, ue_lo, ue_hi, user_height,
              mobility, mobility_step, mobility_period, loc_error_sigma,
              reward_exponent, focal_init_mean, focal_init_cov_scale
  [[reflector]] mount_center, mount_normal, rows, cols, segments, pitch
  [training]  checkpoint_every, [training.ppo] ..., [training.alloc] ...
unknown keys are rejected."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _users(text: str) -> np.ndarray:
    """``x,y[,z];x,y[,z]`` into a ``(K, 2|3)`` array."""
    try:
        rows = [[float(v) for v in part.split(",")] for part in text.split(";") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad user list {text!r}") from None
    if not rows or len({len(r) for r in rows}) != 1 or len(rows[0]) not in (2, 3):
        raise argparse.ArgumentTypeError(f"users must look like 'x,y;x,y' or 'x,y,z;x,y,z', got {text!r}")
    return np.array(rows)


def build_parser() -> argparse.ArgumentParser:
    from .allocator import STRATEGIES
    from .harness import SWEEP_VALUES

    p = _Parser(prog="hmarl", description="Hierarchical focal-point control of tiled reflectors.",
                epilog=SCHEMA_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, desk=True):
        sp.add_argument("--scenario", type=Path, help="scenario TOML; the built-in default when omitted")
        if seed:
            sp.add_argument("--seed", type=int, help="run seed; a fresh one is drawn and printed when omitted")
        if desk:
            sp.add_argument("--desk", action="store_true", help="use the reduced-width desk-scale training preset")

    sp = sub.add_parser("train", help="train one strategy", epilog=SCHEMA_HELP,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.add_argument("--strategy", choices=STRATEGIES, default="allocator")
    sp.add_argument("--episodes", type=int, default=400)
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    sp.add_argument("--trace", action="store_true", help="write a replayable trace of the last episode")

    sp = sub.add_parser("eval", help="evaluate a checkpoint deterministically")
    common(sp, desk=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--timesteps", type=int, default=300)
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--no-mobility", action="store_true")
    sp.add_argument("--out-dir", type=Path, required=True)

    sp = sub.add_parser("sweep", help="train and evaluate a parameter sweep")
    common(sp, seed=False)
    sp.add_argument("--kind", choices=sorted(SWEEP_VALUES), required=True)
    sp.add_argument("--values", type=_float_list, help="comma-separated sweep values; the standard set when omitted")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    g.add_argument("--num-seeds", type=int, help="seeds 0..n-1")
    sp.add_argument("--strategy", choices=STRATEGIES, default="allocator")
    sp.add_argument("--episodes", type=int, default=400)
    sp.add_argument("--out-dir", type=Path, required=True)
    sp.add_argument("--cache-dir", type=Path)

    sp = sub.add_parser("analyze", help="dimensionality reduction table")
    sp.add_argument("--K", type=_int_list, required=True)
    sp.add_argument("--L", type=_int_list, required=True)
    sp.add_argument("--N", type=_int_list, required=True)
    sp.add_argument("--csv", type=Path, help="also write the table here")

    sp = sub.add_parser("oracle", help="brute-force best allocation and focal points")
    sp.add_argument("--scenario", type=Path)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, help="draw user positions from this seed")
    g.add_argument("--users", type=_users, help="explicit positions 'x,y;x,y'")
    sp.add_argument("--step", type=float, default=0.5, help="global grid step, metres")
    sp.add_argument("--refine", type=float, default=0.1, help="local refinement step; 0 disables")
    sp.add_argument("--max-evaluations", type=int, default=200_000_000)
    sp.add_argument("--out", type=Path, help="write the best configuration as a TOML overlay")

    sp = sub.add_parser("replay", help="re-simulate a trace and check its rewards")
    sp.add_argument("--scenario", type=Path)
    sp.add_argument("--trace", type=Path, required=True)
    return p


def _scenario(args):
    from .scenario import Scenario, load_scenario

    return load_scenario(args.scenario) if getattr(args, "scenario", None) else Scenario()


def _config(args, scen):
    from .harness import DESK_TRAINING, config_for

    return config_for(scen, DESK_TRAINING if args.desk else None)


def _seed(args, out) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    seed = int(np.random.SeedSequence().entropy % (2 ** 31))
    print(f"seed: {seed}", file=out)
    return seed


def _positive(name: str, value) -> None:
    if value is not None and value < 1:
        raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {value}")


def cmd_train(args, out) -> int:
    from .harness import train

    _positive("episodes", args.episodes)
    scen = _scenario(args)
    seed = _seed(args, out)
    res = train(scen, args.strategy, args.episodes, seed, out_dir=args.out_dir, cfg=_config(args, scen),
                resume=args.checkpoint, trace_last=args.trace)
    print(json.dumps({"strategy": res.trainer.strategy, "seed": res.trainer.seed, "episodes": res.trainer.episode,
                      "final_mean_reward": res.final_mean_reward(), "checkpoint": str(res.checkpoint)}), file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    from .harness import evaluate

    _positive("timesteps", args.timesteps)
    _positive("episodes", args.episodes)
    scen = _scenario(args)
    seed = _seed(args, out)
    res = evaluate(args.checkpoint, scen, timesteps=args.timesteps, seed=seed, out_dir=args.out_dir,
                   mobility=not args.no_mobility, episodes=args.episodes)
    print(json.dumps(res.summary), file=out)
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    from .harness import sweep

    _positive("episodes", args.episodes)
    _positive("num_seeds", args.num_seeds)
    scen = _scenario(args)
    seeds = args.seeds if args.seeds else list(range(args.num_seeds or 5))
    values = args.values
    if values is not None and args.kind in ("aperture", "reward_exponent", "users"):
        if any(v != int(v) for v in values):
            raise UsageError(f"--values for {args.kind} must be integers")
        values = [int(v) for v in values]
    _, summary = sweep(args.kind, scen, seeds, values=values, episodes=args.episodes, strategy=args.strategy,
                       cfg=_config(args, scen), out_dir=args.out_dir, cache_dir=args.cache_dir)
    for row in summary:
        print(json.dumps(row), file=out)
    return EXIT_OK


def cmd_analyze(args, out) -> int:
    from .analysis import complexity_table

    for name in ("K", "L", "N"):
        if not getattr(args, name) or min(getattr(args, name)) < 1:
            raise UsageError(f"--{name} needs integers >= 1")
    table = complexity_table(args.K, args.L, args.N)
    header = f"{'K':>4} {'L':>4} {'N':>4} {'eta':>12} {'d_eta_dN':>12} {'d_eta_dL':>12} {'d_eta_dK':>12}  regime"
    print(header, file=out)
    for pt in table:
        flag = " (saturated)" if pt.saturated else ""
        print(f"{pt.K:>4} {pt.L:>4} {pt.N:>4} {pt.eta:>12.6g} {pt.d_eta_dN:>12.5g} {pt.d_eta_dL:>12.5g} "
              f"{pt.d_eta_dK:>12.5g}  {pt.regime}{flag}", file=out)
    if args.csv:
        args.csv.parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as fh:
            rows = [pt.as_dict() for pt in table]
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def cmd_oracle(args, out) -> int:
    from .environment import HmaEnv
    from .oracle import best_allocation_exhaustive

    if not args.step > 0 or args.refine < 0:
        raise UsageError("--step must be positive and --refine non-negative")
    scen = _scenario(args)
    scene = scen.build()
    env = HmaEnv(scene, scen.env)
    if args.users is not None:
        if len(args.users) != scen.env.K:
            raise UsageError(f"--users lists {len(args.users)} users but the scenario has K={scen.env.K}")
        env.reset(0, users=args.users)
    else:
        env.reset(_seed(args, out))
    res = best_allocation_exhaustive(scene, env.users, args.step, args.refine or None, args.max_evaluations)
    overlay = res.overlay()
    overlay["oracle"]["users"] = [[float(x) for x in u] for u in env.users]
    print(json.dumps(overlay["oracle"]), file=out)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_bytes(tomli_w.dumps(overlay).encode())
    return EXIT_OK


def cmd_replay(args, out) -> int:
    from .oracle import replay

    scen = _scenario(args)
    rewards = replay(args.trace, scen)
    print(json.dumps({"steps": len(rewards), "divergences": 0}), file=out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "analyze": cmd_analyze,
            "oracle": cmd_oracle, "replay": cmd_replay}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, InvalidArgument)):
        return EXIT_USAGE
    if isinstance(exc, (NumericFailure, UpdateRejected, ReplayDivergence, BudgetExceeded, FloatingPointError)):
        return EXIT_NUMERIC
    # malformed files, missing paths and everything else the user supplied
    return EXIT_INPUT


def _report(exc: BaseException, code: int, err) -> None:
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": str(exc)}), file=err)


def main(argv=None, out=None, err=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(err)
        _report(exc, EXIT_USAGE, err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except (HmarlError, UsageError, OSError, FloatingPointError) as exc:
        code = exit_code_for(exc)
        _report(exc, code, err)
        return code


if __name__ == "__main__":
    sys.exit(main())
