"""``qfilter-sim`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .harness import RUNNERS, run_experiment
from .sde import SimulationError

DEFAULT_CONFIG = "spin-half-qnd"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfilter-sim", description="Quantum filter and projection filter experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fig1": "uncontrolled filter vs projection filter gap",
        "fig2": "gap under projection-based feedback",
        "fig3": "fidelity to the target under feedback",
        "bound": "averaged residual norm against its analytic bound",
        "exact": "stepped filter against the exact finite-dimensional solution",
        "filter": "full (and projection) filter on a configured model",
    }
    for name in RUNNERS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", default=DEFAULT_CONFIG, help="JSON config file or preset name (default: %(default)s)")
        p.add_argument("--eta", type=float)
        p.add_argument("--M", type=float)
        p.add_argument("--omega", type=float)
        p.add_argument("--T", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--traj", type=int, dest="n_traj")
        p.add_argument("--seed", type=int)
        p.add_argument("--scheme", choices=("euler", "milstein", "split"))
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("eta", "M", "omega", "T", "steps", "n_traj", "seed", "scheme", "out_dir")}
    overrides["experiment"] = args.command
    if args.out_dir is None:
        overrides["out_dir"] = f"out/{args.command}"
    try:
        cfg = load_config(args.config, overrides)
        out = run_experiment(cfg, workers=max(1, args.workers))
    except ConfigError as exc:
        return _fail("config", str(exc), 2, errors=exc.errors)
    except SimulationError as exc:
        return _fail("simulation", str(exc), 3, trajectory=exc.trajectory, step=exc.step)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    with open(out / "summary.json") as fh:
        sys.stdout.write(fh.read())
    return 0


if __name__ == "__main__":
    sys.exit(main())
