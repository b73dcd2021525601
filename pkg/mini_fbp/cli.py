import argparse
import asyncio
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import parse_config, parse_literal
from .exceptions import FreeBoundaryError, ParseError
from .field_io import read_field
from .pipeline import Pipeline, oracle_report
from .scenarios import SCENARIOS, expectation_for, get_scenario


def _number(text):
    value = parse_literal(text)
    if isinstance(value, (bool, str, list)):
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    return float(value)


def _point(text):
    value = parse_literal(text)
    return [float(v) for v in (value if isinstance(value, list) else [value])]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--scenario", choices=sorted(SCENARIOS), help="registered scenario")
    source.add_argument("--config", help="INI configuration file")
    common.add_argument("--h", type=_number, help="cell size, e.g. 1/128")
    common.add_argument("--seed", type=int, help="base RNG seed")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--box", type=_number, help="initial box half-width")
    common.add_argument("--multistart", type=int, help="number of replicas")
    common.add_argument("--force", action="store_true", help="solve inadmissible problems")
    common.add_argument("--strict", action="store_true", help="treat inconclusive verdicts as failures")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="fb", description="Volume-constrained free boundary solver")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="minimize and analyse")
    analyze = sub.add_parser("analyze", parents=[common], help="diagnostics of a stored field")
    analyze.add_argument("--in", dest="field", required=True, help="FBGRID1 file")
    analyze.add_argument("--neumann", action="store_true", help="write the Neumann residual report")
    weiss = sub.add_parser("weiss", parents=[common], help="blow-up analysis of a stored field")
    weiss.add_argument("--in", dest="field", required=True, help="FBGRID1 file")
    weiss.add_argument("--point", type=_point, action="append", help="boundary point x,y[,z]")
    compact = sub.add_parser("compact", parents=[common], help="periodic compaction of a stored field")
    compact.add_argument("--in", dest="field", required=True, help="FBGRID1 file")
    oracle = sub.add_parser("oracle", parents=[common], help="print closed-form references")
    oracle.add_argument("--dim", type=int, default=2, choices=(1, 2, 3))
    oracle.add_argument("--volume", type=_number, default=_number("pi"))
    sub.add_parser("validate", parents=[common], help="admissibility audit only")
    sweep = sub.add_parser("sweep", parents=[common], help="run several configurations concurrently")
    sweep.add_argument("configs", nargs="+", help="INI files or scenario names")
    sweep.add_argument("--replicas", type=int, default=1, help="seeds per configuration")
    return parser


def load_run(args):
    """Resolves --scenario/--config and applies the command-line overrides.

    Returns:
        tuple: (RunConfig, Expectation).
    """
    if args.config:
        run = parse_config(args.config)
        expect = expectation_for(run)
    else:
        scenario = get_scenario(args.scenario or "serrin_torsion")
        run, expect = scenario.config(), scenario.expect
    overrides = {
        "h": args.h,
        "seed": args.seed,
        "box_radius": args.box,
        "multistart": args.multistart,
        "force": True if args.force else None,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        run.solver = replace(run.solver, **overrides)
        run.raw.setdefault("solver", {}).update(overrides)
    return run, expect


def _solve_one(source, out_dir, seed, strict):
    if source in SCENARIOS:
        scenario = get_scenario(source)
        run, expect = scenario.config(), scenario.expect
    else:
        run = parse_config(source)
        expect = expectation_for(run)
    run.solver = replace(run.solver, seed=seed)
    run.raw.setdefault("solver", {})["seed"] = seed
    pipeline = Pipeline(out_dir, strict=strict)
    try:
        code = pipeline.process_command("solve", run, expect=expect)
    except FreeBoundaryError as e:
        logging.error(f"{source} (seed {seed}) failed: {e}")
        return 1, [(type(e).__name__, str(e))]
    return code, pipeline.failures()


async def run_sweep(sources, out_dir, replicas=1, base_seed=0, strict=False, threads=None):
    """
    Solves every source with `replicas` seeds, at most `threads` at a time.

    Args:
        sources (list): Config paths or scenario names.
        out_dir (str): Parent directory; each run writes to <stem>-seed<k>.
        replicas (int): Seeds per source.
        base_seed (int): First seed.
        strict (bool): Treat inconclusive verdicts as failures.
        threads (int | None): Concurrency cap, FB_THREADS or the CPU count when None.

    Returns:
        dict: (source, seed) to (exit code, failures).
    """
    threads = threads or int(os.environ.get("FB_THREADS", os.cpu_count() or 1))
    semaphore = asyncio.Semaphore(max(1, threads))

    async def one(source, seed):
        stem = os.path.splitext(os.path.basename(source))[0]
        async with semaphore:
            logging.info(f"Sweep: starting {stem} seed {seed}")
            return await asyncio.to_thread(
                _solve_one, source, os.path.join(out_dir, f"{stem}-seed{seed}"), seed, strict
            )

    jobs = [(s, base_seed + k) for s in sources for k in range(replicas)]
    results = await asyncio.gather(*(one(s, seed) for s, seed in jobs))
    return dict(zip(jobs, results))


def _report(failures):
    for name, reason in failures:
        print(f"FAIL {name}: {reason}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "oracle":
            for key, value in oracle_report(args.dim, args.volume):
                print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
            return 0
        if args.command == "sweep":
            results = asyncio.run(
                run_sweep(args.configs, args.out, args.replicas, args.seed or 0, args.strict)
            )
            code = 0
            for (source, seed), (status, failures) in results.items():
                _report((f"{source}[seed {seed}] {name}", reason) for name, reason in failures)
                code = max(code, status)
            return code

        run, expect = load_run(args)
        pipeline = Pipeline(args.out, strict=args.strict)
        kwargs = {"expect": expect}
        if args.command in ("analyze", "weiss", "compact"):
            kwargs["field"] = read_field(args.field)
        if args.command == "analyze":
            kwargs["neumann"] = args.neumann
        if args.command == "weiss" and args.point:
            kwargs["points"] = np.asarray(args.point)
        code = pipeline.process_command(args.command, run, **kwargs)
        _report(pipeline.failures())
        return code
    except ParseError as e:
        logging.error(f"Configuration error: {e}")
        _report([(type(e).__name__, str(e))])
        return 2
    except FreeBoundaryError as e:
        logging.error(f"Run failed: {e}")
        _report([(type(e).__name__, str(e))])
        return 1


if __name__ == "__main__":
    sys.exit(main())
