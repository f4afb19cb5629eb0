"""Command line entry point: ``se2nav run | bench | mapbench | export-terrain``.

Exit status is 0 when the command completes (failed runs included) and 2 for
configuration errors such as missing files or invalid keys.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .harness import (PRESETS, BatchConfig, benchmark, export_throughput, is_monotone, load_batch, run_scenario,
                      throughput_bench)
from .scenario import ConfigError, Scenario, build_terrain, load_scenario

OUT_DIR_ENV = "SE2NAV_OUT_DIR"
DEFAULT_OUT_DIR = "se2nav_out"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out-dir", default=None,
                   help=f"output directory (default: ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the compiled kernels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="se2nav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log each planning cycle")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario in closed loop")
    p.add_argument("scenario", help="scenario YAML file")
    _common(p)

    p = sub.add_parser("bench", help="sample start/goal pairs on generated terrains and run them all")
    p.add_argument("batch", help="batch YAML file")
    p.add_argument("--trials", type=int, required=True, help="start/goal pairs per terrain")
    _common(p)

    p = sub.add_parser("mapbench", help="time the full mapping update over map sizes and yaw bins")
    p.add_argument("--sizes", type=float, nargs="+", required=True, help="map side lengths [m]")
    p.add_argument("--yaws", type=int, nargs="+", default=[8, 16, 32], help="heading bins")
    p.add_argument("--resolution", type=float, default=0.1)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--budget-ms", type=float, default=50.0)
    _common(p)

    p = sub.add_parser("export-terrain", help="write a ground-truth terrain as npz (heights, resolution, origin)")
    p.add_argument("scenario", nargs="?", default=None, help="scenario YAML whose terrain section is used")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="apply a roughness preset")
    p.add_argument("--name", default="terrain", help="output file stem")
    _common(p)
    return parser


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def _set_threads(n) -> None:
    if n is None:
        return
    import numba

    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise ConfigError(f"--threads must be within 1..{numba.config.NUMBA_NUM_THREADS}")
    numba.set_num_threads(n)


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_overrides(seed=args.seed)
    result = run_scenario(sc, _out_dir(args.out_dir))
    m = result.metrics
    status = "success" if m.success else f"failure ({m.failure})"
    print(f"{sc.name}: {status}; T_f={m.T_f:.2f} s, l_traj={m.l_traj:.2f} m, plans={m.n_plans}, "
          f"mean t_p={m.t_p_ms:.1f} ms, mean mapping={m.mapping_ms:.1f} ms")
    if result.detail:
        print(f"  {result.detail}")
    return 0


def cmd_bench(args) -> int:
    batch = load_batch(args.batch)
    if args.trials < 0:
        raise ConfigError("--trials must be non-negative")
    seed = 0 if args.seed is None else args.seed

    def progress(m):
        logging.getLogger("se2nav").info("%s: %s", m.name, "ok" if m.success else m.failure)

    result = benchmark(batch, args.trials, seed, _out_dir(args.out_dir), progress)
    for row in result.class_summary():
        print(f"{row['class']}: {row['terrains']} terrains, {row['trials']} runs, "
              f"success {row['success_rate']:.3f}, mean t_p {row['mean_t_p_ms']:.1f} ms, "
              f"mean T_f {row['mean_T_f']:.2f} s, mean l_traj {row['mean_l_traj']:.2f} m")
    print(f"{len(result.rows)} table rows written to {_out_dir(args.out_dir)}")
    return 0


def cmd_mapbench(args) -> int:
    rows = throughput_bench(args.sizes, args.yaws, args.resolution, args.repeats,
                            0 if args.seed is None else args.seed, args.budget_ms)
    for r in rows:
        flag = "ok" if r.within_budget else "over budget"
        print(f"{r.size_m:5.1f} m x {r.n_yaw:2d} yaw  {r.n_states:8d} states  {r.median_ms:8.2f} ms  {flag}")
    print("monotone in state count:", is_monotone(rows))
    export_throughput(rows, _out_dir(args.out_dir))
    return 0


def cmd_export_terrain(args) -> int:
    sc = load_scenario(args.scenario) if args.scenario else Scenario.from_dict({})
    terrain = dict(sc.terrain)
    if args.preset:
        terrain.update(PRESETS[args.preset])
    seed = args.seed if args.seed is not None else sc.terrain_seed
    hf = build_terrain(terrain, seed)
    d = _out_dir(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{args.name}.npz"
    np.savez_compressed(path, heights=hf.heights, resolution=hf.resolution, origin=np.asarray(hf.origin))
    print(f"wrote {path} ({hf.heights.shape[1]} x {hf.heights.shape[0]} cells at {hf.resolution} m)")
    return 0


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "mapbench": cmd_mapbench, "export-terrain": cmd_export_terrain}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _set_threads(args.threads)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"se2nav: configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
