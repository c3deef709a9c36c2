"""Command line interface.

Subcommands:

* ``solve``       one reachable-tube solve from explicit parameters
* ``simulate``    closed-loop scenario run(s) with log/trace exports
* ``precompute``  build a tube family lattice into a directory (resumable)
* ``export``      reread a saved tube and emit CSV / SVG views

Exit codes: 0 success; 2 invalid arguments, configuration, or scenario
files; 3 numerical failure or a tube touching the grid boundary; 4 a
simulated run ended in a collision.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .confidence import ConfidenceBelief
from .dynamics import AgentState
from .errors import (
    DomainTooSmallError,
    NumericalFailureError,
    ReachguardError,
    ScenarioFormatError,
)
from .prediction import ControlBoundsEndpoints
from .reachability import (
    DEFAULT_EPS,
    DEFAULT_HORIZON,
    FRTFamily,
    GridSpec,
    SolveCache,
    endpoints_from_key,
    entry_filename,
    export_mask_csv,
    export_slice_csv,
    frt_set,
    load_value_function,
    project_positions,
    save_value_function,
    solve_frt,
    write_family_manifest,
)
from .render import write_frame
from .safety import world_occupancy
from .sim import load_scenario, run, scenario_path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_COLLISION = 4


def _grid_from_args(args) -> GridSpec:
    if args.grid_lo is None and args.grid_hi is None and args.grid_shape is None:
        return GridSpec()
    if args.grid_lo is None or args.grid_hi is None or args.grid_shape is None:
        raise ScenarioFormatError(
            "--grid-lo, --grid-hi and --grid-shape must be given together"
        )
    return GridSpec(lo=tuple(args.grid_lo), hi=tuple(args.grid_hi),
                    shape=tuple(args.grid_shape))


def _endpoints_from_args(args) -> ControlBoundsEndpoints:
    u1e = args.u1_end if args.u1_end is not None else args.u1
    u2e = args.u2_end if args.u2_end is not None else args.u2
    return ControlBoundsEndpoints(
        u_min_start=(args.u1[0], args.u2[0]),
        u_max_start=(args.u1[1], args.u2[1]),
        u_min_end=(u1e[0], u2e[0]),
        u_max_end=(u1e[1], u2e[1]),
    )


def _cmd_solve(args) -> int:
    grid = _grid_from_args(args)
    ep = _endpoints_from_args(args)
    vf = solve_frt(args.v_start, ep, grid, args.horizon,
                   dtau=args.dtau, eps=tuple(args.eps),
                   snapshot_dt=args.snapshot_dt)
    mask = frt_set(vf, args.threshold)
    cells = int(mask.sum())
    print(f"grid nodes: {grid.num_nodes}")
    print(f"tube cells below threshold {args.threshold}: {cells}")
    if args.out:
        save_value_function(vf, args.out,
                            include_snapshots=args.snapshot_dt is not None)
        print(f"wrote {args.out}")
    if args.mask_csv:
        export_mask_csv(project_positions(mask), args.mask_csv, grid)
        print(f"wrote {args.mask_csv}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    spath = args.scenario
    if not os.path.exists(spath):
        spath = scenario_path(spath)  # bare names resolve to bundled files
    sc = load_scenario(spath)
    if args.gamma is not None:
        sc = replace(sc, gamma=args.gamma)
    if args.cell is not None:
        sc = replace(sc, cell=args.cell)
    if args.threshold is not None:
        sc = replace(sc, threshold=args.threshold)
    if args.beta_low is not None or args.epsilon is not None:
        belief = ConfidenceBelief(
            beta_low=(args.beta_low if args.beta_low is not None
                      else sc.belief0.beta_low),
            epsilon=(args.epsilon if args.epsilon is not None
                     else sc.belief0.epsilon),
        )
        sc = replace(sc, belief0=belief)

    modes = {"on": (True,), "off": (False,), "both": (True, False)}[args.adapt]
    os.makedirs(args.out, exist_ok=True)
    cache = SolveCache(sc.grid, sc.horizon, eps=sc.eps)
    collided = False
    for adapt in modes:
        tag = "on" if adapt else "off"
        render_dir = None
        if args.render:
            render_dir = os.path.join(args.out, f"frames_{sc.name}_{tag}")
            os.makedirs(render_dir, exist_ok=True)
        log = run(sc, adapt=adapt, cache=cache, render_dir=render_dir)
        base = os.path.join(args.out, f"{sc.name}_{tag}")
        log.save_json(base + "_log.json")
        log.save_trace_csv(base + "_trace.csv")
        log.save_belief_csv(base + "_belief.csv")
        m = log.metrics
        det = ("none" if m["detection_step"] is None
               else f"step {m['detection_step']} "
                    f"({m['detection_distance']:.2f} m before the line)")
        print(f"[{sc.name} adapt={tag}] detection: {det}")
        if m["stop_x"] is not None:
            print(f"[{sc.name} adapt={tag}] stopped at x={m['stop_x']:.2f} "
                  f"(overshoot {m['overshoot']:.2f} m, "
                  f"braked {m['brake_duration']:.2f} s)")
        print(f"[{sc.name} adapt={tag}] collision: {m['collision']} "
              f"(min gap {m['min_gap']:.2f} m)")
        collided = collided or m["collision"]
    return EXIT_COLLISION if collided else EXIT_OK


def _solve_family_entry(payload) -> str:
    """Worker for precompute: solve one lattice key and write its file."""
    grid_dict, horizon, eps, alphas, dtau, key, out_dir = payload
    grid = GridSpec.from_dict(grid_dict)
    v_start, ep = endpoints_from_key(key)
    # the family's shared step schedule keeps entries comparable cell by cell
    vf = solve_frt(v_start, ep, grid, horizon, eps=tuple(eps),
                   alphas=tuple(alphas), dtau=dtau)
    path = os.path.join(out_dir, entry_filename(key))
    save_value_function(vf, path)
    return path


def _cmd_precompute(args) -> int:
    with open(args.config) as f:
        cfg = json.load(f)
    for field in ("grid", "horizon", "knots"):
        if field not in cfg:
            raise ScenarioFormatError(f"precompute config is missing {field!r}")
    grid = GridSpec.from_dict(cfg["grid"])
    eps = tuple(cfg.get("eps", DEFAULT_EPS))
    family = FRTFamily(
        grid=grid, horizon=float(cfg["horizon"]), eps=eps,
        knots={k: np.asarray(v, dtype=float) for k, v in cfg["knots"].items()},
        alphas=tuple(cfg.get("alphas", ())),
    )
    os.makedirs(args.out, exist_ok=True)
    all_keys = list(family.lattice_keys())
    todo = [k for k in all_keys
            if not os.path.exists(os.path.join(args.out, entry_filename(k)))]
    print(f"lattice keys: {len(all_keys)} ({len(todo)} to solve, "
          f"{len(all_keys) - len(todo)} already on disk)")
    payloads = [(grid.to_dict(), family.horizon, list(family.eps),
                 list(family.alphas), family.dtau, key, args.out)
                for key in todo]
    if args.jobs > 1 and payloads:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for path in pool.map(_solve_family_entry, payloads):
                print(f"wrote {path}")
    else:
        for payload in payloads:
            print(f"wrote {_solve_family_entry(payload)}")
    mpath = write_family_manifest(args.out, grid, family.horizon, family.eps,
                                  family.alphas, family.knots, all_keys)
    print(f"wrote {mpath}")
    return EXIT_OK


def _cmd_export(args) -> int:
    vf = load_value_function(args.frt)
    grid = vf.grid
    if args.info:
        info = {
            "grid": grid.to_dict(),
            "horizon": vf.horizon,
            "v_start": vf.v_start,
            "endpoints": list(vf.endpoints.as_tuple()),
            "eps": list(vf.eps),
            "min_value": float(vf.values.min()),
            "cells_below_zero": int((vf.values < 0).sum()),
        }
        print(json.dumps(info, indent=1, sort_keys=True))
    if args.slice_csv:
        k = (args.theta_index if args.theta_index is not None
             else int(np.argmin(np.abs(grid.nodes(2)))))
        m = (args.v_index if args.v_index is not None
             else int(np.argmin(np.abs(grid.nodes(3) - vf.v_start))))
        export_slice_csv(vf, args.slice_csv, k, m)
        print(f"wrote {args.slice_csv} (theta_index={k}, v_index={m})")
    if args.mask_csv:
        mask = project_positions(frt_set(vf, args.threshold))
        export_mask_csv(mask, args.mask_csv, grid)
        print(f"wrote {args.mask_csv}")
    if args.svg:
        mask = project_positions(frt_set(vf, args.threshold))
        occ = world_occupancy(mask, grid, (0.0, 0.0, 0.0), cell=0.5)
        pad = 2.0
        view = (grid.lo[0] - pad, grid.hi[0] + pad,
                grid.lo[1] - pad, grid.hi[1] + pad)
        write_frame(args.svg, human=AgentState(0.0, 0.0, 0.0, vf.v_start),
                    ego_x=None, occupancy=occ, view=view,
                    labels=(f"v_start={vf.v_start:g}",))
        print(f"wrote {args.svg}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reachguard",
        description="Confidence-aware forward reachable tubes for human-"
                    "driven vehicles, with a closed-loop scenario simulator.",
    )
    parser.add_argument("--seed", type=int, default=0,
                        help="seed reserved for stochastic utilities; the "
                             "bundled commands are deterministic (default 0)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one forward reachable tube")
    p.add_argument("--v-start", type=float, required=True,
                   help="human speed at the start of the horizon, m/s")
    p.add_argument("--u1", type=float, nargs=2, required=True,
                   metavar=("LO", "HI"), help="turn-rate bounds at tau=0")
    p.add_argument("--u2", type=float, nargs=2, required=True,
                   metavar=("LO", "HI"), help="acceleration bounds at tau=0")
    p.add_argument("--u1-end", type=float, nargs=2, metavar=("LO", "HI"),
                   help="turn-rate bounds at the end of the horizon "
                        "(default: same as --u1)")
    p.add_argument("--u2-end", type=float, nargs=2, metavar=("LO", "HI"),
                   help="acceleration bounds at the end of the horizon")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON)
    p.add_argument("--dtau", type=float, default=None,
                   help="solver time step (default: largest stable step)")
    p.add_argument("--eps", type=float, nargs=3, default=list(DEFAULT_EPS),
                   metavar=("POS", "VEL", "HEAD"),
                   help="initial-set margins (m, m/s, rad)")
    p.add_argument("--grid-lo", type=float, nargs=4, default=None,
                   metavar=("X", "Y", "TH", "V"))
    p.add_argument("--grid-hi", type=float, nargs=4, default=None,
                   metavar=("X", "Y", "TH", "V"))
    p.add_argument("--grid-shape", type=int, nargs=4, default=None,
                   metavar=("NX", "NY", "NTH", "NV"))
    p.add_argument("--snapshot-dt", type=float, default=None,
                   help="also store intermediate tubes every this many seconds")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="membership threshold for reported cell counts")
    p.add_argument("--out", default=None, help="write the tube to this file")
    p.add_argument("--mask-csv", default=None,
                   help="write the projected (x, y) mask as CSV")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("simulate", help="run a scenario closed loop")
    p.add_argument("scenario",
                   help="scenario JSON file, or a bundled name "
                        "(stop_sign, uturn)")
    p.add_argument("--adapt", choices=("on", "off", "both"), default="on",
                   help="confidence adaptation on, off, or both runs")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--render", action="store_true",
                   help="write one SVG frame per step")
    p.add_argument("--gamma", type=float, default=None,
                   help="override the scenario's trimming mass")
    p.add_argument("--cell", type=float, default=None,
                   help="override the world occupancy cell size, m")
    p.add_argument("--threshold", type=float, default=None,
                   help="override the tube membership threshold")
    p.add_argument("--beta-low", type=float, default=None,
                   help="override the low-confidence beta")
    p.add_argument("--epsilon", type=float, default=None,
                   help="override the belief mixing rate")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("precompute",
                       help="solve a tube family lattice into a directory")
    p.add_argument("config", help="JSON file with grid, horizon, eps, knots")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes (default 1)")
    p.set_defaults(func=_cmd_precompute)

    p = sub.add_parser("export", help="emit views of a saved tube file")
    p.add_argument("frt", help="tube file written by solve/precompute")
    p.add_argument("--info", action="store_true",
                   help="print a JSON summary of the stored tube")
    p.add_argument("--slice-csv", default=None,
                   help="write a value slice as CSV")
    p.add_argument("--theta-index", type=int, default=None,
                   help="heading index of the slice (default: nearest 0)")
    p.add_argument("--v-index", type=int, default=None,
                   help="speed index of the slice (default: nearest v_start)")
    p.add_argument("--mask-csv", default=None,
                   help="write the projected membership mask as CSV")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--svg", default=None,
                   help="render the projected tube to an SVG file")
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DomainTooSmallError, NumericalFailureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ReachguardError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
