"""Closed-loop diagnostics for authoring the bundled scenarios.

Runs a scenario with adaptation on and off against a shared solve cache
and prints a per-step table (belief, tube extent, conflict, planner) plus
the final metrics, so scenario geometry can be tuned against kinematic
targets. Purely a development aid; the shipped scenarios are static JSON.

Usage:
    python3 tools/calibrate_scenarios.py scenario.json [--targets stop|uturn]
"""

import argparse
import json
import sys
import time

from reachguard.reachability import SolveCache
from reachguard.sim import load_scenario, run_pair

TARGETS = {
    "stop": {
        "on_detection_distance": 19.5,
        "off_detection_distance": 8.0,
        "on_overshoot": (6.9, 0.15),
        "off_overshoot": (18.4, 0.15),
        "on_brake_duration": (2.3, 0.25),
        "on_collision": False,
        "off_collision": True,
    },
    "uturn": {
        "on_detection_distance": 39.0,
        "off_detection_distance": 26.0,
        "on_accel": (-8.67, 0.1),
        "on_stop_before_line": True,
        "off_brake_duration": (2.6, 0.25),
        "on_collision": False,
        "off_collision": True,
    },
}


def table(log, label):
    print(f"--- {label} ---")
    print("  k     t   b_low  beta   ego_x  ego_v  brake reason         "
          "gap    cells  margin")
    for r in log.records:
        print(f"{r.k:3d} {r.t:5.1f}  {r.b_low:.3f} {r.beta:.3f} "
              f"{r.ego_x:7.2f} {r.ego_v:6.2f}  {str(r.braking):5s} "
              f"{r.reason:14s} {r.min_gap:6.2f} {r.tube_cells:8d} "
              f"{r.containment_margin:7.3f}")
    m = log.metrics
    print(f"metrics: detection_step={m['detection_step']} "
          f"distance={m['detection_distance']} stop_x={m['stop_x']} "
          f"overshoot={m['overshoot']} brake_duration={m['brake_duration']} "
          f"collision={m['collision']} min_gap={m['min_gap']:.2f} "
          f"containment_failures={m['containment_failures']}")


def check(name, value, want):
    if isinstance(want, tuple):
        lo, hi = want[0] - want[1], want[0] + want[1]
        ok = value is not None and lo <= value <= hi
        print(f"  {'PASS' if ok else 'FAIL'} {name}: {value} (want {want[0]} "
              f"+/- {want[1]})")
    else:
        ok = value == want
        print(f"  {'PASS' if ok else 'FAIL'} {name}: {value} (want {want})")
    return ok


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario")
    ap.add_argument("--targets", choices=sorted(TARGETS), default=None)
    args = ap.parse_args(argv)

    sc = load_scenario(args.scenario)
    cache = SolveCache(sc.grid, sc.horizon, eps=sc.eps, maxsize=64)
    t0 = time.time()
    on, off = run_pair(sc, cache=cache)
    elapsed = time.time() - t0
    table(on, f"{sc.name} adapt=on")
    table(off, f"{sc.name} adapt=off")
    print(f"runtime {elapsed:.1f}s, cache hits {cache.hits} misses {cache.misses}")

    if args.targets is None:
        return 0
    t = TARGETS[args.targets]
    m_on, m_off = on.metrics, off.metrics
    ok = True
    ok &= check("on detection distance", m_on["detection_distance"],
                t["on_detection_distance"])
    ok &= check("off detection distance", m_off["detection_distance"],
                t["off_detection_distance"])
    if "on_accel" in t:
        det = m_on["detection_step"]
        accel = on.records[det].accel if det is not None else None
        ok &= check("on braking accel", accel, t["on_accel"])
    if "on_overshoot" in t:
        ok &= check("on overshoot", m_on["overshoot"], t["on_overshoot"])
    if "off_overshoot" in t:
        ok &= check("off overshoot", m_off["overshoot"], t["off_overshoot"])
    if "on_brake_duration" in t:
        ok &= check("on brake duration", m_on["brake_duration"],
                    t["on_brake_duration"])
    if "off_brake_duration" in t:
        ok &= check("off brake duration", m_off["brake_duration"],
                    t["off_brake_duration"])
    if "on_stop_before_line" in t:
        before = (m_on["stop_x"] is not None
                  and m_on["stop_x"] <= sc.ego.line_x + 1e-6)
        ok &= check("on stops at/before line", before, True)
    ok &= check("on collision", m_on["collision"], t["on_collision"])
    ok &= check("off collision", m_off["collision"], t["off_collision"])
    det_on, det_off = m_on["detection_step"], m_off["detection_step"]
    earlier = (det_on is not None and det_off is not None and det_on < det_off)
    ok &= check("on detects strictly earlier", earlier, True)
    # containment lapses after the scripted deviation are expected (the
    # prediction mean is wrong there by construction); print, don't gate
    print(f"  info on containment failures: {m_on['containment_failures']}")
    print(f"  info off containment failures: {m_off['containment_failures']}")
    print("ALL TARGETS MET" if ok else "TARGETS MISSED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
