#!/usr/bin/env python3
"""Refine seeded bundle phantoms and check them against ground truth.

Prints one line per phantom plus a summary; exits 1 if any phantom is not
restored exactly or if a rejection probe is accepted.
"""
import argparse
import json
import sys
import time

from labelforge.labelscheme import default_scheme
from labelforge.metrics import overlap_metrics
from labelforge.phantom import default_phantom_spec, generate
from labelforge.refine import RefineConfig, post_process


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20, help="number of seeds")
    ap.add_argument("--start", type=int, default=0)
    ap.add_argument("--json", help="write per-phantom results here")
    args = ap.parse_args(argv)

    scheme = default_scheme()
    results, total = [], 0.0
    for seed in range(args.start, args.start + args.n):
        ph = generate(default_phantom_spec(seed), scheme)
        t0 = time.perf_counter()
        out, report = post_process(ph["corrupted"], scheme, ph["meta"])
        dt = time.perf_counter() - t0
        total += dt
        again, _ = post_process(out, scheme, ph["meta"])
        before = overlap_metrics(ph["corrupted"], ph["truth"]).macro_dice
        row = {"seed": seed, "sex": ph["meta"].sex, "exact": out == ph["truth"], "idempotent": again == out,
               "macro_dice_before": round(before, 4), "verdict": report.plausibility.verdict,
               "deviation_deg": round(report.plausibility.plane_deviation_deg, 3), "seconds": round(dt, 3)}
        results.append(row)
        print(f"seed {seed:3d} {row['sex']}  dice before {before:.4f}  exact={row['exact']}  "
              f"idempotent={row['idempotent']}  verdict={row['verdict']}  {dt:.2f}s")

    probes = []
    for name, corr, cfg, expect in [
        ("rotate 45 deg, 20 deg limit", [{"type": "rotate_column", "degrees": 45}], RefineConfig(), "reject"),
        ("rotate 45 deg, 50 deg limit", [{"type": "rotate_column", "degrees": 45}],
         RefineConfig(plane_deviation_max_deg=50.0), "accept"),
        ("bent rib", [{"type": "bend_rib", "side": "left", "index": 4, "drop": 5}], RefineConfig(), "reject"),
    ]:
        ph = generate(default_phantom_spec(0, corruptions=corr), scheme)
        _, rep = post_process(ph["corrupted"], scheme, ph["meta"], cfg)
        probes.append((name, rep.plausibility.verdict, expect))
        print(f"probe {name:30s} verdict={rep.plausibility.verdict} (expected {expect})")

    n_exact = sum(r["exact"] for r in results)
    ok = n_exact == len(results) and all(r["idempotent"] for r in results) and all(v == e for _, v, e in probes)
    print(f"\n{n_exact}/{len(results)} restored exactly, {total:.2f}s total refinement time")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"phantoms": results, "probes": probes}, fh, indent=2)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
