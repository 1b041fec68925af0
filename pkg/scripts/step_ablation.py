#!/usr/bin/env python3
"""Which refinement step undoes which corruption?

For each corruption applied alone, run the pipeline with every step enabled
and then with each step removed, and report whether truth is restored.
"""
import argparse

from labelforge.labelscheme import default_scheme
from labelforge.phantom import bundle_corruptions, default_phantom_spec, generate
from labelforge.refine import STEPS, RefineConfig, post_process


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args(argv)
    scheme = default_scheme()

    header = f"{'corruption':28s} {'all steps':>9s} " + " ".join(f"-{s[:10]:>10s}" for s in STEPS)
    print(header)
    for c in bundle_corruptions("M"):
        label = c["type"] + (f"({c.get('label')})" if c.get("label") else "")
        cols = []
        for drop in (None,) + tuple(STEPS):
            steps = tuple(s for s in STEPS if s != drop)
            restored = 0
            for seed in range(args.seeds):
                ph = generate(default_phantom_spec(seed, sex="M", corruptions=[c]), scheme)
                out, _ = post_process(ph["corrupted"], scheme, ph["meta"], RefineConfig(enabled_steps=steps))
                restored += out == ph["truth"]
            cols.append(f"{restored}/{args.seeds}")
        print(f"{label:28s} {cols[0]:>9s} " + " ".join(f"{v:>11s}" for v in cols[1:]))


if __name__ == "__main__":
    main()
