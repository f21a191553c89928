"""Cost table for the four variants next to the published GFLOPs / parameter figures.

Also evaluates a few alternative readings of the architecture (different
block depth, feature flags) to show how far each moves the totals.

    python scripts/reproduce_tables.py [--csv out.csv]
"""

import argparse
import csv
import sys
from dataclasses import replace

from treenet import cost
from treenet.acceptance import GFLOPS_TABLE1, GFLOPS_TABLE3, PARAMS_M_TABLE3
from treenet.layers import skip_init
from treenet.zoo import VARIANTS, build_model, treenet_spec


def measure(spec):
    with skip_init():
        rep = cost.analyze_graph(build_model(spec), (3, 224, 224))
    t = rep.param_totals()
    return {
        "gflops": rep.gflop_units,
        "params_M": t["weights"] / 1e6,
        "params_bn_M": t["weights+bn"] / 1e6,
        "params_nofc_M": t["weights-classifier"] / 1e6,
        "params_bn_nofc_M": t["weights+bn-classifier"] / 1e6,
        "mac_M": rep.mac / 1e6,
    }


def alternatives(v):
    base = treenet_spec(v)
    yield "adopted", base
    yield "l=3 everywhere", replace(base, stages=tuple(replace(s, block=replace(s.block, l=3)) for s in base.stages))
    yield "no SRB/residual/ECA", replace(
        base,
        stages=tuple(replace(s, block=replace(s.block, use_srb=False, use_residual=False, use_eca=False)) for s in base.stages),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", help="write all rows to this CSV file")
    args = ap.parse_args(argv)
    rows = []
    print(f"{'variant':<12} {'reading':<20} {'GFLOPs':>8} {'T1':>6} {'T3':>6} {'P(M)':>8} {'P-fc':>8} {'P+bn-fc':>8} {'T3 P':>7}")
    for v in VARIANTS:
        for label, spec in alternatives(v):
            m = measure(spec)
            rows.append({"variant": v, "reading": label, **m})
            print(
                f"treenet-{v:<4} {label:<20} {m['gflops']:>8.3f} {GFLOPS_TABLE1[v]:>6.2f} {GFLOPS_TABLE3[v]:>6.2f} "
                f"{m['params_M']:>8.3f} {m['params_nofc_M']:>8.3f} {m['params_bn_nofc_M']:>8.3f} {PARAMS_M_TABLE3[v]:>7.2f}"
            )
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
