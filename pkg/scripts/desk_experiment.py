"""Run the desk-scale experiment (gen, train, predict, keep-2, eval) and print
the end-to-end checks.

    python3 scripts/desk_experiment.py WORKDIR [--set key=value ...]
"""
import argparse
import json
import sys

from cartseg.config import load_config
from cartseg.pipeline import run_experiment


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir")
    ap.add_argument("--config")
    ap.add_argument("--set", "-o", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args(argv)
    cfg = load_config(args.config, args.set)
    s = run_experiment(cfg, args.workdir, echo=None if args.quiet else lambda line: print(line, file=sys.stderr))

    print(f"{'volume':<8} {'raw prec':>9} {'post prec':>9} {'raw rec':>8} {'post rec':>8} {'raw acc':>8}")
    for r, p in zip(s["raw"], s["post"]):
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        print(f"{r['name']:<8} {fmt(r['precision']):>9} {fmt(p['precision']):>9} "
              f"{fmt(r['recall']):>8} {fmt(p['recall']):>8} {fmt(r['accuracy']):>8}")
    raised = sum((p["precision"] or 0) > (r["precision"] or 0) for r, p in zip(s["raw"], s["post"]))
    summary = {
        "post_macro_recall": s["post_macro"]["recall"],
        "post_macro_precision": s["post_macro"]["precision"],
        "post_macro_dice": s["post_macro"]["dice"],
        "raw_macro_accuracy": s["raw_macro"]["accuracy"],
        "precision_raised": f"{raised}/{s['n_test']}",
        "seconds": s["seconds"],
    }
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
