"""Run the four randomized bound-check suites and print a pass-rate table.

    python3 scripts/run_verify_suites.py --trials 100 --seed 0 --out-dir out/suites
"""

import argparse
import time
from pathlib import Path

from condbisim.bounds import SuiteConfig, run_suite
from condbisim.harness import emit_report, summarize_reports, worker_count, write_jsonl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--theorems", default="2345")
    ap.add_argument("--c", type=float, help="metric transition weight for the aggregation suite (default gamma)")
    ap.add_argument("--out-dir", default="out/suites")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SuiteConfig(c=args.c)
    reports = []
    for th in args.theorems:
        t0 = time.perf_counter()
        reps = run_suite(th, args.trials, args.seed, cfg, workers=worker_count())
        write_jsonl(reps, out / f"thm{th}.jsonl")
        print(f"theorem {th}: {len(reps)} reports in {time.perf_counter() - t0:.1f}s")
        reports += reps
    emit_report(reports, out_dir=out)
    print(f"{'thm':>4} {'trials':>7} {'pass':>6} {'max lhs/rhs':>12} {'ambiguous':>10}")
    for row in summarize_reports(reports):
        print(f"{row['theorem']:>4} {row['n_trials']:>7} {row['n_pass']:>6} {row['max_ratio']:>12.4g} "
              f"{row['n_ambiguous']:>10}")


if __name__ == "__main__":
    main()
