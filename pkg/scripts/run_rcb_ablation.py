"""Paired-seed comparison of the full loss against the ablated one on the toy grid.

Trains every preset given on the 4x4 scrambled grid (5 contexts, 2 distractor
dimensions), once on all contexts and once on the inner three with the outer
two held out, and reports the final evaluation return per seed.
"""

import argparse
import json
import time
from pathlib import Path

from condbisim.cmdp import generate_env
from condbisim.harness import emit_report, paired_comparison
from condbisim.rcb import TOY_ENV, run_rcb, toy_config, write_curve_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--presets", nargs="+", default=["full", "no-cc-no-icc"])
    ap.add_argument("--steps", type=int, default=6000)
    ap.add_argument("--out-dir", default="out/rcb_ablation")
    args = ap.parse_args()

    env = generate_env(*TOY_ENV)
    out = Path(args.out_dir)
    summary = {}
    for split in ("held_in", "ood"):
        finals, curves = {}, {}
        for preset in args.presets:
            cfg = toy_config(preset, ood=split == "ood", total_steps=args.steps, eval_period=min(1000, args.steps))
            t0 = time.perf_counter()
            for seed in range(args.seeds):
                res = run_rcb(env, cfg, seed)
                d = out / split / preset
                d.mkdir(parents=True, exist_ok=True)
                write_curve_csv(res.curve, d / f"seed{seed}.csv")
                curves.setdefault(preset, []).append(res.curve)
                finals.setdefault(preset, []).append(res.curve[-1]["eval_mean"])
            print(f"{split} {preset}: {[round(v, 3) for v in finals[preset]]} ({time.perf_counter() - t0:.0f}s)")
        emit_report(curves=curves, out_dir=out / split)
        ref = args.presets[0]
        summary[split] = {p: paired_comparison(finals[ref], finals[p]) for p in args.presets[1:]}
        for p, cmp in summary[split].items():
            print(f"  {ref} - {p}: mean gap {cmp['mean_gap']:.3f} (se {cmp['stderr']:.3f}), "
                  f"holds={cmp['holds']}")
    (out / "comparison.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
