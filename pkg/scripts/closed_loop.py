"""Closed-loop comparison on a random-tier point-mass dataset.

Arms: adept_sac, sac, adept_iql, iql (dataset-only learners) and
adept_sac_noclip for the clipping ablation. Prints one line per run and
writes ``closed_loop.csv``.

    python3 scripts/closed_loop.py --seeds 0 1 2 3 4 --out runs/closed_loop
    python3 scripts/closed_loop.py --arms adept_sac adept_sac_noclip --set H=5
"""
import argparse
import csv
from pathlib import Path

from adept.config import parse_overrides
from adept.experiments import ARMS, run_arm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--arms", nargs="+", default=["adept_sac", "sac", "adept_iql", "iql"], choices=list(ARMS))
    ap.add_argument("--out", default="runs/closed_loop")
    ap.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="desk-profile overrides")
    args = ap.parse_args()
    extra = parse_overrides(args.set)
    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        for arm in args.arms:
            rec, secs = run_arm(arm, seed, out, **extra)
            rows.append({"seed": seed, "arm": arm, "final_return": rec.final("eval_return_mean"),
                         "seconds": round(secs, 1)})
            print(rows[-1], flush=True)
    with open(out / "closed_loop.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for learner in ("sac", "iql"):
        ours = {r["seed"]: r["final_return"] for r in rows if r["arm"] == f"adept_{learner}"}
        base = {r["seed"]: r["final_return"] for r in rows if r["arm"] == learner}
        common = sorted(set(ours) & set(base))
        if common:
            wins = sum(ours[s] > base[s] for s in common)
            print(f"adept_{learner} beats {learner} on {wins}/{len(common)} seeds")


if __name__ == "__main__":
    main()
