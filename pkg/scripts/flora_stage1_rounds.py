"""FLoRA final accuracy as a function of the number of stage-1 rounds.

    python3 scripts/flora_stage1_rounds.py --stage1 0 10 50 --stage2 100
"""

import argparse

from fedpeft import scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--stage1", type=int, nargs="+", default=[0, 10, 50])
    ap.add_argument("--stage2", type=int, default=100)
    ap.add_argument("--partition", default="pathological")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(scenarios.SEEDS))
    args = ap.parse_args()
    res = scenarios.flora_stage1_sweep(args.stage1, args.stage2, args.partition, tuple(args.seeds))
    print("rounds_stage1,mean,std")
    for r1, v in res.items():
        print(f"{r1},{v.mean():.4f},{v.std(ddof=1) if len(v) > 1 else 0:.4f}")


if __name__ == "__main__":
    main()
