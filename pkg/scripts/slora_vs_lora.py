"""SLoRA against zero-initialized LoRA with the same number of stage-2 rounds.

    python3 scripts/slora_vs_lora.py --stage1 50 --stage2 100 --partition pathological
"""

import argparse

from fedpeft import scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--stage1", type=int, default=50)
    ap.add_argument("--stage2", type=int, default=100)
    ap.add_argument("--partition", default="pathological")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(scenarios.SEEDS))
    args = ap.parse_args()
    slora, lora = scenarios.slora_vs_lora(args.stage1, args.stage2, args.partition, tuple(args.seeds))
    print("method," + ",".join(f"seed{s}" for s in args.seeds) + ",mean,std")
    for name, v in (("slora", slora), ("lora", lora)):
        std = v.std(ddof=1) if len(v) > 1 else 0.0
        print(name + "," + ",".join(f"{a:.4f}" for a in v) + f",{v.mean():.4f},{std:.4f}")


if __name__ == "__main__":
    main()
