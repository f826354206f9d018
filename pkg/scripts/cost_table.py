"""Trainable parameters, communication, modeled time and accuracy for every method.

Runs each algorithm once on the desk-scale scenario and prints one row per
method. ``--mode budget`` pads the single-stage baselines with extra rounds
until they have spent as many bits as SLoRA.

    python3 scripts/cost_table.py --stage1 50 --stage2 100 --mode rounds
"""

import argparse
import math
from dataclasses import replace

from fedpeft import costs, scenarios
from fedpeft.fed import ALGORITHMS, run_experiment
from fedpeft.peft import trainable_count


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--stage1", type=int, default=50)
    ap.add_argument("--stage2", type=int, default=100)
    ap.add_argument("--partition", default="pathological")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=("rounds", "budget"), default="rounds")
    args = ap.parse_args()
    w0, train, test = scenarios.world()
    part = scenarios.partition(train, args.partition, args.seed)
    base = scenarios.base_config(rounds_stage1=args.stage1, rounds_stage2=args.stage2, seed=args.seed)
    reference = run_experiment(replace(base, algorithm="slora"), w0, train, test, part)
    budget = reference.ledger.total_bits
    print(f"# formulas: {costs.FORMULAS}")
    print("method,trainable_params,rounds,accuracy,gbits,modeled_minutes")
    for algo in ALGORITHMS:
        cfg = replace(base, algorithm=algo)
        if args.mode == "budget" and algo not in ("flora", "slora"):
            n, _ = trainable_count(w0, cfg.peft(algo))
            rounds = math.ceil(budget / costs.comm_bits(n, cfg.clients_per_round))
            cfg = replace(cfg, rounds_stage1=rounds, rounds_stage2=rounds)
        elif args.mode == "rounds" and algo not in ("flora", "slora"):
            total = args.stage1 + args.stage2
            cfg = replace(cfg, rounds_stage1=total, rounds_stage2=total)
        rep = reference if algo == "slora" else run_experiment(cfg, w0, train, test, part)
        s = rep.summary
        print(f"{algo},{s['trainable_params']},{s['total_rounds']},{s['final_accuracy']:.4f},"
              f"{s['gbits']:.4f},{s['modeled_seconds'] / 60:.3f}", flush=True)


if __name__ == "__main__":
    main()
