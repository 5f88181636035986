"""Train the four ablation arms on the synthetic benchmark and tabulate them.

    python demos/ablation.py                      # 5 seeds, 300 steps, batch 64
    python demos/ablation.py --seeds 0 --steps 100 --lambda_O 1e5 --lambda_A 1e3

Prints target HR@10 and NDCG@10 together with the user-side and item-side
proxy A-distance between source and target embeddings, averaged over seeds.
"""
import argparse
import logging

from cfaa import experiment

p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
p.add_argument("--steps", type=int, default=300)
p.add_argument("--batch_size", type=int, default=64)
p.add_argument("--lr", type=float, default=1e-3)
p.add_argument("--lambda_O", type=float, default=0.5)
p.add_argument("--lambda_A", type=float, default=0.8)
p.add_argument("--alpha", type=float, default=0.1)
p.add_argument("--arms", nargs="+", default=list(experiment.ARM_ORDER))
p.add_argument("-v", "--verbose", action="store_true")
args = p.parse_args()
logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

res = experiment.run_ablation(seeds=tuple(args.seeds), steps=args.steps, arms=tuple(args.arms),
                              batch_size=args.batch_size, lr=args.lr, lambda_O=args.lambda_O,
                              lambda_A=args.lambda_A, alpha=args.alpha)
print(res.summary())
