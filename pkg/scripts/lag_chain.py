"""Buffer effect on the lag-chain KG: n=4 with m=2 vs m=0, paired by seed.

Writes runs/lagchain/<m>-s<seed>/ and runs/lagchain/summary.json.
"""
import argparse
import logging
import os

from rungnn.experiments import lag_buffer_pairs

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

p = argparse.ArgumentParser()
p.add_argument("--out", default=os.path.join(ROOT, "runs", "lagchain"))
p.add_argument("--seeds", type=int, default=5)
p.add_argument("--retrain", action="store_true")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

s = lag_buffer_pairs(args.out, range(args.seeds), retrain=args.retrain)
for row in s["pairs"]:
    print(f"seed {row['seed']}  >=3-hop MRR  m=0 {row['m0']:.3f}  m=2 {row['m2']:.3f}  "
          f"({row['count']} queries)  improved={row['improved']}")
print(f"improved in {s['improved']} of {s['n_pairs']} pairs")
