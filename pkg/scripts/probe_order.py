"""Order probe on the planted-rule checkpoints: cosine distance between the
[r1, r2] and [r2, r1] path encodings, full model vs message-addition."""
import argparse
import itertools
import json
import os

from rungnn.evaluation import order_sensitivity_probe
from rungnn.synthetic import family_kg
from rungnn.training import load_checkpoint

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

p = argparse.ArgumentParser()
p.add_argument("--runs", default=os.path.join(ROOT, "runs", "planted"))
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

split = family_kg(30, seed=args.seed).split()
R = split.vocab.num_relations
models = {v: load_checkpoint(os.path.join(args.runs, f"{v}-s{args.seed}", "best.ckpt"))
          for v in ("full-qrfgu", "message-addition")}
# base relations in both orders, with each planted target as the query relation
targets = [split.vocab.relation_index[t] for t in ("has_aunt", "has_father")]
pairs = [(a, b, q) for a, b in itertools.combinations(range(R), 2) for q in targets]
res = order_sensitivity_probe(models, pairs, out_csv=os.path.join(args.runs, "probe_order.csv"))
print(json.dumps(res["summary"], indent=2, sort_keys=True))
