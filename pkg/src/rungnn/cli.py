"""Command line: prepare, train, evaluate, ablate, hops, probe-order, extract, gradcheck.

Exit codes: 0 ok, 1 invalid configuration or input, 2 numeric failure
(non-finite loss or failed gradient check).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .evaluation import (
    VARIANTS,
    ablation_order_holds,
    evaluate,
    extract_evidence_paths,
    hop_bucket_eval,
    median_by_variant,
    order_sensitivity_probe,
    write_report_csv,
    write_report_json,
)
from .kg import DatasetSplit, load_dataset
from .model import EncoderConfig, ModelParameters, apply_variant, encode_batch, score_batch
from .synthetic import generate, random_split
from .training import CheckpointError, NonFiniteLoss, TrainConfig, fit, load_checkpoint, multiclass_log_loss

log = logging.getLogger("rungnn")

RUN_DIR_ENV = "RUNGNN_RUN_DIR"
MAX_N, MAX_D = 10, 256

# per-dataset hyperparameters; keys are RunConfig fields
PRESETS = {
    "wn18rr": {"n": 8, "m": 3, "d": 64},
    "fb15k-237": {"n": 6, "m": 3, "d": 48},
    "nell-995": {"n": 6, "m": 3, "d": 48},
    "yago3-10": {"n": 4, "m": 2, "d": 32},
    "analysis": {"n": 5, "m": 3, "d": 64},
    "umls": {"n": 5, "m": 2, "d": 64, "lr": 1e-3, "epochs": 20, "patience": 4},
    "family": {"n": 5, "m": 2, "d": 64, "lr": 1e-3, "epochs": 20, "patience": 4},
    "synthetic-family": {"n": 3, "m": 1, "d": 16, "lr": 5e-3, "epochs": 200, "patience": 200},
    "lagchain": {"n": 4, "m": 2, "d": 16, "lr": 5e-3, "epochs": 40, "patience": 40},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str | None = None  # directory with train/valid/test.txt
    inductive_dir: str | None = None
    synthetic: str | None = None  # generator spec, e.g. "family:families=30,seed=7"
    preset: str | None = None
    n: int = 5
    m: int = 2
    d: int = 64
    d_a: int | None = None
    phi: str = "relu"
    variant: str = "full-qrfgu"
    lr: float = 5e-4
    optimizer: str = "adam"
    epochs: int = 80
    batch_size: int = 16
    patience: int = 5
    clip: float | None = None
    max_valid: int | None = None
    hide_query_edges: bool = True
    direction: str = "both"
    out_dir: str | None = None
    seed: int = 0
    precision: str = "float32"
    workers: int = 1

    @classmethod
    def build(cls, config_path=None, overrides=None) -> "RunConfig":
        values = {}
        if config_path:
            with open(config_path) as fh:
                values.update(json.load(fh))
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        preset = overrides.get("preset", values.get("preset"))
        merged = {}
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            merged.update(PRESETS[preset])
        merged.update(values)
        merged.update(overrides)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(merged) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self):
        if self.dataset is None and self.synthetic is None:
            raise ConfigError("give a dataset directory or a synthetic generator spec")
        if self.dataset is not None and not os.path.isdir(self.dataset):
            raise ConfigError(f"dataset directory not found: {self.dataset}")
        if self.inductive_dir is not None and not os.path.isdir(self.inductive_dir):
            raise ConfigError(f"inductive directory not found: {self.inductive_dir}")
        if not 1 <= self.n <= MAX_N:
            raise ConfigError(f"n must be in [1, {MAX_N}], got {self.n}")
        if not 0 <= self.m <= MAX_N:
            raise ConfigError(f"m must be in [0, {MAX_N}], got {self.m}")
        if not 1 <= self.d <= MAX_D or (self.d_a is not None and not 1 <= self.d_a <= MAX_D):
            raise ConfigError(f"d and d_a must be in [1, {MAX_D}]")
        if self.variant not in VARIANTS + ("full",):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.direction not in ("both", "tail-only"):
            raise ConfigError(f"direction must be both or tail-only, got {self.direction!r}")
        try:
            self.encoder()
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def encoder(self) -> EncoderConfig:
        base = EncoderConfig(n=self.n, m=self.m, d=self.d, d_a=self.d_a, phi=self.phi)
        return apply_variant(base, self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, optimizer=self.optimizer, epochs=self.epochs,
                           batch_size=self.batch_size, patience=self.patience, seed=self.seed,
                           precision=self.precision, clip=self.clip, workers=self.workers,
                           hide_query_edges=self.hide_query_edges, valid_direction=self.direction,
                           max_valid=self.max_valid)

    def load_split(self) -> DatasetSplit:
        if self.synthetic:
            return generate(self.synthetic).split()
        return load_dataset(self.dataset, self.inductive_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_run_dir() -> str:
    return os.environ.get(RUN_DIR_ENV, "runs")


def _out_dir(args, cfg=None, name="run") -> str:
    path = getattr(args, "out", None) or (cfg.out_dir if cfg is not None else None) \
        or os.path.join(default_run_dir(), name)
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _split_from_args(args) -> DatasetSplit:
    if getattr(args, "synthetic", None):
        return generate(args.synthetic).split()
    if not args.dataset:
        raise ConfigError("give --dataset or --synthetic")
    if not os.path.isdir(args.dataset):
        raise ConfigError(f"dataset directory not found: {args.dataset}")
    return load_dataset(args.dataset, getattr(args, "inductive_dir", None))


def _train_one(cfg: RunConfig, split: DatasetSplit, run_dir: str):
    with nx.precision(cfg.precision):
        params = ModelParameters.init(cfg.encoder(), split.fact_graph.num_relations, seed=cfg.seed)
    params.meta.update({"variant": cfg.variant, "seed": cfg.seed})
    result = fit(params, split, cfg.train_config(), run_dir=run_dir)
    test = evaluate(result.params, split, "test", direction=cfg.direction)
    test.variant, test.seed = cfg.variant, cfg.seed
    return result, test


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    if args.synthetic:
        kg = generate(args.synthetic)
        if args.write:
            kg.write(args.write)
        split = kg.split()
    else:
        split = _split_from_args(args)
    summary = split.summary()
    summary["augmented_relations"] = split.fact_graph.num_relations
    summary["augmented_triples"] = len(split.fact_graph)
    status = 0
    manifest = os.path.join(args.dataset, "manifest.json") if args.dataset else None
    if manifest and os.path.exists(manifest):
        with open(manifest) as fh:
            expected = json.load(fh)
        diffs = {k: (v, summary.get(k)) for k, v in expected.items() if summary.get(k) != v}
        summary["manifest_mismatch"] = diffs
        if diffs:
            status = 1
    out = _out_dir(args, name="prepare")
    _write_json(os.path.join(out, "summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return status


def _run_config(args) -> RunConfig:
    keys = [f.name for f in dataclasses.fields(RunConfig)]
    overrides = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return RunConfig.build(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    split = cfg.load_split()
    run_dir = _out_dir(args, cfg, name=f"train-{split.name}-{cfg.variant}-s{cfg.seed}")
    _write_json(os.path.join(run_dir, "run_config.json"), cfg.to_dict())
    result, test = _train_one(cfg, split, run_dir)
    write_report_json(os.path.join(run_dir, "test_metrics.json"), test)
    write_report_csv(os.path.join(run_dir, "test_metrics.csv"), test)
    print(json.dumps({"best_epoch": result.best_epoch, "valid": result.best_valid,
                      "test": test.to_dict(), "run_dir": run_dir}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    split = _split_from_args(args)
    rep = evaluate(params, split, args.split, direction=args.direction)
    out = _out_dir(args, name="evaluate")
    write_report_csv(os.path.join(out, f"{args.split}_metrics.csv"), rep)
    write_report_json(os.path.join(out, f"{args.split}_metrics.json"), rep)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    split = cfg.load_split()
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    out = _out_dir(args, cfg, name=f"ablate-{split.name}")
    reports = []
    for v in variants:
        for s in seeds:
            run = dataclasses.replace(cfg, variant=v, seed=s)
            run.validate()
            _, test = _train_one(run, split, os.path.join(out, f"{v}-s{s}"))
            reports.append(test)
            write_report_csv(os.path.join(out, "ablation.csv"), reports)
    medians = median_by_variant(reports)
    order = [v for v in VARIANTS if v in medians]
    ok, inversions = ablation_order_holds(medians, order)
    _write_json(os.path.join(out, "ablation_summary.json"),
                {"median_mrr": medians, "order": order, "order_holds": ok, "inversions": inversions})
    print(json.dumps({"median_mrr": medians, "order_holds": ok}, sort_keys=True))
    return 0


def cmd_hops(args) -> int:
    params = load_checkpoint(args.checkpoint)
    split = _split_from_args(args)
    rep = hop_bucket_eval(params, split, args.split, direction=args.direction)
    out = _out_dir(args, name="hops")
    write_report_csv(os.path.join(out, "hops.csv"), rep)
    write_report_json(os.path.join(out, "hops.json"), rep)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def _read_pairs(path, vocab) -> list:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            names = line.split()
            if len(names) not in (2, 3):
                raise ConfigError(f"{path}:{lineno}: expected 'r1 r2 [q]'")
            try:
                pairs.append(tuple(_relation_id(vocab, n) for n in names))
            except KeyError as e:
                raise ConfigError(f"{path}:{lineno}: unknown relation {e.args[0]!r}") from None
    return pairs


def _relation_id(vocab, name) -> int:
    if name.isdigit():
        return int(name)
    R = vocab.num_relations
    if name == "identity":
        return 2 * R
    if name.endswith("_inv") and name[:-4] in vocab.relation_index:
        return vocab.relation_index[name[:-4]] + R
    if name not in vocab.relation_index:
        raise KeyError(name)
    return vocab.relation_index[name]


def cmd_probe_order(args) -> int:
    models = {}
    for item in args.checkpoints.split(","):
        name, _, path = item.partition("=")
        if not path:
            name, path = os.path.basename(os.path.dirname(os.path.abspath(item))) or item, item
        models[name] = load_checkpoint(path)
    split = _split_from_args(args)
    pairs = _read_pairs(args.pairs, split.vocab)
    out = _out_dir(args, name="probe-order")
    shared = None if args.advancing else args.shared_layer
    res = order_sensitivity_probe(models, pairs, shared_layer=shared,
                                  out_csv=os.path.join(out, "probe_order.csv"))
    _write_json(os.path.join(out, "probe_order_summary.json"), res["summary"])
    print(json.dumps(res["summary"], sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    params = load_checkpoint(args.checkpoint)
    split = _split_from_args(args)
    vocab = split.vocab
    try:
        head = vocab.entity_index[args.head]
        rel = _relation_id(vocab, args.relation)
    except KeyError as e:
        raise ConfigError(f"unknown name {e.args[0]!r}") from None
    kg = split.fact_graph
    if args.answer is not None:
        if args.answer not in vocab.entity_index:
            raise ConfigError(f"unknown entity {args.answer!r}")
        answer = vocab.entity_index[args.answer]
    else:
        enc = encode_batch(kg, [head], [rel], params)
        answer = int(np.argmax(score_batch(enc, params, kg.num_entities).data[0]))
    res = extract_evidence_paths(params, kg, head, rel, answer, beam_width=args.beam)
    lines = [f"# query ({args.head}, {args.relation}, ?) answer {vocab.entity_names[answer]} status {res.status}"]
    lines += [p.format(vocab) for p in res.paths]
    text = "\n".join(lines) + "\n"
    out = _out_dir(args, name="extract")
    with open(os.path.join(out, "evidence.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def gradcheck_instance(cfg: EncoderConfig, seed: int, scale: float = 0.5):
    """Loss closure and parameters for one random toy graph (64-bit)."""
    rng = np.random.default_rng(seed)
    split = random_split(num_entities=6, num_relations=2, num_triples=9, seed=seed)
    kg = split.fact_graph
    with nx.precision("float64"):
        params = ModelParameters.init(cfg, kg.num_relations, seed=seed)
    # larger-than-init weights keep gradients well away from round-off level
    for _, p in params.named_parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    q = split.train_queries[int(rng.integers(len(split.train_queries)))]
    answers = {int(q[2])}

    def loss_fn():
        enc = encode_batch(kg, [int(q[0])], [int(q[1])], params)
        return multiclass_log_loss(score_batch(enc, params, kg.num_entities), [answers])

    return loss_fn, params


def random_toy_config(seed: int, variant: str = "full-qrfgu") -> EncoderConfig:
    """n in 1..3, m in 0..2, d in 2..8, drawn from the instance seed."""
    rng = np.random.default_rng([seed, 7])
    n, m, d = int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(2, 9))
    phi = str(rng.choice(["relu", "tanh", "identity"]))
    return apply_variant(EncoderConfig(n=n, m=m, d=d, phi=phi), variant)


def cmd_gradcheck(args) -> int:
    over = {k: getattr(args, k) for k in ("n", "m", "d", "d_a", "phi", "variant")}
    over = {k: v for k, v in over.items() if v is not None}
    values = {}
    if args.config:
        with open(args.config) as fh:
            values = {k: v for k, v in json.load(fh).items() if k in ("n", "m", "d", "d_a", "phi", "variant")}
    values.update(over)
    variant = values.pop("variant", "full-qrfgu")
    try:
        cfg = apply_variant(EncoderConfig(**{"n": 2, "m": 1, "d": 4, **values}), variant)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if cfg.d > 16 or cfg.num_layers > 6:
        raise ConfigError("gradcheck is meant for toy sizes (d <= 16, n + m <= 6)")
    reports = []
    worst = 0.0
    for i in range(args.instances):
        if args.random_configs:
            cfg = random_toy_config(args.seed + i, variant)
        loss_fn, params = gradcheck_instance(cfg, args.seed + i)
        names, ps = zip(*params.named_parameters())
        rep = nx.finite_diff_check(loss_fn, ps, epsilon=args.epsilon, tolerance=args.tolerance, names=names)
        reports.append({"seed": args.seed + i, "config": cfg.to_dict(), "passed": rep.passed,
                        "max_rel_error": rep.max_rel_error, "flagged": rep.flagged[:20]})
        worst = max(worst, rep.worst)
    passed = all(r["passed"] for r in reports)
    out = _out_dir(args, name="gradcheck")
    _write_json(os.path.join(out, "gradcheck.json"),
                {"config": None if args.random_configs else cfg.to_dict(), "tolerance": args.tolerance,
                 "passed": passed, "worst": worst, "instances": reports})
    print(json.dumps({"passed": passed, "worst": worst, "instances": len(reports)}))
    return 0 if passed else 2


# ---------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=sorted(nx.DTYPES), default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="output directory (default: $%s/<command>)" % RUN_DIR_ENV)


def _add_data(p):
    p.add_argument("--dataset", help="directory with train.txt, valid.txt, test.txt")
    p.add_argument("--inductive-dir", dest="inductive_dir")
    p.add_argument("--synthetic", help="generator spec, e.g. family:families=30,seed=7")


def _add_run(p):
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS))
    for key, typ in (("n", int), ("m", int), ("d", int), ("d_a", int), ("lr", float), ("epochs", int),
                     ("batch_size", int), ("patience", int), ("clip", float), ("max_valid", int)):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    p.add_argument("--phi", choices=sorted(nx.ACTIVATIONS))
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--direction", choices=["both", "tail-only"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rungnn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate a dataset and print its statistics")
    _add_data(p)
    _add_common(p)
    p.add_argument("--write", help="write the synthetic dataset files to this directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model with early stopping")
    _add_data(p)
    _add_run(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="filtered ranking metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    _add_common(p)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--direction", choices=["both", "tail-only"], default="both")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and test every variant x seed")
    _add_data(p)
    _add_run(p)
    _add_common(p)
    p.add_argument("--variants", help="comma separated, default all")
    p.add_argument("--seeds", help="comma separated, default --seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("hops", help="metrics by head-to-answer hop distance")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    _add_common(p)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--direction", choices=["both", "tail-only"], default="both")
    p.set_defaults(func=cmd_hops)

    p = sub.add_parser("probe-order", help="distance between [r1,r2] and [r2,r1] path encodings")
    p.add_argument("--checkpoints", required=True, help="name=path,name=path")
    p.add_argument("--pairs", required=True, help="file with 'r1 r2 [q]' relation names per line")
    _add_data(p)
    _add_common(p)
    p.add_argument("--shared-layer", dest="shared_layer", type=int, default=1)
    p.add_argument("--advancing", action="store_true", help="advance the layer with the position instead")
    p.set_defaults(func=cmd_probe_order)

    p = sub.add_parser("extract", help="evidence paths for one query")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    _add_common(p)
    p.add_argument("--head", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--answer", help="default: the top-scored entity")
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model loss")
    p.add_argument("--config")
    for key in ("n", "m", "d", "d_a"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    p.add_argument("--phi", choices=sorted(nx.ACTIVATIONS))
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--random-configs", dest="random_configs", action="store_true",
                   help="draw n, m, d and phi per instance instead of using one config")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "seed", None) is None:
        args.seed = 0
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, CheckpointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NonFiniteLoss, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
