"""Multi-class log loss, Adam, epoch loop with early stopping, checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .kg import DatasetSplit, KnowledgeGraph, with_inverses
from .model import EncoderConfig, ModelParameters, encode_batch, query_exclusions, score_batch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch, batch, query, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}, query {query}")
        self.epoch, self.batch, self.query, self.value = epoch, batch, query, value


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 80
    batch_size: int = 16  # query groups per optimizer step
    patience: int = 5
    seed: int = 0
    precision: str = "float32"
    clip: float | None = None  # global grad-norm clip, off by default
    workers: int = 1
    hide_query_edges: bool = True  # drop (s,q,a) and its inverse from the graph while training on it
    eval_batch: int = 32
    valid_direction: str = "both"
    max_valid: int | None = None  # subsample validation queries (None = all)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs, patience, batch_size and workers must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in nx.DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- queries and loss


@dataclass(frozen=True)
class QueryGroup:
    head: int
    relation: int
    answers: frozenset

    def __post_init__(self):
        if not self.answers:
            raise ValueError("query group without answers")


def query_groups(triples, base_relation_count: int, inverses: bool = True) -> list:
    """Collapse training triples sharing (head, relation); sorted by (head, relation)."""
    t = with_inverses(triples, base_relation_count) if inverses else np.asarray(triples).reshape(-1, 3)
    groups = {}
    for h, r, o in t.tolist():
        groups.setdefault((h, r), set()).add(o)
    return [QueryGroup(h, r, frozenset(a)) for (h, r), a in sorted(groups.items())]


def multiclass_log_loss(scores, answers) -> nx.Tensor:
    """sum over queries b and answers o of  -score[b, o] + logsumexp_v score[b, v].

    ``scores`` is (B, V) or (V,); ``answers`` a list of B collections (or one
    collection when scores is 1-D).
    """
    scores = nx.as_tensor(scores)
    if scores.data.ndim == 1:
        scores = nx.reshape(scores, (1, scores.shape[0]))
        answers = [answers]
    rows, cols, counts = [], [], []
    for b, ans in enumerate(answers):
        ans = sorted(ans)
        if not ans:
            raise ValueError(f"query {b} has no answers")
        rows += [b] * len(ans)
        cols += ans
        counts.append(len(ans))
    lse = nx.logsumexp_rows(scores)
    norm = nx.total(nx.mul(lse, nx.Tensor(np.asarray(counts, dtype=scores.dtype))))
    return nx.sub(norm, nx.total(nx.take(scores, rows, cols)))


def per_query_loss(scores: np.ndarray, answers) -> np.ndarray:
    """Forward-only loss per query, used for diagnostics."""
    mx = scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(scores - mx).sum(axis=1)) + mx[:, 0]
    return np.array([sum(lse[b] - scores[b, o] for o in ans) for b, ans in enumerate(answers)])


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip=None, kind="adam"):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.clip, self.kind = lr, beta1, beta2, eps, clip, kind
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig):
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip, cfg.optimizer)

    def step(self) -> float:
        """Apply one update from the parameters' .grad; returns the pre-clip grad norm."""
        grads = [p.grad for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / (norm + 1e-12)
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p.data -= (self.lr * scale * g).astype(p.dtype)
            return norm
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale if scale != 1.0 else g
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype)
        return norm

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


# ---------------------------------------------------------------- gradients


def _chunk_loss(kg: KnowledgeGraph, params: ModelParameters, groups, hide: bool, into=None):
    heads = [g.head for g in groups]
    rels = [g.relation for g in groups]
    answers = [g.answers for g in groups]
    exclude = query_exclusions(kg, heads, rels, answers) if hide else None
    with nx.Tape() as tape:
        enc = encode_batch(kg, heads, rels, params, exclude=exclude)
        scores = score_batch(enc, params, kg.num_entities)
        loss = multiclass_log_loss(scores, answers)
    value = float(loss.data)
    if np.isfinite(value):
        tape.backward(loss, into=into)
    tape.clear()
    return value, scores.data, sum(enc.message_counts)


def batch_gradients(kg, params: ModelParameters, groups, hide=True, workers=1):
    """Loss over a batch of query groups; gradients land in each parameter's .grad.

    With several workers the batch is cut into contiguous chunks, each chunk
    runs on its own tape and the coordinator adds the chunk gradients in
    chunk order.
    """
    if workers <= 1 or len(groups) < 2:
        value, scores, msgs = _chunk_loss(kg, params, groups, hide)
        return value, [scores], msgs
    k = min(workers, len(groups))
    bounds = np.linspace(0, len(groups), k + 1).astype(int)
    chunks = [groups[bounds[i]:bounds[i + 1]] for i in range(k)]
    dicts = [dict() for _ in chunks]
    with ThreadPoolExecutor(max_workers=k) as pool:
        results = list(pool.map(lambda a: _chunk_loss(kg, params, a[0], hide, into=a[1]),
                                zip(chunks, dicts)))
    for p in params.parameters():
        for dct in dicts:
            if p in dct:
                p.grad += dct[p]
    return sum(r[0] for r in results), [r[1] for r in results], sum(r[2] for r in results)


# ---------------------------------------------------------------- epochs


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    grad_norm: float  # mean pre-clip norm over batches
    messages: int
    seconds: float
    batches: int


def train_epoch(params: ModelParameters, split: DatasetSplit, config: TrainConfig, optimizer=None,
                epoch: int = 0, groups=None, rng=None) -> EpochStats:
    """One pass over the training query groups in seeded shuffled order."""
    kg = split.fact_graph
    if kg.num_relations != params.num_relations:
        raise ValueError(f"graph has {kg.num_relations} relations, model expects {params.num_relations}")
    if groups is None:
        groups = query_groups(split.train_queries, kg.base_relation_count)
    if optimizer is None:
        optimizer = Adam.from_config(params.parameters(), config)
    if rng is None:
        rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(groups))
    t0 = time.perf_counter()
    total, norms, msgs, nb = 0.0, [], 0, 0
    for bi, start in enumerate(range(0, len(order), config.batch_size)):
        batch = [groups[i] for i in order[start:start + config.batch_size]]
        params.zero_grad()
        value, score_chunks, n_msg = batch_gradients(kg, params, batch, config.hide_query_edges,
                                                     config.workers)
        if not np.isfinite(value):
            per = per_query_loss(np.concatenate(score_chunks), [g.answers for g in batch])
            bad = int(np.flatnonzero(~np.isfinite(per))[0]) if np.any(~np.isfinite(per)) else 0
            g = batch[bad]
            raise NonFiniteLoss(epoch, bi, (g.head, g.relation), value)
        norms.append(optimizer.step())
        total += value
        msgs += n_msg
        nb += 1
    n_answers = sum(len(g.answers) for g in groups)
    return EpochStats(epoch, total / max(n_answers, 1), float(np.mean(norms)) if norms else 0.0,
                      msgs, time.perf_counter() - t0, nb)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParameters, extra: dict | None = None) -> None:
    """npz container: one array per parameter name plus a JSON header."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "num_relations": params.num_relations,
        "precision": str(np.dtype(params.dtype).name),
        "params": {name: {"shape": list(p.shape), "dtype": p.dtype.name}
                   for name, p in params.named_parameters()},
    }
    meta.update(params.meta)
    if extra:
        meta.update(extra)
    arrays = {name: p.data for name, p in params.named_parameters()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint_meta(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            return json.loads(str(z["__meta__"]))
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def load_checkpoint(path) -> ModelParameters:
    meta = read_checkpoint_meta(path)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    config = EncoderConfig(**meta["config"])
    with nx.precision(meta["precision"]):
        params = ModelParameters.init(config, meta["num_relations"], seed=0)
    try:
        with np.load(path, allow_pickle=False) as z:
            for name, p in params.named_parameters():
                arr = z[name]
                if arr.shape != p.shape:
                    raise CheckpointError(f"{name}: stored shape {arr.shape}, expected {p.shape}")
                p.data = arr.copy()
                p.zero_grad()
    except (KeyError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    params.meta = {k: v for k, v in meta.items()
                   if k not in ("format_version", "config", "num_relations", "precision", "params")}
    return params


# ---------------------------------------------------------------- fit


LOG_FIELDS = ["epoch", "mean_loss", "valid_MRR", "valid_Hit@1", "valid_Hit@10", "seconds", "messages"]


@dataclass
class FitResult:
    params: ModelParameters  # best-by-validation parameters
    best_epoch: int
    best_valid: dict
    history: list = field(default_factory=list)
    stopped_early: bool = False
    run_dir: str | None = None


def fit(params: ModelParameters, split: DatasetSplit, config: TrainConfig, run_dir=None,
        evaluate_fn=None, on_epoch=None) -> FitResult:
    """Train with early stopping on validation MRR.

    ``evaluate_fn(params) -> report`` overrides the default filtered
    validation evaluation (useful in tests).
    """
    from .evaluation import evaluate  # evaluation imports training for checkpoints

    if len(split.valid_queries) == 0:
        raise ValueError("validation split is empty")
    if evaluate_fn is None:
        def evaluate_fn(p):
            return evaluate(p, split, which="valid", direction=config.valid_direction,
                            batch_size=config.eval_batch, limit=config.max_valid, seed=config.seed)
    kg = split.fact_graph
    groups = query_groups(split.train_queries, kg.base_relation_count)
    opt = Adam.from_config(params.parameters(), config)
    best_mrr, best_epoch, best_state, best_report = -1.0, 0, None, None
    history, stale, stopped = [], 0, False
    log_fh = writer = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        log_fh = open(os.path.join(run_dir, "train_log.csv"), "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_FIELDS)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump({"encoder": params.config.to_dict(), "train": config.to_dict(),
                       "dataset": split.name}, fh, indent=2, sort_keys=True)
    try:
        for epoch in range(1, config.epochs + 1):
            stats = train_epoch(params, split, config, opt, epoch, groups)
            t0 = time.perf_counter()
            rep = evaluate_fn(params)
            mrr = float(rep.mrr)
            row = {"epoch": epoch, "mean_loss": stats.mean_loss, "valid_MRR": mrr,
                   "valid_Hit@1": rep.hit1, "valid_Hit@10": rep.hit10,
                   "seconds": stats.seconds + time.perf_counter() - t0, "messages": stats.messages}
            history.append(row)
            if writer is not None:
                writer.writerow([f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in LOG_FIELDS])
                log_fh.flush()
            log.info("epoch %d loss %.4f valid MRR %.4f H@1 %.4f (%.0fs)", epoch, stats.mean_loss,
                     mrr, rep.hit1, row["seconds"])
            if on_epoch is not None:
                on_epoch(row)
            # ties go to the newer parameters; only a strict gain resets patience
            stale = 0 if mrr > best_mrr else stale + 1
            if mrr >= best_mrr:
                best_mrr, best_epoch, best_report = mrr, epoch, rep
                best_state = [p.data.copy() for p in params.parameters()]
                if run_dir is not None:
                    save_checkpoint(os.path.join(run_dir, "best.ckpt"), params,
                                    {"valid_mrr": mrr, "epoch": epoch, "dataset": split.name,
                                     "seed": config.seed})
            if run_dir is not None:
                save_checkpoint(os.path.join(run_dir, "last.ckpt"), params,
                                {"valid_mrr": mrr, "epoch": epoch, "dataset": split.name,
                                 "seed": config.seed})
            if stale >= config.patience:
                stopped = True
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    for p, arr in zip(params.parameters(), best_state):
        p.data = arr
    best = {"mrr": best_mrr, "hit1": best_report.hit1, "hit10": best_report.hit10, "epoch": best_epoch}
    return FitResult(params, best_epoch, best, history, stopped, run_dir)
