"""Filtered ranking, hop buckets, ablation variants, path-order probe, evidence paths."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .kg import UNREACHABLE, DatasetSplit, KnowledgeGraph, hop_distances
from .model import (
    VARIANTS,
    ModelParameters,
    apply_variant,
    encode_batch,
    encode_relation_path,
    score_nodes,
)

REPORT_FIELDS = ["variant", "seed", "bucket", "count", "mrr", "hit1", "hit3", "hit10"]
HOP_BUCKETS = ("1", "2", "3", "4", "5", "6", "other")


@dataclass(frozen=True)
class RankingResult:
    query: tuple  # (head, relation)
    target: int
    rank: int
    reached: bool = True


def rank_answer(scores, target: int, filter_mask=(), query=(-1, -1), reached=True) -> RankingResult:
    """Filtered rank with ties counted half, rounded up: 1 + #greater + ceil(#ties / 2)."""
    scores = np.asarray(scores)
    keep = np.ones(len(scores), dtype=bool)
    mask = list(filter_mask)
    if target in mask:
        raise ValueError("target is inside its own filter mask")
    if mask:
        keep[mask] = False
    keep[target] = False
    s_t = scores[target]
    others = scores[keep]
    greater = int(np.sum(others > s_t))
    ties = int(np.sum(others == s_t))
    return RankingResult(tuple(query), int(target), 1 + greater + (ties + 1) // 2, bool(reached))


def _ranks_for_row(scores: np.ndarray, targets, answers) -> list:
    # every target shares the filter "all other answers", so drop all answers once
    keep = np.ones(len(scores), dtype=bool)
    keep[list(answers)] = False
    others = scores[keep]
    ranks = []
    for t in targets:
        s_t = scores[t]
        ranks.append(1 + int(np.sum(others > s_t)) + (int(np.sum(others == s_t)) + 1) // 2)
    return ranks


@dataclass
class MetricsReport:
    mrr: float
    hit1: float
    hit3: float
    hit10: float
    count: int
    buckets: dict = field(default_factory=dict)  # bucket name -> MetricsReport
    variant: str = ""
    seed: int | None = None
    results: list = field(default_factory=list, repr=False)

    def row(self, bucket="ALL") -> dict:
        return {"variant": self.variant, "seed": self.seed, "bucket": bucket, "count": self.count,
                "mrr": self.mrr, "hit1": self.hit1, "hit3": self.hit3, "hit10": self.hit10}

    def rows(self) -> list:
        out = [self.row("ALL")]
        for name, sub in self.buckets.items():
            r = sub.row(name)
            r["variant"], r["seed"] = self.variant, self.seed
            out.append(r)
        return out

    def to_dict(self) -> dict:
        d = self.row("ALL")
        if self.buckets:
            d["buckets"] = {k: v.row(k) for k, v in self.buckets.items()}
        return d


def compute_metrics(results) -> MetricsReport:
    """MRR and Hit@{1,3,10} from RankingResults (or plain ranks)."""
    results = list(results)
    if not results:
        raise ValueError("no ranking results")
    ranks = np.array([r.rank if isinstance(r, RankingResult) else int(r) for r in results], dtype=np.float64)
    return MetricsReport(
        mrr=float(np.mean(1.0 / ranks)),
        hit1=float(np.mean(ranks <= 1)),
        hit3=float(np.mean(ranks <= 3)),
        hit10=float(np.mean(ranks <= 10)),
        count=len(ranks),
        results=[r for r in results if isinstance(r, RankingResult)],
    )


def _empty_report() -> MetricsReport:
    return MetricsReport(0.0, 0.0, 0.0, 0.0, 0)


def evaluation_queries(triples, base_relation_count: int, direction: str = "both") -> np.ndarray:
    """(head, relation, target) rows: the triples, plus inverse-direction copies for 'both'."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if direction == "tail-only":
        return t
    if direction != "both":
        raise ValueError(f"direction must be 'both' or 'tail-only', got {direction!r}")
    inv = t[:, [2, 1, 0]].copy()
    inv[:, 1] += base_relation_count
    return np.concatenate([t, inv])


def rank_queries(params: ModelParameters, kg: KnowledgeGraph, queries, all_true: dict,
                 batch_size: int = 32) -> list:
    """Encode each distinct (head, relation) once and rank all of its targets."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    groups = {}
    for h, r, t in queries.tolist():
        groups.setdefault((h, r), []).append(t)
    keys = sorted(groups)
    V = kg.num_entities
    out = []
    for start in range(0, len(keys), batch_size):
        chunk = keys[start:start + batch_size]
        enc = encode_batch(kg, [k[0] for k in chunk], [k[1] for k in chunk], params)
        node_scores = score_nodes(enc.states, params).data
        dense = np.zeros((len(chunk), V), dtype=node_scores.dtype)
        dense[enc.node_query, enc.node_entity] = node_scores
        reached = np.zeros((len(chunk), V), dtype=bool)
        reached[enc.node_query, enc.node_entity] = True
        for b, key in enumerate(chunk):
            targets = groups[key]
            answers = all_true.get(key, set()) | set(targets)
            for t, rk in zip(targets, _ranks_for_row(dense[b], targets, answers)):
                out.append(RankingResult(key, t, rk, bool(reached[b, t])))
    return out


def evaluate(params: ModelParameters, split: DatasetSplit, which: str = "test", direction: str = "both",
             batch_size: int = 32, limit: int | None = None, seed: int = 0) -> MetricsReport:
    """Filtered MRR / Hit@K on one split. ``limit`` subsamples that many triples (seeded)."""
    triples = split.queries(which)
    if limit is not None and limit < len(triples):
        idx = np.sort(np.random.default_rng(seed).choice(len(triples), limit, replace=False))
        triples = triples[idx]
    kg = split.graph_for(which)
    q = evaluation_queries(triples, kg.base_relation_count, direction)
    results = rank_queries(params, kg, q, split.all_true(which), batch_size)
    rep = compute_metrics(results)
    rep.variant = params.meta.get("variant", "")
    rep.seed = params.meta.get("seed")
    return rep


def hop_bucket(distance: int) -> str:
    if distance == UNREACHABLE or distance < 1 or distance > 6:
        return "other"
    return str(int(distance))


def hop_bucket_eval(params: ModelParameters, split: DatasetSplit, which: str = "test",
                    direction: str = "both", batch_size: int = 32) -> MetricsReport:
    """Metrics overall and per bucket of head-to-target BFS distance on the fact graph."""
    kg = split.graph_for(which)
    q = evaluation_queries(split.queries(which), kg.base_relation_count, direction)
    results = rank_queries(params, kg, q, split.all_true(which), batch_size)
    dist_cache = {}
    buckets = {b: [] for b in HOP_BUCKETS}
    for r in results:
        h = r.query[0]
        if h not in dist_cache:
            dist_cache[h] = hop_distances(kg, h)
        buckets[hop_bucket(int(dist_cache[h][r.target]))].append(r)
    rep = compute_metrics(results)
    rep.buckets = {b: (compute_metrics(v) if v else _empty_report()) for b, v in buckets.items()}
    rep.variant = params.meta.get("variant", "")
    rep.seed = params.meta.get("seed")
    return rep


# ---------------------------------------------------------------- order probe


def cosine_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def order_sensitivity_probe(models: dict, pairs, shared_layer: int | None = 1, out_csv=None) -> dict:
    """Cosine distance between the encodings of [r1, r2] and [r2, r1] for each model.

    ``models`` maps a variant name to ModelParameters; ``pairs`` holds
    (r1, r2) or (r1, r2, q) tuples (q defaults to the identity relation).
    With ``shared_layer`` set, every position uses that layer's embeddings;
    with None the layer advances with the position.
    """
    rows = []
    summary = {}
    for name, params in models.items():
        dists = []
        q_default = params.num_relations - 1
        for pair in pairs:
            r1, r2 = int(pair[0]), int(pair[1])
            q = int(pair[2]) if len(pair) > 2 else q_default
            a = encode_relation_path([r1, r2], q, params, shared_layer=shared_layer)
            b = encode_relation_path([r2, r1], q, params, shared_layer=shared_layer)
            dist = cosine_distance(a, b)
            dists.append(dist)
            rows.append({"variant": name, "r1": r1, "r2": r2, "q": q, "distance": dist})
        summary[name] = {"mean": float(np.mean(dists)) if dists else 0.0,
                         "median": float(np.median(dists)) if dists else 0.0,
                         "max": float(np.max(dists)) if dists else 0.0,
                         "pairs": len(dists)}
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["variant", "r1", "r2", "q", "distance"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "distance": f"{r['distance']:.8g}"})
    return {"rows": rows, "summary": summary}


# ---------------------------------------------------------------- evidence paths


@dataclass
class EvidencePath:
    triples: list  # [(head, relation, tail)] with identity steps removed
    weights: list  # attention weight of each listed triple
    score: float  # product of the weights of every traversed edge (identity steps included)

    def format(self, vocab=None) -> str:
        def ent(e):
            return vocab.entity_names[e] if vocab is not None else str(e)

        def rel(r):
            return vocab.augmented_relation_name(r) if vocab is not None else str(r)

        if not self.triples:
            return f"(identity)  score={self.score:.4g}"
        parts = [ent(self.triples[0][0])]
        for (h, r, t), w in zip(self.triples, self.weights):
            parts.append(f"-[{rel(r)}:{w:.3f}]-> {ent(t)}")
        return " ".join(parts) + f"  score={self.score:.4g}"


@dataclass
class EvidenceResult:
    status: str  # "ok" or a reason why nothing was extracted
    paths: list


def extract_evidence_paths(params: ModelParameters, kg: KnowledgeGraph, head: int, relation: int,
                           answer: int, beam_width: int = 3) -> EvidenceResult:
    """Backward beam search over the per-layer attention from the answer to the head."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    enc = encode_batch(kg, [head], [relation], params)
    final = np.flatnonzero(enc.node_entity == answer)
    if len(final) == 0:
        return EvidenceResult(f"answer {answer} not reached within {params.config.n} hops", [])
    identity = kg.identity_relation
    # beam entries: (score, node index in the current layer's list, reversed edge list)
    beam = [(1.0, int(final[0]), [])]
    for trace in reversed(enc.traces):
        order = np.argsort(trace.edge_dst, kind="stable")
        dst_sorted = trace.edge_dst[order]
        cand = []
        for score, node, edges in beam:
            lo, hi = np.searchsorted(dst_sorted, node), np.searchsorted(dst_sorted, node, side="right")
            inc = order[lo:hi]
            inc = inc[np.argsort(-trace.attention[inc], kind="stable")][:beam_width]
            for e in inc:
                w = float(trace.attention[e])
                cand.append((score * w, int(trace.edge_src[e]), edges + [(int(trace.edge_ids[e]), w)]))
        cand.sort(key=lambda c: -c[0])
        beam = cand[:beam_width]
    paths = {}
    for score, _, edges in beam:
        kept = [(tuple(int(x) for x in kg.triples[eid]), w) for eid, w in reversed(edges)
                if kg.triples[eid, 1] != identity]
        key = tuple(t for t, _ in kept)
        if key not in paths or paths[key].score < score:
            paths[key] = EvidencePath([t for t, _ in kept], [w for _, w in kept], score)
    ordered = sorted(paths.values(), key=lambda p: -p.score)
    return EvidenceResult("ok", ordered)


# ---------------------------------------------------------------- reports


def write_report_csv(path, reports) -> None:
    """One row per (report, bucket) with the fixed report fields."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else ("" if v is None else v))
                            for k, v in row.items()})


def write_report_json(path, reports) -> None:
    if isinstance(reports, MetricsReport):
        payload = reports.to_dict()
    else:
        payload = [r.to_dict() for r in reports]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def median_by_variant(reports) -> dict:
    by = {}
    for r in reports:
        by.setdefault(r.variant, []).append(r.mrr)
    return {k: float(np.median(v)) for k, v in by.items()}


def ablation_order_holds(medians: dict, order=VARIANTS, slack: float = 0.005) -> tuple:
    """Check medians[order[0]] >= medians[order[1]] >= ... allowing one adjacent inversion within slack."""
    inversions = []
    for a, b in zip(order[:-1], order[1:]):
        if medians[a] < medians[b]:
            inversions.append((a, b, medians[b] - medians[a]))
    ok = not inversions or (len(inversions) == 1 and inversions[0][2] <= slack)
    return ok, inversions


__all__ = [
    "RankingResult", "MetricsReport", "EvidencePath", "EvidenceResult", "rank_answer", "compute_metrics",
    "evaluate", "hop_bucket_eval", "order_sensitivity_probe", "extract_evidence_paths", "apply_variant",
    "write_report_csv", "write_report_json", "cosine_distance", "evaluation_queries", "rank_queries",
    "median_by_variant", "ablation_order_holds", "VARIANTS",
]
