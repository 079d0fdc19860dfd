"""Seeded synthetic knowledge graphs with known answers.

Two families of generators:

* ``family_kg``: small three-generation families with planted two-step
  rules. has_aunt <- has_father . has_sister and has_father <- has_sister .
  has_father use the same two relations in opposite orders; has_grandfather
  <- has_father . has_father is also available. Held-out triples are always
  derivable from the remaining facts (checked with a brute-force matcher).
* ``lag_chain_kg``: disconnected gadgets where the right candidate is only
  identifiable through information that reaches it one layer after the
  last exploration layer, the situation buffer layers are meant to fix.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .kg import DatasetSplit, split_from_named

FAMILY_RULES = {
    "has_aunt": ("has_father", "has_sister"),
    "has_father": ("has_sister", "has_father"),
    "has_grandfather": ("has_father", "has_father"),
}


@dataclass
class SyntheticKG:
    train: list  # (head, relation, tail) name triples
    valid: list
    test: list
    name: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def split(self) -> DatasetSplit:
        return split_from_named(self.train, self.valid, self.test, name=self.name)

    def write(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for fname, rows in (("train.txt", self.train), ("valid.txt", self.valid), ("test.txt", self.test)):
            with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
                for h, r, t in rows:
                    fh.write(f"{h}\t{r}\t{t}\n")


# ---------------------------------------------------------------- rule matcher


def fact_index(triples) -> dict:
    out = {}
    for h, r, t in triples:
        out.setdefault((h, r), set()).add(t)
    return out


def derive(index: dict, head, body) -> set:
    """Entities reachable from ``head`` along the relation sequence ``body``."""
    frontier = {head}
    for r in body:
        nxt = set()
        for e in frontier:
            nxt |= index.get((e, r), set())
        frontier = nxt
    return frontier


def rule_answers(triples, head, relation, rules=FAMILY_RULES) -> set:
    return derive(fact_index(triples), head, rules[relation])


# ---------------------------------------------------------------- families


def _family(rng, f: int):
    """Facts of one family: grandfather g, his children, and the sons' children."""
    facts = []
    g = f"f{f}_g"
    n1 = int(rng.integers(2, 5))
    genders1 = ["m", "f"] + list(rng.choice(["m", "f"], n1 - 2))
    rng.shuffle(genders1)
    gen1 = [(f"f{f}_c{i}", s) for i, s in enumerate(genders1)]

    def siblings(group):
        for a, _ in group:
            for b, sb in group:
                if a != b:
                    facts.append((a, "has_sister" if sb == "f" else "has_brother", b))

    for c, _ in gen1:
        facts.append((c, "has_father", g))
    siblings(gen1)
    daughters = [c for c, s in gen1 if s == "f"]
    for i, (y, s) in enumerate(gen1):
        if s != "m":
            continue
        n2 = int(rng.integers(2, 4))
        gen2 = [(f"f{f}_c{i}_k{j}", str(rng.choice(["m", "f"]))) for j in range(n2)]
        for x, _ in gen2:
            facts.append((x, "has_father", y))
            facts.append((x, "has_grandfather", g))
            for z in daughters:
                facts.append((x, "has_aunt", z))
        siblings(gen2)
    return facts


def family_kg(families: int = 30, seed: int = 0, targets=("has_aunt", "has_father"),
              holdout: float = 0.3, rules=FAMILY_RULES, name: str | None = None,
              relations=None) -> SyntheticKG:
    """Families with rule-derivable valid/test triples for the ``targets`` relations.

    Roughly ``holdout`` of the target-relation facts are held out, half to
    validation and half to test, and only while every held-out triple stays
    derivable by its rule from the remaining facts. ``relations`` keeps only
    facts of those relations, e.g. ("has_father", "has_grandfather") leaves
    father.father as the single two-hop route to a grandfather.
    """
    rng = np.random.default_rng(seed)
    facts = []
    for f in range(families):
        facts += _family(rng, f)
    facts = list(dict.fromkeys(facts))
    if relations is not None:
        facts = [t for t in facts if t[1] in relations]
    cand = [i for i, t in enumerate(facts) if t[1] in targets]
    order = rng.permutation(len(cand))
    budget = int(round(holdout * len(cand)))
    held = set()
    for k in order:
        if len(held) >= budget:
            break
        i = cand[k]
        trial = held | {i}
        remaining = fact_index(t for j, t in enumerate(facts) if j not in trial)
        if all(facts[j][2] in derive(remaining, facts[j][0], rules[facts[j][1]]) for j in trial):
            held = trial
    held = sorted(held)
    held = [held[i] for i in rng.permutation(len(held))]
    n_valid = len(held) // 2
    valid = [facts[j] for j in held[:n_valid]]
    test = [facts[j] for j in held[n_valid:]]
    held_set = set(held)
    train = [t for j, t in enumerate(facts) if j not in held_set]
    kg = SyntheticKG(train, valid, test, name or f"family-s{seed}",
                     {"rules": {k: list(v) for k, v in rules.items() if k in targets},
                      "targets": list(targets), "families": families, "seed": seed})
    kg.meta["discriminating"] = order_discriminating(kg, rules)
    return kg


def order_discriminating(kg: SyntheticKG, rules=FAMILY_RULES) -> list:
    """Test triples (tail direction) whose rule body, read in swapped order, reaches a non-answer."""
    index = fact_index(kg.train)
    truth = fact_index(kg.train + kg.valid + kg.test)
    out = []
    for h, r, t in kg.test:
        if r not in rules:
            continue
        swapped = derive(index, h, tuple(reversed(rules[r])))
        if swapped - truth.get((h, r), set()):
            out.append((h, r, t))
    return out


# ---------------------------------------------------------------- lag chains


def _gadget(rng, g: int, depth: int, k: int, link_len: int):
    """x reaches k look-alike candidates at ``depth`` hops; the right one's
    tagger w is also the end of a ``link_len`` chain of link edges from x."""
    p = f"g{g}_"
    x = p + "x"
    facts = []
    chain = [x] + [f"{p}c{i}" for i in range(1, depth)]
    for a, b in zip(chain[:-1], chain[1:]):
        facts.append((a, "next", b))
    star = int(rng.integers(k))
    ys = [f"{p}y{j}" for j in range(k)]
    ws = [f"{p}w{j}" for j in range(k)]
    hub = chain[depth - 2]  # w_j sits one hop after it, at distance depth-1
    for y, w in zip(ys, ws):
        facts.append((chain[-1], "next", y))
        facts.append((hub, "via", w))
        facts.append((w, "tag", y))
    links = [x] + [f"{p}u{i}" for i in range(1, link_len)] + [ws[star]]
    for a, b in zip(links[:-1], links[1:]):
        facts.append((a, "link", b))
    return facts, (x, "target", ys[star])


def lag_chain_kg(train: int = 60, valid: int = 12, test: int = 24, seed: int = 0, depths=(3, 4),
                 candidates=(3, 4), link_len: int = 4, name: str | None = None) -> SyntheticKG:
    """Gadgets split by component into train/valid/test; one target triple each.

    With ``link_len`` = n exploration layers, the identifying link
    information reaches w at layer n and the candidates only later, so it is
    invisible without buffer layers.
    """
    if min(depths) < 2 or max(depths) > link_len:
        raise ValueError("depths must lie in [2, link_len]")
    rng = np.random.default_rng(seed)
    facts, targets, depth_of = [], [], {}
    for g in range(train + valid + test):
        depth = int(rng.choice(depths))
        k = int(rng.choice(candidates))
        f, tgt = _gadget(rng, g, depth, k, link_len)
        facts += f
        targets.append(tgt)
        depth_of[tgt] = depth
    tr = facts + targets[:train]
    va = targets[train:train + valid]
    te = targets[train + valid:]
    return SyntheticKG(tr, va, te, name or f"lagchain-s{seed}",
                       {"depth": {f"{h}\t{r}\t{t}": d for (h, r, t), d in depth_of.items()},
                        "link_len": link_len, "seed": seed})


GENERATORS = {"family": family_kg, "lagchain": lag_chain_kg}


def parse_generator_spec(spec: str):
    """'family:families=30,seed=7' -> (generator, kwargs)."""
    kind, _, rest = spec.partition(":")
    if kind not in GENERATORS:
        raise ValueError(f"unknown synthetic generator {kind!r}; choose from {sorted(GENERATORS)}")
    kwargs = {}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        if key in ("targets", "relations"):
            kwargs[key] = tuple(val.split("+"))
            continue
        if key in ("depths", "candidates"):
            kwargs[key] = tuple(int(v) for v in val.split("+"))
            continue
        try:
            kwargs[key] = int(val)
        except ValueError:
            kwargs[key] = float(val)
    return GENERATORS[kind], kwargs


def generate(spec: str) -> SyntheticKG:
    fn, kwargs = parse_generator_spec(spec)
    return fn(**kwargs)


# ---------------------------------------------------------------- random graphs


def random_split(num_entities: int = 8, num_relations: int = 2, num_triples: int = 12, seed: int = 0,
                 num_test: int = 2) -> DatasetSplit:
    """Uniformly random triples (no self loops); the last ``num_test`` go to valid and test."""
    rng = np.random.default_rng(seed)
    seen = set()
    rows = []
    tries = 0
    while len(rows) < num_triples + 2 * num_test and tries < 100 * (num_triples + 1):
        tries += 1
        h, t = rng.integers(num_entities, size=2)
        if h == t:
            continue
        key = (f"e{h}", f"r{rng.integers(num_relations)}", f"e{t}")
        if key not in seen:
            seen.add(key)
            rows.append(key)
    train = rows[:len(rows) - 2 * num_test]
    # make every entity and relation known to the vocabulary in a fixed order
    names = [(f"e{i}", f"r{i % num_relations}", f"e{(i + 1) % num_entities}") for i in range(num_entities)]
    train = list(dict.fromkeys(train + names))
    valid = rows[len(rows) - 2 * num_test:len(rows) - num_test]
    test = rows[len(rows) - num_test:]
    return split_from_named(train, valid, test, name=f"random-s{seed}")
