#!/usr/bin/env python3
"""Generate the bundled Nations/Kinship/UMLS stand-in datasets.

The original benchmark distributions are not redistributable from this
environment, so the repo ships synthetic stand-ins whose entity, relation,
and split counts match the published statistics exactly. Facts follow a
latent-cluster model: each relation holds between a few (head-cluster,
tail-cluster) cells, plus a small fraction of uniform noise, which gives
the embedding pipeline real selectional structure to learn.

Deterministic: rerunning this script reproduces the committed files byte
for byte.

Usage: python3 scripts/generate_datasets.py [out_root]
"""

import sys
from pathlib import Path

import numpy as np

CONFIGS = {
    "kinship": dict(
        seed=101, n1=104, n2=25, train=8544, test=1074, valid=1068,
        clusters=8, patterns=(3, 5), noise=0.02,
        entity="person", relation="kin"),
    "umls": dict(
        seed=202, n1=135, n2=46, train=5216, test=661, valid=652,
        clusters=9, patterns=(1, 3), noise=0.015,
        entity="concept", relation="sem"),
    "nations": dict(
        seed=303, n1=14, n2=55, train=1592, test=201, valid=199,
        clusters=4, patterns=(3, 5), noise=0.02,
        entity="country", relation="diplo"),
}


def build(cfg):
    rng = np.random.default_rng(cfg["seed"])
    n1, n2 = cfg["n1"], cfg["n2"]
    total = cfg["train"] + cfg["test"] + cfg["valid"]
    n_clusters = cfg["clusters"]

    cluster = np.arange(n1) % n_clusters
    rng.shuffle(cluster)

    # relation -> set of (head cluster, tail cluster) cells it may hold in
    lo, hi = cfg["patterns"]
    cells = [(a, b) for a in range(n_clusters) for b in range(n_clusters)]
    patterns = []
    for _ in range(n2):
        k = int(rng.integers(lo, hi + 1))
        idx = rng.choice(len(cells), size=k, replace=False)
        patterns.append({cells[i] for i in idx})

    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    universe = []  # all on-pattern (r, h, t) with h != t
    for r in range(n2):
        for (ca, cb) in sorted(patterns[r]):
            for h in members[ca]:
                for t in members[cb]:
                    if h != t:
                        universe.append((r, int(h), int(t)))
    n_noise = round(total * cfg["noise"])
    n_struct = total - n_noise
    if len(universe) < n_struct:
        raise SystemExit(
            f"pattern capacity {len(universe)} < needed {n_struct}; "
            f"raise patterns/clusters")

    chosen: set[tuple[int, int, int]] = set()
    order: list[tuple[int, int, int]] = []

    def take(triple):
        if triple not in chosen:
            chosen.add(triple)
            order.append(triple)
            return True
        return False

    # coverage seeds: one fact per relation, then one per uncovered entity;
    # these are forced into the training split so cleaning removes nothing
    by_rel: dict[int, list] = {}
    by_ent: dict[int, list] = {}
    for tr in universe:
        by_rel.setdefault(tr[0], []).append(tr)
        by_ent.setdefault(tr[1], []).append(tr)
        by_ent.setdefault(tr[2], []).append(tr)
    for r in range(n2):
        pool = by_rel[r]
        take(pool[int(rng.integers(0, len(pool)))])
    covered = set()
    for (_, h, t) in order:
        covered.add(h)
        covered.add(t)
    for e in range(n1):
        if e in covered:
            continue
        pool = by_ent.get(e)
        if not pool:
            raise SystemExit(f"entity {e} appears in no pattern cell")
        while not take(pool[int(rng.integers(0, len(pool)))]):
            pass
        covered.add(e)
    n_seed = len(order)

    perm = rng.permutation(len(universe))
    for i in perm:
        if len(order) >= n_struct:
            break
        take(universe[i])

    while len(order) < total:
        h = int(rng.integers(0, n1))
        t = int(rng.integers(0, n1))
        r = int(rng.integers(0, n2))
        if h != t:
            take((r, h, t))

    seeds = order[:n_seed]
    rest = order[n_seed:]
    rest_idx = rng.permutation(len(rest))
    rest = [rest[i] for i in rest_idx]
    train = seeds + rest[:cfg["train"] - n_seed]
    test = rest[cfg["train"] - n_seed:cfg["train"] - n_seed + cfg["test"]]
    valid = rest[cfg["train"] - n_seed + cfg["test"]:]
    assert len(train) == cfg["train"] and len(test) == cfg["test"]
    assert len(valid) == cfg["valid"]

    tr_idx = rng.permutation(len(train))
    train = [train[i] for i in tr_idx]
    ent = [f"{cfg['entity']}_{i:03d}" for i in range(n1)]
    rel = [f"{cfg['relation']}_{i:02d}" for i in range(n2)]
    return {
        "train": [(ent[h], rel[r], ent[t]) for (r, h, t) in train],
        "test": [(ent[h], rel[r], ent[t]) for (r, h, t) in test],
        "valid": [(ent[h], rel[r], ent[t]) for (r, h, t) in valid],
    }


def main():
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else (
        Path(__file__).resolve().parent.parent / "datasets")
    for name, cfg in CONFIGS.items():
        splits = build(cfg)
        outdir = root / name
        outdir.mkdir(parents=True, exist_ok=True)
        for split, rows in splits.items():
            path = outdir / f"{split}.txt"
            with open(path, "w", encoding="utf-8") as fh:
                for h, r, t in rows:
                    fh.write(f"{h}\t{r}\t{t}\n")
            print(f"{path}: {len(rows)} triples")


if __name__ == "__main__":
    main()
