#!/usr/bin/env python3
"""Re-split a small benchmark into 30% train / 20% valid / 50% test.

Usage: split_dataset.py <src_dir> <dst_dir> [seed]

All triples from train/valid/test in <src_dir> are pooled, shuffled with the
given seed and re-split. The seed is bumped until the training split covers
every entity and relation, so the training vocabulary is complete.
"""
import random
import sys
from pathlib import Path


def read(path):
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            h, r, t = line.split("\t")
            out.append((h, r, t))
    return out


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
    pool = []
    for split in ("train", "valid", "test"):
        pool.extend(read(src / f"{split}.txt"))
    pool = sorted(set(pool))
    ents = {x for h, _, t in pool for x in (h, t)}
    rels = {r for _, r, _ in pool}
    n_train = round(0.3 * len(pool))
    n_valid = round(0.2 * len(pool))
    while True:
        rng = random.Random(seed)
        order = pool[:]
        rng.shuffle(order)
        train = order[:n_train]
        if {x for h, _, t in train for x in (h, t)} == ents and {r for _, r, _ in train} == rels:
            break
        seed += 1
    dst.mkdir(parents=True, exist_ok=True)
    parts = {
        "train": train,
        "valid": order[n_train:n_train + n_valid],
        "test": order[n_train + n_valid:],
    }
    for name, rows in parts.items():
        (dst / f"{name}.txt").write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows))
    print(f"seed={seed} entities={len(ents)} relations={len(rels)} "
          + " ".join(f"{k}={len(v)}" for k, v in parts.items()))


if __name__ == "__main__":
    main()
