#!/usr/bin/env python3
"""Convert citation datasets into the ckgnn text format.

Two input layouts are understood:

  linqs      <dir>/<name>.content and <dir>/<name>.cites
             (paper id, binary word features, class label / cited, citing)
  planetoid  <dir>/ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}
             (pickled arrays; needs numpy and scipy). The fixed split is
             written as mask lines: train = the labeled nodes, val = the
             next 500, test = the test index.

Citations are undirected in the output. Self-citations and repeated or
reciprocal citations collapse to a single edge; both counts are reported.
Features are row-normalised to sum 1 unless --raw-features is given.

Example:
  python3 scripts/convert_citation.py planetoid data/planetoid cora cora.txt
  ckgnn train --data cora.txt --split file --model gcn
"""

import argparse
import os
import pickle
import sys


def read_linqs(directory, name):
    ids, feats, labels = [], [], []
    with open(os.path.join(directory, name + ".content")) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append([float(v) for v in parts[1:-1]])
            labels.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(labels))
    label_ids = [classes.index(l) for l in labels]
    pairs, missing = [], 0
    with open(os.path.join(directory, name + ".cites")) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a not in index or b not in index:
                missing += 1
                continue
            pairs.append((index[a], index[b]))
    if missing:
        print(f"skipped {missing} citations to papers without features", file=sys.stderr)
    return feats, label_ids, len(classes), pairs, None


def _load_pickle(path):
    with open(path, "rb") as f:
        return pickle.load(f, encoding="latin1")


def read_planetoid(directory, name):
    import numpy as np
    import scipy.sparse as sp

    def part(ext):
        return _load_pickle(os.path.join(directory, f"ind.{name}.{ext}"))

    x, y, tx, ty, allx, ally, graph = (part(e) for e in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    with open(os.path.join(directory, f"ind.{name}.test.index")) as f:
        test_idx = [int(line) for line in f if line.strip()]
    test_sorted = sorted(test_idx)

    # Some test indices have no features (isolated nodes in Citeseer); pad
    # them with zero rows so ids stay aligned with the graph.
    lo, hi = test_sorted[0], test_sorted[-1]
    if hi - lo + 1 != tx.shape[0]:
        tx_full = sp.lil_matrix((hi - lo + 1, tx.shape[1]))
        tx_full[np.array(test_sorted) - lo, :] = tx
        tx = tx_full
        ty_full = np.zeros((hi - lo + 1, y.shape[1]))
        ty_full[np.array(test_sorted) - lo, :] = ty
        ty = ty_full

    features = sp.vstack((allx, tx)).tolil()
    features[test_idx, :] = features[test_sorted, :]
    labels = np.vstack((ally, ty))
    labels[test_idx, :] = labels[test_sorted, :]
    n = features.shape[0]

    # Rows with no label (padding) get class 0 and stay out of every mask.
    label_ids = [int(row.argmax()) for row in labels]
    pairs = [(i, j) for i, nbrs in graph.items() for j in nbrs if i < n and j < n]
    train = list(range(y.shape[0]))
    val = list(range(y.shape[0], y.shape[0] + 500))
    masks = (train, val, test_sorted)
    dense = features.toarray()
    return [list(map(float, r)) for r in dense], label_ids, labels.shape[1], pairs, masks


def undirected(pairs):
    loops = sum(1 for a, b in pairs if a == b)
    edges = sorted({(min(a, b), max(a, b)) for a, b in pairs if a != b})
    return edges, loops


def write(path, feats, labels, c, edges, masks, normalise):
    n, d = len(feats), len(feats[0]) if feats else 0
    with open(path, "w") as f:
        f.write(f"{n} {d} {c}\n")
        for i, (row, lab) in enumerate(zip(feats, labels)):
            if normalise:
                s = sum(row)
                if s > 0:
                    row = [v / s for v in row]
            f.write(f"N {i} {lab} " + " ".join(repr(v) if v else "0" for v in row) + "\n")
        for a, b in edges:
            f.write(f"E {a} {b}\n")
        if masks:
            for tag, ids in zip(("train", "val", "test"), masks):
                f.write(f"M {tag} " + " ".join(map(str, ids)) + "\n")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("layout", choices=["linqs", "planetoid"])
    p.add_argument("directory")
    p.add_argument("name", help="dataset name, e.g. cora")
    p.add_argument("out")
    p.add_argument("--raw-features", action="store_true", help="keep features unnormalised")
    args = p.parse_args()

    reader = read_linqs if args.layout == "linqs" else read_planetoid
    feats, labels, c, pairs, masks = reader(args.directory, args.name)
    edges, loops = undirected(pairs)
    write(args.out, feats, labels, c, edges, masks, not args.raw_features)
    print(
        f"{args.out}: n={len(feats)} d={len(feats[0]) if feats else 0} c={c} "
        f"citations={len(pairs)} undirected_edges={len(edges)} self_loops_dropped={loops}",
        file=sys.stderr,
    )


if __name__ == "__main__":
    main()
