#!/usr/bin/env python3
"""Convert the LINQS Cora release (cora.content, cora.cites) into a graph bundle.

    python scripts/convert_cora.py /path/to/cora out/cora_bundle [--encoding bin]
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from werank.data import GraphBundle, canonical_edges, save_graph_bundle


def read_linqs(root: Path):
    ids, feats, names = [], [], []
    with open(root / "cora.content", encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            ids.append(row[0])
            feats.append([float(v) for v in row[1:-1]])
            names.append(row[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names])
    edges, dropped = [], 0
    with open(root / "cora.cites", encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row[0] in index and row[1] in index:
                edges.append((index[row[0]], index[row[1]]))
            else:
                dropped += 1
    edges, _ = canonical_edges(np.array(edges), len(ids))
    return GraphBundle(len(ids), edges, np.array(feats), labels), classes, dropped


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--encoding", choices=("csv", "bin"), default="bin")
    args = ap.parse_args()
    g, classes, dropped = read_linqs(args.src)
    save_graph_bundle(g, args.out, args.encoding)
    print(f"{g.n_nodes} nodes, {len(g.edges)} edges, {g.feat_dim} features, "
          f"{len(classes)} classes ({dropped} citations to unknown papers dropped) -> {args.out}")


if __name__ == "__main__":
    main()
