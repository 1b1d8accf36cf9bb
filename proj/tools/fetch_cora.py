#!/usr/bin/env python3
"""Build the Cora citation dataset in the dropedge on-disk format.

The raw Cora tables (2708 papers, 1433 binary word features, 7 subjects,
5429 citation records) ship inside the `graphdatascience` wheel. This script
reads them from an installed copy, a wheel file, or downloads the wheel with
pip, then writes graph.edges, features.csv, labels.csv and splits.json.

Splits are a seeded random permutation: 1208 train, 500 val, 1000 test.
"""

import argparse
import io
import json
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import pandas as pd

WHEEL = "graphdatascience==2.1"
MEMBERS = ("cora_nodes.parquet.gzip", "cora_rels.parquet.gzip")


def tables_from_package():
    try:
        import importlib.resources as res

        base = res.files("graphdatascience.resources.cora")
        return [pd.read_parquet(io.BytesIO((base / m).read_bytes())) for m in MEMBERS]
    except Exception:
        return None


def tables_from_wheel(wheel):
    with zipfile.ZipFile(wheel) as z:
        names = z.namelist()
        out = []
        for m in MEMBERS:
            path = next(n for n in names if n.endswith("resources/cora/" + m))
            out.append(pd.read_parquet(io.BytesIO(z.read(path))))
        return out


def download_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-d", str(dest), WHEEL],
        check=True,
    )
    return next(Path(dest).glob("graphdatascience-*.whl"))


def convert(nodes, rels, out, seed, sizes):
    index = {pid: i for i, pid in enumerate(nodes["nodeId"].tolist())}
    edges = set()
    for s, t in zip(rels["sourceNodeId"], rels["targetNodeId"]):
        a, b = index[s], index[t]
        if a != b:
            edges.add((min(a, b), max(a, b)))

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "graph.edges", "w") as f:
        f.write(f"# cora: {len(index)} nodes, {len(edges)} undirected edges\n")
        for a, b in sorted(edges):
            f.write(f"{a} {b}\n")
    with open(out / "features.csv", "w") as f:
        for row in nodes["features"]:
            f.write(",".join(str(int(v)) for v in row) + "\n")
    with open(out / "labels.csv", "w") as f:
        for y in nodes["subject"]:
            f.write(f"{int(y)}\n")

    perm = np.random.RandomState(seed).permutation(len(index))
    n_train, n_val, n_test = sizes
    splits = {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train : n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val : n_train + n_val + n_test].tolist()),
    }
    with open(out / "splits.json", "w") as f:
        json.dump(splits, f)
    return len(index), len(edges)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/cora"))
    ap.add_argument("--wheel", type=Path, help="graphdatascience wheel to read instead of downloading")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sizes", type=int, nargs=3, default=(1208, 500, 1000), metavar=("TRAIN", "VAL", "TEST"))
    args = ap.parse_args()

    if args.wheel:
        tables = tables_from_wheel(args.wheel)
    else:
        tables = tables_from_package()
        if tables is None:
            with tempfile.TemporaryDirectory() as tmp:
                tables = tables_from_wheel(download_wheel(tmp))
    n, m = convert(*tables, args.out, args.seed, args.sizes)
    print(f"wrote {args.out}: {n} nodes, {m} edges")


if __name__ == "__main__":
    main()
