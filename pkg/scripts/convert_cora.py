"""Convert the Cora parquet files shipped in the graphdatascience wheel to the TSV layout.

Usage: python scripts/convert_cora.py <dir with cora_nodes/cora_rels parquet> <out dir>

Node order follows the nodes file; edges are deduplicated as unordered pairs
and self-citations dropped.
"""

import json
import sys
from pathlib import Path

import pandas as pd


def main(src: str, out: str) -> None:
    src_dir, out_dir = Path(src), Path(out)
    nodes = pd.read_parquet(src_dir / "cora_nodes.parquet.gzip")
    rels = pd.read_parquet(src_dir / "cora_rels.parquet.gzip")
    index = {nid: i for i, nid in enumerate(nodes["nodeId"])}
    pairs = set()
    for s, t in zip(rels["sourceNodeId"], rels["targetNodeId"]):
        i, j = index[s], index[t]
        if i != j:
            pairs.add((min(i, j), max(i, j)))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "edges.tsv", "w", newline="\n") as fh:
        for i, j in sorted(pairs):
            fh.write(f"{i}\t{j}\n")
    with open(out_dir / "labels.tsv", "w", newline="\n") as fh:
        for y in nodes["subject"]:
            fh.write(f"{int(y)}\n")
    with open(out_dir / "features.tsv", "w", newline="\n") as fh:
        for row in nodes["features"]:
            fh.write("\t".join(str(int(v)) for v in row) + "\n")
    d = len(nodes["features"].iloc[0])
    meta = {"name": "cora", "n": len(nodes), "d": d, "C": int(nodes["subject"].max()) + 1}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {meta} with {len(pairs)} edges to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
