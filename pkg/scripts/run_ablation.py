#!/usr/bin/env python3
"""Relation ablation: identical runs with the kNN graph on (k=3) and off (k=0).

Trains both arms on the same dataset with the same seeds and prints final
training loss and mAP side by side. The direction of the gap is reported,
not asserted.
"""

import argparse
import json
import sys
from pathlib import Path

from reldet import cli


def final_loss(log_path: Path) -> float:
    return float(log_path.read_text().splitlines()[-1].split(",")[2])


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/ablation")
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--data-seed", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=300)
    args = ap.parse_args()

    work = Path(args.workdir)
    data_dir = work / "data"
    if cli.main(["gen-data", "--seed", str(args.data_seed), "--count", str(args.scenes),
                 "--out", str(data_dir)]):
        return 2

    results = {}
    for k in (3, 0):
        ckpt = work / f"ckpt_k{k}"
        if cli.main(["train", "--data", str(data_dir), "--epochs", str(args.epochs),
                     "--knn-k", str(k), "--out", str(ckpt)]):
            return 2
        report = work / f"report_k{k}.json"
        if cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(ckpt),
                     "--json", str(report)]):
            return 2
        results[k] = {
            "loss": final_loss(ckpt / "train_log.csv"),
            "map": json.loads(report.read_text())["map"],
        }

    print()
    print(f"{'run':<12} {'final loss':>12} {'mAP@0.5':>9}")
    for k in (3, 0):
        print(f"knn_k={k:<6} {results[k]['loss']:>12.4f} {results[k]['map']:>9.4f}")
    gap = results[3]["map"] - results[0]["map"]
    print(f"relation-on minus relation-off mAP gap: {gap:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
