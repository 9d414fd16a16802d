#!/usr/bin/env python3
"""Overfit experiment: generate scenes, train on them, score on the same set.

Defaults reproduce the acceptance configuration (20 scenes from seed 1,
300 epochs, IoU 0.5).
"""

import argparse
import sys
import time
from pathlib import Path

from reldet import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/overfit")
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--data-seed", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--knn-k", type=int, default=3)
    args = ap.parse_args()

    work = Path(args.workdir)
    data_dir = work / "data"
    ckpt_dir = work / "ckpt"
    t0 = time.perf_counter()
    if cli.main(["gen-data", "--seed", str(args.data_seed), "--count", str(args.scenes),
                 "--out", str(data_dir)]):
        return 2
    if cli.main(["train", "--data", str(data_dir), "--epochs", str(args.epochs),
                 "--knn-k", str(args.knn_k), "--out", str(ckpt_dir)]):
        return 2
    code = cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(ckpt_dir),
                     "--json", str(work / "report.json")])
    print(f"total wall time: {time.perf_counter() - t0:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
