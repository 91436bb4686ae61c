#!/usr/bin/env python3
"""Scaled FashionMNIST comparison: hierarchical distillation vs FedAvg.

Expects the four IDX files (train/t10k images+labels, optionally gzipped)
under --data-dir. Subsamples the training set to keep the run desk-sized,
then prints both methods' MAUA side by side.

Usage:
    python scripts/fashionmnist_smoke.py --data-dir data/fashionmnist
"""
import argparse
import sys
from pathlib import Path

from hks.cli import main as hks_main


def find(base: Path, stem: str) -> str:
    for suffix in ("", ".gz"):
        p = base / f"{stem}{suffix}"
        if p.exists():
            return str(p)
    raise SystemExit(f"missing {stem}[.gz] under {base}")


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default="data/fashionmnist")
    parser.add_argument("--out", default="runs/fashionmnist")
    parser.add_argument("--train-samples", default="2000")
    parser.add_argument("--rounds", default="18")
    args = parser.parse_args(argv)

    base = Path(args.data_dir)
    data_flags = [
        "--idx-images", find(base, "train-images-idx3-ubyte"),
        "--idx-labels", find(base, "train-labels-idx1-ubyte"),
        "--idx-test-images", find(base, "t10k-images-idx3-ubyte"),
        "--idx-test-labels", find(base, "t10k-labels-idx1-ubyte"),
        "--max-train-samples", args.train_samples,
        "--n-clients", "10",
        "--rounds", args.rounds,
        "--alpha-dir", "1.0",
        "--seed", "9",
    ]
    for method, extra in (("hks", ["--granularity", "all"]), ("fedavg", [])):
        code = hks_main(
            ["run", *data_flags, "--method", method, *extra, "--out", f"{args.out}/{method}"]
        )
        if code != 0:
            return code
    return hks_main(["report", args.out, "--out", f"{args.out}/report.csv"])


if __name__ == "__main__":
    sys.exit(run())
