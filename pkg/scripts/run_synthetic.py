"""Synthetic end-to-end experiment.

Runs the full pipeline on a generated corpus, then scores two baselines on
the same chronological split: always-benign, and logistic regression on the
raw concatenated binary features (same folds and grid, no pre-training).

    python3 scripts/run_synthetic.py --workdir work/synthetic --seed 1
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from timedroid.classifier import DEFAULT_GRID, MetricsReport, evaluate, grid_search
from timedroid.cli import main as cli_main
from timedroid.dataset import Split, read_manifest, time_folds
from timedroid.features import MODALITIES, read_matrix


def baselines(work, folds, grid, seed):
    split = Split.load(work / "split.json")
    samples = {s.sha256: s for s in read_manifest(work / "manifest.csv")}
    mats = {m: read_matrix(work / f"matrix_{m}.ndjson") for m in MODALITIES}
    pos = {s: i for i, s in enumerate(mats["opcode"].ids)}
    X = np.hstack([mats[m].X for m in MODALITIES]).astype(np.float64)
    tr = [pos[s] for s in split.train]
    te = [pos[s] for s in split.test]
    ytr = np.array([samples[s].label for s in split.train])
    yte = np.array([samples[s].label for s in split.test])
    plan = time_folds([samples[s] for s in split.train], folds)
    res = grid_search(X[tr], ytr, split.train, plan, grid, seed)
    raw = evaluate(res.best, X[te], yte, split.test)
    majority = MetricsReport.from_labels(yte, np.full(len(yte), int(ytr.mean() >= 0.5)))
    return raw, majority, res.best_C


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="work/synthetic")
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--synthetic-seed", type=int, default=0)
    ap.add_argument("--test-malware", type=int, default=50)
    ap.add_argument("--test-benign", type=int, default=450)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args(argv)

    work = Path(args.workdir)
    cmd = ["pipeline", "--workdir", str(work), "--synthetic", str(args.n), "--synthetic-seed", str(args.synthetic_seed),
           "--seed", str(args.seed), "--test-year", "2024", "--test-malware", str(args.test_malware),
           "--test-benign", str(args.test_benign), "--folds", str(args.folds)]
    if args.epochs is not None:
        cmd += ["--epochs", str(args.epochs)]
    t0 = time.time()
    code = cli_main(cmd)
    if code:
        return code
    elapsed = time.time() - t0

    byol = json.loads((work / "metrics.json").read_text())
    raw, majority, raw_C = baselines(work, args.folds, list(DEFAULT_GRID), args.seed)
    rows = [("BYOL + LR", byol), (f"raw LR (C={raw_C:g})", raw.summary()), ("majority class", majority.summary())]
    print(f"\n{'model':<22}{'F1':>8}{'prec':>8}{'recall':>8}{'acc':>8}")
    for name, s in rows:
        print(f"{name:<22}{s['f1']:>8.4f}{s['precision']:>8.4f}{s['recall']:>8.4f}{s['accuracy']:>8.4f}")
    print(f"\npipeline runtime {elapsed:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
