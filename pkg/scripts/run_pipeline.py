"""One seed of the full pipeline through the CLI, leaving every artifact on disk.

    python3 scripts/run_pipeline.py --out runs/seed0 --seed 0

Layout: data/ (corpus), stage1/ (P*.pt, manifest, losses.csv), combined/
(pseudo-labeled corpus + quality report), stage2/ (F*.pt, manifest, pairs.csv),
report.json/.txt (selected final model on the validation splits).
"""

import argparse
import json
import sys
from pathlib import Path

from parseg.cli import main

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


def run(argv):
    code = main(argv)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(DEFAULT_CONFIG))
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-confidence", type=float, default=0.0)
    args = ap.parse_args()
    out = Path(args.out)
    seed = ["--seed", str(args.seed)]
    run(["gen-data", "--config", args.config, "--out", str(out / "data"), *seed])
    n = len(json.loads((out / "data" / "partition.json").read_text())["subsets"])
    data = [str(out / "data" / f"D{i + 1}") for i in range(n)]
    run(["-v", "train-stage1", "--data", *data, "--config", args.config, "--out", str(out / "stage1"), *seed])
    run(["gen-pseudo", "--models", str(out / "stage1"), "--data", *data, "--out", str(out / "combined"),
         "--min-confidence", str(args.min_confidence)])
    combined = [str(out / "combined" / f"D{i + 1}") for i in range(n)]
    run(["-v", "train-stage2", "--data", *combined, "--config", args.config, "--out", str(out / "stage2"), *seed])
    selected = json.loads((out / "stage2" / "manifest.json").read_text())["selected_model"]
    run(["evaluate", "--model", str(out / "stage2" / f"{selected}.pt"), "--data", *data, "--out", str(out / "report.json")])
