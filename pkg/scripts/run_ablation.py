"""Three-seed toggle sweep on the default synthetic corpus.

Writes ablation.csv (one row per toggle set, one column per seed plus the mean)
and ablation_log.jsonl with per-run wall clock into --out.

    python3 scripts/run_ablation.py --out runs/ablation
"""

import argparse
import sys
from pathlib import Path

from parseg.cli import main

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(DEFAULT_CONFIG))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    sys.exit(main(["-v", "ablate", "--config", args.config, "--out", args.out, "--seeds", args.seeds]))
