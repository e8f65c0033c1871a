#!/usr/bin/env python3
"""Attention-placement ablation at desk scale: cluster NMI on held-out brands
for CBAM on the first stage vs CBAM on the last stage, across seeds.

Usage:
    python scripts/run_ablation.py --out runs/ablation [--seeds 0 1 2]
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from teamid.pipeline import ablation_nmi


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        t0 = time.time()
        first = ablation_nmi("first_block", seed, epochs=args.epochs)
        last = ablation_nmi("last_block", seed, epochs=args.epochs)
        rows.append({"seed": seed, "cbam_first_stage_nmi": first,
                     "cbam_last_stage_nmi": last,
                     "first_beats_last": first > last,
                     "wall_seconds": round(time.time() - t0, 1)})
        print(json.dumps(rows[-1]))
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
