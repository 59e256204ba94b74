#!/usr/bin/env python3
"""Run the bundled default experiment (or any config) end to end.

Usage: python3 scripts/run_experiment.py [--config configs/default.json] [--out runs/default]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from spintrack.experiment import run_experiment  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    root = Path(__file__).resolve().parents[1]
    ap.add_argument("--config", default=str(root / "configs" / "default.json"))
    ap.add_argument("--out", default=str(root / "runs" / "default"))
    args = ap.parse_args()
    out = run_experiment(args.config, args.out)
    print(f"outputs in {out}")
    return 1 if (out / "failures.json").exists() else 0


if __name__ == "__main__":
    sys.exit(main())
