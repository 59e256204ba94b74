#!/usr/bin/env python3
"""Plot stage-binned landing RMSE per method from an experiment output.

Reads <run_dir>/stage_series.json produced by run_experiment and writes
first/second-landing RMSE charts. Requires matplotlib.

Usage: python3 scripts/plot_stage_rmse.py runs/default [--out runs/default]
"""

import argparse
import json
import sys
from collections import defaultdict
from pathlib import Path


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir")
    ap.add_argument("--out", default=None, help="output directory (default: run_dir)")
    args = ap.parse_args()
    run_dir = Path(args.run_dir)
    out_dir = Path(args.out) if args.out else run_dir
    series = json.loads((run_dir / "stage_series.json").read_text())

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for landing_index, title in ((1, "First landing"), (2, "Second landing")):
        by_method = defaultdict(dict)
        for row in series:
            if row["landing_index"] == landing_index and row["rmse"] is not None:
                by_method[row["method"]][row["stage"]] = row["rmse"]
        fig, ax = plt.subplots(figsize=(6, 4))
        for method, stages in sorted(by_method.items()):
            xs = sorted(stages)
            ax.plot(xs, [stages[s] for s in xs], marker="o", label=method)
        ax.set_xlabel("stage (detection-stream quartile)")
        ax.set_ylabel("planar RMSE (m)")
        ax.set_title(f"{title} prediction RMSE by stage")
        ax.set_xticks([1, 2, 3, 4])
        ax.grid(True, alpha=0.3)
        ax.legend()
        path = out_dir / f"stage_rmse_landing{landing_index}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
