"""Accuracy-vs-n sweep with 3-model ensembles, then heatmap localization at n=2 and n=4.

    python3 scripts/run_sweep.py --out-dir runs/sweep
"""

import argparse
import json
import sys
import time
from pathlib import Path

from overlapscope.detector import save_weights
from overlapscope.evalkit import write_heatmap, write_sweep_csv
from overlapscope.pipeline import SweepSettings, localization_rate, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/sweep")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=8)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = SweepSettings(seed=args.seed, epochs=args.epochs)
    t0 = time.perf_counter()
    result = run_sweep(s, log=lambda msg: print(msg, file=sys.stderr))
    write_sweep_csv(out / "accuracy_vs_n.csv", result.rows)
    for n, members in result.models.items():
        for k, m in enumerate(members):
            save_weights(out / f"n{n}_m{k}.weights", m)

    loc = {}
    for row in result.rows:
        if row.n in (2, 4):
            rate, maps = localization_rate(result.models[row.n], s, row.n, row.threshold)
            loc[row.n] = rate
            write_heatmap(out / f"heatmap_n{row.n}.pgm", maps[0])

    summary = {
        "settings": s.to_dict(),
        "rows": [r.__dict__ for r in result.rows],
        "localization": loc,
        "seconds": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for r in result.rows:
        print(f"n={r.n}: val_acc={r.val_acc:.3f} auc={r.auc:.4f}")
    for n, rate in loc.items():
        print(f"n={n}: {rate:.1%} of targets localized")


if __name__ == "__main__":
    main()
