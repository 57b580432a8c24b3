"""Six-cell injection/structure grid at full budget.

    python3 scripts/run_ablation.py --out runs/ablation [--backbone runs/default/backbone.mung] [--workers 1]

Pretrains a backbone first when none is given.
"""

import argparse
from pathlib import Path

from mung import config
from mung.backbone import Backbone
from mung.pipeline import run_ablation, run_pretrain, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--backbone")
    ap.add_argument("--out", required=True)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    cfg = config.load(args.config) if args.config else config.RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bb = Backbone.load(args.backbone, cfg.backbone) if args.backbone else run_pretrain(cfg, out)[0]
    report = run_ablation(cfg, bb.freeze(), workers=args.workers)
    table = report.pop("table")
    write_json(out / "ablation.json", report)
    (out / "ablation.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
