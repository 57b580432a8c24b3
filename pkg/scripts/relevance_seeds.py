"""Attention-map localization across generator seeds.

For each seed: AUC of the untrained generator, AUC after training, and the
AUC of the per-slot noise effect. Shows how stable the orientation of the
attention map is.

    python3 scripts/relevance_seeds.py --backbone runs/default/backbone.mung --seeds 0 1 2 3 --out runs/seeds.json
"""

import argparse
import dataclasses
import json

from mung import config
from mung.backbone import Backbone
from mung.evaluation import effect_maps, relevance_score
from mung.generator import NoiseGenerator
from mung.pipeline import test_set, train_set, val_set, write_json
from mung.training import ModelBundle, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--backbone", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = config.load(args.config) if args.config else config.RunConfig()
    bb = Backbone.load(args.backbone, cfg.backbone).freeze()
    tr, va, te = train_set(cfg), val_set(cfg), test_set(cfg)
    rows = []
    for s in args.seeds:
        gcfg = dataclasses.replace(cfg.generator, seed=s)
        model = ModelBundle(bb, NoiseGenerator(gcfg, bb.config.d_model))
        before = relevance_score(model, te).auc
        train(model, tr, dataclasses.replace(cfg.train, seed=s), val=va)
        after = relevance_score(model, te)
        eff = relevance_score(model, te, maps=effect_maps(model, te)).auc
        rows.append({"seed": s, "untrained_auc": before, "trained_auc": after.auc,
                     "mass_ratio": after.mass_ratio, "effect_auc": eff})
        print(json.dumps(rows[-1]))
    if args.out:
        write_json(args.out, rows)


if __name__ == "__main__":
    main()
