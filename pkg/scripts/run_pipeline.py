"""Pretrain, train, evaluate and render maps in one go.

    python3 scripts/run_pipeline.py --out runs/default [--config run.json] [--viz 0 1 2]
"""

import argparse
import json
import time
from pathlib import Path

from mung import config
from mung.pipeline import run_eval, run_pretrain, run_train, run_viz, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--viz", type=int, nargs="*", default=[0, 1, 2])
    args = ap.parse_args()
    cfg = config.load(args.config) if args.config else config.RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    bb, pre = run_pretrain(cfg, out, log=lambda r: print(f"pretrain step {r['step']:4d} loss {r['loss']:.4f}"))
    print(f"pretrain done in {time.perf_counter() - t0:.0f}s: {json.dumps(pre)}")
    t1 = time.perf_counter()
    model, summary = run_train(cfg, bb, out)
    print(f"train done in {time.perf_counter() - t1:.0f}s, trainable {100 * summary['trainable_fraction']:.2f}%")
    report = run_eval(cfg, bb, model.generator)
    write_json(out / "eval_report.json", report)
    e = report["entropy"]
    print(f"H(T) {e['H_task']:.4f} +- {e['H_task_se']:.4f}  H(T|E) {e['H_cond']:.4f} +- {e['H_cond_se']:.4f} nats")
    print(f"accuracy {report['baseline_accuracy']:.3f} -> {report['accuracy']:.3f}")
    if "relevance" in report:
        print(f"attention AUC {report['relevance']['auc']:.3f} (untrained {report['relevance_untrained']['auc']:.3f}), "
              f"noise-effect AUC {report['effect_relevance']['auc']:.3f}")
    for i in args.viz:
        write_json(out / f"viz_{i}.json", run_viz(cfg, bb, model.generator, i, out))
    print(f"total {time.perf_counter() - t0:.0f}s, artifacts in {out}")


if __name__ == "__main__":
    main()
