"""End-to-end runs shared by the CLI, the acceptance tests and the scripts."""

from __future__ import annotations

import dataclasses
import json
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .backbone import Backbone, pretrain_backbone
from .config import RunConfig, minimal_gradcheck
from .evaluation import (
    ablation_grid,
    answer_accuracy,
    effect_maps,
    estimate_task_entropy,
    format_table,
    importance_map,
    mutual_information_check,
    relevance_score,
)
from .generator import NoiseGenerator
from .synth import VOCAB_SIZE, dataset
from .training import Batch, ModelBundle, mc_loss, train, trainable_param_fraction


# ---------------------------------------------------------------- data


def pretrain_set(cfg: RunConfig):
    return list(dataset(cfg.seed, cfg.pretrain.n, "pretrain", cfg.pretrain_scene))


def train_set(cfg: RunConfig):
    return list(dataset(cfg.seed, cfg.train.n, "train", cfg.task_scene))


def val_set(cfg: RunConfig):
    return list(dataset(cfg.seed, cfg.eval.n_val, "val", cfg.task_scene))


def test_set(cfg: RunConfig, n: int | None = None):
    return list(dataset(cfg.seed, n or cfg.eval.n_test, "test", cfg.task_scene))


def clean_test_set(cfg: RunConfig, n: int | None = None):
    return list(dataset(cfg.seed, n or cfg.eval.n_test, "test", cfg.pretrain_scene))


# ---------------------------------------------------------------- files


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, command: str, cfg: RunConfig, checkpoints: dict[str, str]) -> Path:
    write_json(out / "config.resolved.json", cfg.to_dict())
    return write_json(out / "manifest.json", {
        "command": command,
        "config_sha256": cfg.digest(),
        "checkpoints": checkpoints,
        "versions": {"mung": __version__, "numpy": np.__version__, "python": platform.python_version()},
    })


# ---------------------------------------------------------------- stages


def run_pretrain(cfg: RunConfig, out: Path | None = None, log=None) -> tuple[Backbone, dict]:
    """Train the backbone on clean scenes; report headroom on distractor scenes."""
    bb = Backbone(cfg.backbone)
    fh = open(out / "pretrain_metrics.jsonl", "w", encoding="utf-8") if out else None

    def sink(rec):
        if fh:
            fh.write(json.dumps(rec) + "\n")
        if log and rec["step"] % 50 == 0:
            log(rec)

    try:
        hist = pretrain_backbone(bb, pretrain_set(cfg), steps=cfg.pretrain.steps, lr=cfg.pretrain.lr,
                                 batch_size=cfg.pretrain.batch_size, seed=cfg.seed,
                                 weight_decay=cfg.pretrain.weight_decay, log=sink)
    finally:
        if fh:
            fh.close()
    bb.freeze()
    summary = {
        "param_count": bb.param_count(),
        "final_loss": hist[-1]["loss"] if hist else None,
        "clean_accuracy": answer_accuracy(bb, clean_test_set(cfg, 300)),
        "task_accuracy": answer_accuracy(bb, test_set(cfg, 300)),
        "digest": bb.digest(),
    }
    if out:
        sha = bb.save(out / "backbone.mung")
        write_json(out / "pretrain_summary.json", summary)
        write_manifest(out, "pretrain", cfg, {"backbone.mung": sha})
    return bb, summary


def run_train(cfg: RunConfig, backbone: Backbone, out: Path | None = None) -> tuple[ModelBundle, dict]:
    backbone.freeze()
    before = backbone.digest()
    gen = NoiseGenerator(cfg.generator, backbone.config.d_model)
    model = ModelBundle(backbone, gen)
    t0 = time.perf_counter()
    if cfg.generator.variant == "gauss":
        with T.no_grad():
            gen.calibrate(backbone.visual_features(Batch.from_triplets(train_set(cfg)[:256]).visual))
        result = None
    else:
        result = train(model, train_set(cfg), cfg.train, val=val_set(cfg),
                       metrics_path=(out / "train_metrics.jsonl") if out else None)
    summary = {
        "trainable_params": gen.param_count(),
        "trainable_fraction": trainable_param_fraction(model),
        "backbone_digest_before": before,
        "backbone_digest_after": backbone.digest(),
        "final_loss": result.metrics[-1]["loss"] if result else None,
        "epoch_H_cond": result.epoch_h_cond if result else [],
        "wall_s": time.perf_counter() - t0,
    }
    if out:
        sha = gen.save(out / "generator.mung")
        write_json(out / "train_summary.json", summary)
        write_manifest(out, "train", cfg, {"generator.mung": sha, "backbone_params": before})
    return model, summary


def run_eval(cfg: RunConfig, backbone: Backbone, generator: NoiseGenerator | None = None) -> dict:
    """Entropy report, greedy accuracy and (CA only) relevance localization on the test split."""
    test = test_set(cfg)
    report = {"units": "nats", "n_test": len(test), "seed": cfg.seed}
    report["baseline_accuracy"] = answer_accuracy(backbone, test)
    if generator is None:
        h = estimate_task_entropy(backbone, test)
        report["H_task"], report["H_task_se"] = h.mean, h.se
        return report
    model = ModelBundle(backbone, generator)
    report["entropy"] = mutual_information_check(backbone, model, test, m=cfg.eval.m, seed=cfg.seed).to_dict()
    report["accuracy"] = answer_accuracy(backbone, test, model, seed=cfg.seed)
    report["accuracy_gain"] = report["accuracy"] - report["baseline_accuracy"]
    report["effect_relevance"] = relevance_score(model, test, maps=effect_maps(model, test)).to_dict()
    if generator.config.variant == "ca":
        report["relevance"] = relevance_score(model, test).to_dict()
        untrained = ModelBundle(backbone, NoiseGenerator(generator.config, backbone.config.d_model))
        report["relevance_untrained"] = relevance_score(untrained, test).to_dict()
    return report


def run_ablation(cfg: RunConfig, backbone: Backbone, workers: int = 1) -> dict:
    test = test_set(cfg)
    cells = ablation_grid(backbone.freeze(), cfg.generator, cfg.train, train_set(cfg), test,
                          m_eval=cfg.eval.m, seed=cfg.seed, workers=workers)
    base = answer_accuracy(backbone, test)
    h = estimate_task_entropy(backbone, test)
    return {
        "units": "nats",
        "baseline_accuracy": base,
        "H_task": h.mean,
        "H_task_se": h.se,
        "cells": [c.to_dict() for c in cells],
        "ordering_by_accuracy": [c.label for c in sorted(cells, key=lambda c: -c.accuracy)],
        "table": format_table(cells, base, h.mean),
    }


def run_viz(cfg: RunConfig, backbone: Backbone, generator: NoiseGenerator, index: int, out: Path) -> dict:
    from .evaluation import attention_maps, export_map
    from .synth import make_triplet, token_name

    t = make_triplet(cfg.seed, "test", index, cfg.task_scene)
    model = ModelBundle(backbone, generator)
    grid = cfg.task_scene.grid
    maps = {
        "importance_before": importance_map(backbone, t),
        "importance_after": importance_map(backbone, t, model, with_noise=True, seed=cfg.seed),
        "effect": effect_maps(model, [t])[0],
    }
    if generator.config.variant == "ca":
        maps["attention"] = attention_maps(model, [t])[0]
    files = []
    for name, v in maps.items():
        for fmt in ("pgm", "csv"):
            files.append(export_map(v, out / f"{name}_{index}.{fmt}", fmt=fmt, grid=grid).name)
    return {
        "index": index,
        "question": " ".join(token_name(x) for x in t.question),
        "answer": " ".join(token_name(x) for x in t.answer),
        "relevance": t.relevance.astype(int).reshape(grid).tolist(),
        "maps": {k: np.asarray(v).reshape(grid).tolist() for k, v in maps.items()},
        "files": sorted(files),
    }


def run_gradcheck(cfg: RunConfig, tol: float = 1e-3, h: float = 1e-4) -> dict:
    """Finite-difference check of the whole objective w.r.t. every generator parameter.

    Uses a tiny randomly initialized model (d_model 8, two visual tokens, one
    decoder layer) and a fixed epsilon so the loss is a deterministic function
    of theta.
    """
    bcfg, gcfg = minimal_gradcheck(cfg)
    gcfg = dataclasses.replace(gcfg, head_init_std=0.3)  # a generic point, not the near-zero init
    rng = np.random.default_rng(cfg.seed)
    bb = Backbone(bcfg).freeze()
    gen = NoiseGenerator(gcfg, bcfg.d_model)
    if gcfg.variant == "gauss":
        return {"variant": "gauss", "n_coords": 0, "passed": True, "max_rel_error": 0.0,
                "note": "gauss baseline has no trainable parameters"}
    B, n = 3, bcfg.n_vis_tokens
    batch = Batch(
        visual=rng.standard_normal((B, n, bcfg.d_raw)),
        question=rng.integers(1, VOCAB_SIZE, size=(B, 4)),
        answer=rng.integers(1, VOCAB_SIZE, size=(B, 2)),
        relevance=np.zeros((B, n), dtype=bool),
        epsilon=rng.standard_normal((2, B, n, bcfg.d_model)),
    )
    model = ModelBundle(bb, gen)
    model.featurize(batch)
    t0 = time.perf_counter()
    rep = T.grad_check(lambda: mc_loss(model, batch), gen.parameters(), h=h, tol=tol)
    out = rep.to_dict()
    out.update(variant=gcfg.variant, merge=gcfg.merge, d_model=bcfg.d_model, n_vis_tokens=n,
               n_decoder_layers=bcfg.n_decoder_layers, h=h, wall_s=time.perf_counter() - t0)
    return out
