"""Entropy estimates, accuracy, relevance localization, saliency and the ablation grid.

All entropies are in nats. Monte-Carlo estimates are means of per-triplet
answer NLLs with the standard error ``std / sqrt(n)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, generate_greedy
from .generator import GeneratorConfig, NoiseGenerator, UnsupportedVariantError, attention_map, inject
from .synth import Triplet
from .tensor import Tensor
from .training import Batch, ModelBundle, TrainConfig, per_triplet_nll, train, trainable_param_fraction

CHUNK = 256


@dataclass
class Estimate:
    mean: float
    se: float
    n: int
    values: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, values) -> "Estimate":
        v = np.asarray(values, dtype=np.float64)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        return cls(mean=float(v.mean()), se=se, n=len(v), values=v)


@dataclass
class EntropyReport:
    H_task: float
    H_task_se: float
    H_cond: float
    H_cond_se: float
    I_estimate: float
    I_se: float
    I_paired_se: float
    n_samples: int
    m: int
    positive: bool  # I > 2 * combined standard error
    units: str = "nats"

    def to_dict(self) -> dict:
        return asdict(self)


def _chunks(triplets: list[Triplet]):
    for i in range(0, len(triplets), CHUNK):
        yield i, triplets[i:i + CHUNK]


def _draws(seed: int, start: int, m: int, B: int, n: int, d: int) -> np.ndarray:
    # seeded per chunk so results do not depend on evaluation order
    return np.random.default_rng([seed, start]).standard_normal((m, B, n, d))


def task_nll(backbone: Backbone, triplets: list[Triplet]) -> np.ndarray:
    """Per-triplet answer NLL of the backbone with nothing injected."""
    out = []
    with T.no_grad():
        for _, chunk in _chunks(triplets):
            b = Batch.from_triplets(chunk)
            logits = backbone.decode(backbone.visual_features(b.visual), backbone.embed_tokens(b.input_ids))
            out.append(per_triplet_nll(logits, b.target_ids, b.answer_mask))
    return np.concatenate(out)


def conditional_nll(model: ModelBundle, triplets: list[Triplet], m: int = 1, seed: int = 0) -> np.ndarray:
    """Per-triplet answer NLL averaged over ``m`` noise draws, generator in inference mode."""
    out = []
    d = model.backbone.config.d_model
    with T.no_grad():
        for start, chunk in _chunks(triplets):
            b = model.featurize(Batch.from_triplets(chunk))
            eps = _draws(seed, start, m, len(b), b.x_v.shape[1], d)
            logits, *_ = model.noisy_logits(b, eps, with_answer=False)
            nll = per_triplet_nll(logits, np.tile(b.target_ids, (m, 1)), np.tile(b.answer_mask, (m, 1)))
            out.append(nll.reshape(m, len(b)).mean(axis=0))
    return np.concatenate(out)


def estimate_task_entropy(backbone: Backbone, triplets: list[Triplet], n: int | None = None) -> Estimate:
    return Estimate.of(task_nll(backbone, list(triplets)[:n]))


def estimate_conditional_entropy(model: ModelBundle, triplets: list[Triplet], n: int | None = None,
                                 m: int = 1, seed: int = 0) -> Estimate:
    return Estimate.of(conditional_nll(model, list(triplets)[:n], m=m, seed=seed))


def mutual_information_check(backbone: Backbone, model: ModelBundle, triplets: list[Triplet],
                             m: int = 4, seed: int = 0) -> EntropyReport:
    triplets = list(triplets)
    h = task_nll(backbone, triplets)
    hc = conditional_nll(model, triplets, m=m, seed=seed)
    e_h, e_hc, e_diff = Estimate.of(h), Estimate.of(hc), Estimate.of(h - hc)
    combined = math.hypot(e_h.se, e_hc.se)
    gap = e_h.mean - e_hc.mean
    return EntropyReport(
        H_task=e_h.mean, H_task_se=e_h.se, H_cond=e_hc.mean, H_cond_se=e_hc.se,
        I_estimate=gap, I_se=combined, I_paired_se=e_diff.se, n_samples=len(triplets), m=m,
        positive=bool(gap > 2 * combined),
    )


def answer_accuracy(backbone: Backbone, triplets: list[Triplet], model: ModelBundle | None = None,
                    seed: int = 0) -> float:
    """Exact-match rate of greedy answers; one noise draw per triplet when a generator is given."""
    correct = 0
    triplets = list(triplets)
    with T.no_grad():
        for start, chunk in _chunks(triplets):
            b = Batch.from_triplets(chunk)
            if model is None:
                xv = backbone.visual_features(b.visual)
            else:
                model.featurize(b)
                eps = _draws(seed, start, 1, len(b), b.x_v.shape[1], backbone.config.d_model)[0]
                s = model.generator(Tensor(b.x_v), Tensor(b.q_emb), None, epsilon=eps)
                xv = inject(Tensor(b.x_v), s.noise, model.generator.config.merge)
            outs = generate_greedy(backbone, xv, b.question, max_new=b.answer.shape[1])
            correct += sum(int(np.array_equal(o, a)) for o, a in zip(outs, b.answer))
    return correct / len(triplets)


# ---------------------------------------------------------------- relevance


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """P(score_pos > score_neg) with ties counted half; None when one class is empty."""
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class RelevanceReport:
    auc: float
    mass_ratio: float
    n_scored: int
    n_skipped: int

    def to_dict(self) -> dict:
        return asdict(self)


def attention_maps(model: ModelBundle, triplets: list[Triplet]) -> np.ndarray:
    """Inference-mode attention maps, [n_triplets, n_vis]."""
    if model.generator.config.variant != "ca":
        raise UnsupportedVariantError("relevance scoring needs the cross-attention variant")
    maps = []
    with T.no_grad():
        for _, chunk in _chunks(triplets):
            b = model.featurize(Batch.from_triplets(chunk))
            s = model.generator(Tensor(b.x_v), Tensor(b.q_emb), None, epsilon=np.zeros(b.x_v.shape))
            maps.append(attention_map(s))
    return np.concatenate(maps)


def effect_maps(model: ModelBundle, triplets: list[Triplet]) -> np.ndarray:
    """Per-slot norm of the mean perturbation ``inject(x_v, mu) - x_v``, any variant."""
    maps = []
    with T.no_grad():
        for _, chunk in _chunks(triplets):
            b = model.featurize(Batch.from_triplets(chunk))
            mu, _, _ = model.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb), None)
            moved = inject(Tensor(b.x_v), mu, model.generator.config.merge).data
            maps.append(np.linalg.norm(moved - b.x_v, axis=-1))
    return np.concatenate(maps)


def relevance_score(model: ModelBundle, triplets: list[Triplet], maps: np.ndarray | None = None) -> RelevanceReport:
    """Mean per-triplet AUC of attention maps against planted relevance masks.

    Triplets whose mask is all true or all false have no AUC and are skipped.
    ``maps`` overrides the attention maps (e.g. with ``effect_maps``).
    """
    triplets = list(triplets)
    maps = attention_maps(model, triplets) if maps is None else maps
    aucs, rel_mass, irr_mass, skipped = [], [], [], 0
    for m, t in zip(maps, triplets):
        a = pairwise_auc(m, t.relevance)
        if a is None:
            skipped += 1
            continue
        aucs.append(a)
        rel_mass.append(m[t.relevance].mean())
        irr_mass.append(m[~t.relevance].mean())
    if not aucs:
        return RelevanceReport(auc=float("nan"), mass_ratio=float("nan"), n_scored=0, n_skipped=skipped)
    ratio = float(np.mean(rel_mass) / np.mean(irr_mass)) if np.mean(irr_mass) > 0 else float("inf")
    return RelevanceReport(auc=float(np.mean(aucs)), mass_ratio=ratio, n_scored=len(aucs), n_skipped=skipped)


# ---------------------------------------------------------------- saliency


def importance_map(backbone: Backbone, triplet: Triplet, model: ModelBundle | None = None,
                   with_noise: bool = False, seed: int = 0, logit_shift: float = 0.0) -> np.ndarray:
    """Per-slot L2 norm of d(log-prob of the correct answer)/d(decoder visual input).

    ``logit_shift`` adds a constant to every logit; the map must not change.
    """
    b = Batch.from_triplets([triplet])
    with T.no_grad():
        x_v = backbone.visual_features(b.visual).data[0]
        if with_noise:
            if model is None:
                raise ValueError("with_noise needs a model bundle")
            model.featurize(b)
            eps = np.random.default_rng(seed).standard_normal(x_v.shape)
            s = model.generator(Tensor(b.x_v[0]), Tensor(b.q_emb[0]), None, epsilon=eps)
            x_v = inject(Tensor(x_v), s.noise, model.generator.config.merge).data
    x = Tensor(x_v.copy(), requires_grad=True)
    logits = backbone.decode(x, backbone.embed_tokens(b.input_ids[0]))
    if logit_shift:
        logits = T.add_scalar(logits, logit_shift)
    mask = b.answer_mask[0]
    logp = T.scale(T.sum(T.hadamard(T.cross_entropy_logits(logits, b.target_ids[0]), Tensor(mask.astype(float)))), -1.0)
    logp.backward()
    return np.linalg.norm(x.grad, axis=-1)


def export_map(values, path, fmt: str = "pgm", grid: tuple[int, int] | None = None) -> Path:
    """Write a heat map as binary PGM (min-max scaled to 0..255) or CSV of raw values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot export an empty map")
    if grid is not None:
        v = v.reshape(grid)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    path = Path(path)
    if fmt == "csv":
        path.write_text("\n".join(",".join(repr(float(x)) for x in row) for row in v) + "\n")
    elif fmt == "pgm":
        h, w = v.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + normalize_grid(v).tobytes())
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def normalize_grid(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode("ascii"))
    if fields[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- ablation

ABLATION_CELLS = (
    ("mlp", "add", True),
    ("mlp", "dot", True),
    ("ca", "dot", True),
    ("ca", "add", False),
    ("gauss", "add", True),
    ("ca", "add", True),
)


@dataclass
class AblationCell:
    structure: str
    merge: str
    noise: bool
    accuracy: float
    H_cond: float
    H_cond_se: float
    auc: float | None
    effect_auc: float
    trainable: int
    fraction: float

    @property
    def label(self) -> str:
        return f"{self.structure.upper()}/{self.merge}/{'w' if self.noise else 'w/o'}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label
        return d


def run_cell(backbone: Backbone, gen_cfg: GeneratorConfig, train_cfg: TrainConfig, train_set, test_set,
             m_eval: int = 4, seed: int = 0) -> tuple[AblationCell, ModelBundle]:
    gen = NoiseGenerator(gen_cfg, backbone.config.d_model)
    model = ModelBundle(backbone, gen)
    if gen_cfg.variant == "gauss":
        with T.no_grad():
            gen.calibrate(backbone.visual_features(Batch.from_triplets(list(train_set)[:256]).visual))
    else:
        train(model, train_set, train_cfg)
    h = estimate_conditional_entropy(model, test_set, m=m_eval, seed=seed)
    acc = answer_accuracy(backbone, test_set, model, seed=seed)
    auc = relevance_score(model, test_set).auc if gen_cfg.variant == "ca" else None
    effect = relevance_score(model, test_set, maps=effect_maps(model, test_set)).auc
    cell = AblationCell(structure=gen_cfg.variant, merge=gen_cfg.merge, noise=gen_cfg.sample_noise,
                        accuracy=acc, H_cond=h.mean, H_cond_se=h.se, auc=auc, effect_auc=effect,
                        trainable=gen.param_count(), fraction=trainable_param_fraction(model))
    return cell, model


def _cell_worker(args):
    state, bcfg, gen_cfg, train_cfg, train_set, test_set, m_eval, seed = args
    bb = Backbone(bcfg)
    bb.load_state_dict(state)
    bb.freeze()
    return run_cell(bb, gen_cfg, train_cfg, train_set, test_set, m_eval, seed)[0]


def ablation_grid(backbone: Backbone, base_gen: GeneratorConfig, train_cfg: TrainConfig, train_set, test_set,
                  m_eval: int = 4, seed: int = 0, workers: int = 1) -> list[AblationCell]:
    """Train and score every cell from the same seeds; results keep the grid order."""
    cfgs = [replace(base_gen, variant=v, merge=mm, sample_noise=noise) for v, mm, noise in ABLATION_CELLS]
    jobs = [(backbone.state_dict(), backbone.config, c, train_cfg, list(train_set), list(test_set), m_eval, seed)
            for c in cfgs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_cell_worker, jobs))
    return [_cell_worker(j) for j in jobs]


def format_table(cells: list[AblationCell], baseline_acc: float | None = None, h_task: float | None = None) -> str:
    lines = []
    if baseline_acc is not None:
        lines.append(f"frozen baseline: accuracy {baseline_acc:.4f}" + (f", H(T) {h_task:.4f} nats" if h_task is not None else ""))
    header = (f"{'Struct.':<8}{'MM.':<6}{'Noise':<7}{'Acc.':>8}{'H(T|E)':>10}{'AUC':>8}{'EffAUC':>8}"
              f"{'#Param':>9}{'Frac.':>8}")
    lines += [header, "-" * len(header)]
    for c in cells:
        auc = f"{c.auc:.3f}" if c.auc is not None else "-"
        lines.append(f"{c.structure.upper():<8}{c.merge:<6}{('w/' if c.noise else 'w/o'):<7}"
                     f"{c.accuracy:>8.4f}{c.H_cond:>10.4f}{auc:>8}{c.effect_auc:>8.3f}{c.trainable:>9d}{100 * c.fraction:>7.2f}%")
    ranked = sorted(cells, key=lambda c: -c.accuracy)
    lines.append("ordering by accuracy: " + " > ".join(c.label for c in ranked))
    return "\n".join(lines) + "\n"
