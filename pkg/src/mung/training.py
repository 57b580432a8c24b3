"""Monte-Carlo variational objective and the generator training loop.

The loss for a batch of n triplets with m noise draws each is the mean over
all n*m terms of the answer-masked negative log-likelihood of the frozen
backbone fed ``inject(X_V, E)``, where ``E`` comes from the generator given
(X_V, question, answer). Only the generator's parameters are optimized.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .generator import NoiseGenerator, inject, sample
from .optim import AdamW, TrainingError, clip_grad_norm, scheduled_lr
from .synth import Triplet
from .tensor import Tensor

__all__ = [
    "Batch",
    "EmptyAnswerError",
    "ModelBundle",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "masked_nll",
    "mc_loss",
    "per_triplet_nll",
    "train",
    "trainable_param_fraction",
]


class EmptyAnswerError(ValueError):
    pass


@dataclass
class TrainConfig:
    """``answer_dropout`` is the per-row probability of running the generator
    without answer keys/values during training (the inference form)."""

    n: int = 5000
    m: int = 1
    batch_size: int = 32
    learning_rate: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 6
    seed: int = 0
    grad_clip: float = 1.0
    warmup_frac: float = 0.0
    decay: str = "constant"
    kl_weight: float = 0.0
    answer_dropout: float = 0.5

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.answer_dropout <= 1.0:
            raise ValueError("answer_dropout must lie in [0, 1]")
        if self.decay not in ("constant", "linear"):
            raise ValueError(f"decay must be 'constant' or 'linear', got {self.decay!r}")


@dataclass
class Batch:
    """Stacked triplets. Row i of every array belongs to triplet i."""

    visual: np.ndarray  # [B, n_vis, d_raw]
    question: np.ndarray  # [B, Tq]
    answer: np.ndarray  # [B, Ta]
    relevance: np.ndarray  # [B, n_vis]
    epsilon: np.ndarray | None = None  # [m, B, n_vis, d_model]
    # frozen-backbone features, filled by ModelBundle.featurize
    x_v: np.ndarray | None = None
    q_emb: np.ndarray | None = None
    a_emb: np.ndarray | None = None
    text_emb: np.ndarray | None = None

    @classmethod
    def from_triplets(cls, triplets: list[Triplet], epsilon=None) -> "Batch":
        if not triplets:
            raise ValueError("empty batch")
        for t in triplets:
            if len(t.answer) == 0:
                raise EmptyAnswerError("triplet without answer tokens")
        return cls(
            visual=np.stack([t.visual for t in triplets]),
            question=np.stack([t.question for t in triplets]),
            answer=np.stack([t.answer for t in triplets]),
            relevance=np.stack([t.relevance for t in triplets]),
            epsilon=epsilon,
        )

    def __len__(self) -> int:
        return len(self.question)

    @property
    def text(self) -> np.ndarray:
        return np.concatenate([self.question, self.answer], axis=1)

    @property
    def input_ids(self) -> np.ndarray:
        return self.text[:, :-1]

    @property
    def target_ids(self) -> np.ndarray:
        return self.text[:, 1:]

    @property
    def answer_mask(self) -> np.ndarray:
        mask = np.zeros(self.input_ids.shape, dtype=bool)
        mask[:, self.question.shape[1] - 1:] = True
        return mask

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(
            visual=self.visual[idx], question=self.question[idx], answer=self.answer[idx],
            relevance=self.relevance[idx],
            epsilon=None if self.epsilon is None else self.epsilon[:, idx],
            x_v=pick(self.x_v), q_emb=pick(self.q_emb), a_emb=pick(self.a_emb), text_emb=pick(self.text_emb),
        )


def masked_nll(logits: Tensor, target_ids, answer_mask) -> Tensor:
    """Mean NLL (nats) over answer positions only."""
    mask = np.asarray(answer_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyAnswerError("answer mask selects no positions")
    nll = T.cross_entropy_logits(logits, target_ids)
    return T.sum(T.hadamard(nll, Tensor(mask / count)))


def per_triplet_nll(logits: Tensor, target_ids, answer_mask) -> np.ndarray:
    """Per-row mean answer NLL, computed without recording a graph."""
    mask = np.asarray(answer_mask, dtype=bool)
    with T.no_grad():
        nll = T.cross_entropy_logits(logits, target_ids).data
    return (nll * mask).sum(axis=-1) / mask.sum(axis=-1)


@dataclass
class ModelBundle:
    """Frozen backbone plus trainable noise generator: q(A | X_V, X_L, E)."""

    backbone: Backbone
    generator: NoiseGenerator

    def featurize(self, batch: Batch) -> Batch:
        bb = self.backbone
        with T.no_grad():
            batch.x_v = bb.visual_features(batch.visual).data
            batch.q_emb = bb.embed_tokens(batch.question).data
            batch.a_emb = bb.embed_tokens(batch.answer, offset=batch.question.shape[1]).data
            batch.text_emb = bb.embed_tokens(batch.input_ids).data
        return batch

    def noisy_logits(self, batch: Batch, epsilon: np.ndarray, with_answer=True):
        """Logits for every draw in ``epsilon`` [m, B, n, d]; rows ordered draw-major.

        ``with_answer`` may be a boolean per row: rows marked false are run
        through the generator in inference form (no answer keys/values).
        """
        if batch.x_v is None:
            self.featurize(batch)
        gen = self.generator
        B = len(batch)
        x_v, q = Tensor(batch.x_v), Tensor(batch.q_emb)
        keep = np.broadcast_to(np.asarray(with_answer, dtype=bool), (B,))
        if keep.all():
            mu, ls, attn = gen.compute_params(x_v, q, Tensor(batch.a_emb))
        elif not keep.any():
            mu, ls, attn = gen.compute_params(x_v, q, None)
        else:
            mu, ls, attn = self._mixed_params(batch, keep)
        m = epsilon.shape[0]
        shape = (m * B,) + mu.shape[1:]
        mu_m = T.reshape(T.broadcast_to(mu, (m,) + mu.shape), shape)
        if ls is None:
            e = mu_m
        else:
            ls_m = T.reshape(T.broadcast_to(ls, (m,) + ls.shape), shape)
            e = sample(mu_m, ls_m, epsilon.reshape(shape))
        xv_m = Tensor(np.broadcast_to(batch.x_v, (m,) + batch.x_v.shape).reshape(shape))
        text = Tensor(np.broadcast_to(batch.text_emb, (m,) + batch.text_emb.shape).reshape((m * B,) + batch.text_emb.shape[1:]))
        logits = self.backbone.decode(inject(xv_m, e, gen.config.merge), text)
        return logits, mu, ls, attn

    def _mixed_params(self, batch: Batch, keep: np.ndarray):
        gen = self.generator
        with_a, without = np.flatnonzero(keep), np.flatnonzero(~keep)
        r1 = gen.compute_params(Tensor(batch.x_v[with_a]), Tensor(batch.q_emb[with_a]), Tensor(batch.a_emb[with_a]))
        r0 = gen.compute_params(Tensor(batch.x_v[without]), Tensor(batch.q_emb[without]), None)
        inv = np.argsort(np.concatenate([with_a, without]))
        mu = _take(T.concat([r1[0], r0[0]], axis=0), inv)
        ls = None if r1[1] is None else _take(T.concat([r1[1], r0[1]], axis=0), inv)
        return mu, ls, None


def _take(x: Tensor, order: np.ndarray) -> Tensor:
    """Rows of ``x`` in ``order`` (a permutation of the leading axis)."""
    inv = np.argsort(order)
    return T._make(x.data[order], (x,), lambda g: T._acc(x, g[inv]), "take")


def _tile(a: np.ndarray, m: int) -> np.ndarray:
    return np.broadcast_to(a, (m,) + a.shape).reshape((m * a.shape[0],) + a.shape[1:])


def mc_loss(model: ModelBundle, batch: Batch, m: int | None = None, rng: np.random.Generator | None = None,
            kl_weight: float = 0.0, with_answer=True) -> Tensor:
    """Mean answer NLL over every (triplet, draw) pair.

    Draws come from ``batch.epsilon`` when present, else ``m`` fresh draws
    from ``rng``. ``kl_weight`` adds an optional KL(N(mu, sigma) || N(0, 1))
    penalty (off by default).
    """
    if batch.x_v is None:
        model.featurize(batch)
    eps = batch.epsilon
    if eps is None:
        if m is None or rng is None:
            raise ValueError("mc_loss needs batch.epsilon or both m and rng")
        eps = rng.standard_normal((m, len(batch)) + batch.x_v.shape[1:])
    m = eps.shape[0]
    logits, mu, ls, _ = model.noisy_logits(batch, eps, with_answer)
    loss = masked_nll(logits, _tile(batch.target_ids, m), _tile(batch.answer_mask, m))
    if kl_weight and ls is not None:
        # KL per element: 0.5 * (sigma^2 + mu^2 - 1) - log_sigma
        kl = T.sub(T.scale(T.add_scalar(T.add(T.exp(T.scale(ls, 2.0)), T.square(mu)), -1.0), 0.5), ls)
        loss = T.add(loss, T.scale(T.mean(kl), kl_weight))
    return loss


def trainable_param_fraction(model: ModelBundle) -> float:
    theta = sum(t.size for t in model.generator.parameters() if t.requires_grad)
    total = model.generator.param_count() + model.backbone.param_count()
    return theta / total if total else 0.0


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    epoch_h_cond: list[float] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.metrics]


def train(model: ModelBundle, dataset: list[Triplet], config: TrainConfig, val: list[Triplet] | None = None,
          metrics_path=None) -> TrainResult:
    """Optimize the generator on ``dataset`` with the backbone frozen."""
    from .evaluation import estimate_conditional_entropy

    if not model.backbone.frozen:
        raise TrainingError("backbone must be frozen before generator training")
    params = [p for p in model.generator.parameters() if p.requires_grad]
    backbone_ids = {id(p) for p in model.backbone.parameters()}
    if any(id(p) in backbone_ids for p in params):
        raise TrainingError("optimizer would see backbone parameters")
    result = TrainResult()
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        data = model.featurize(Batch.from_triplets(list(dataset)))
        rng = np.random.default_rng(config.seed)
        steps_per_epoch = int(np.ceil(len(data) / config.batch_size))
        total = steps_per_epoch * config.epochs
        opt = AdamW(params, lr=config.learning_rate, betas=config.betas, eps=config.eps,
                    weight_decay=config.weight_decay) if params else None
        step = 0
        for epoch in range(config.epochs):
            order = rng.permutation(len(data))
            for s in range(steps_per_epoch):
                t0 = time.perf_counter()
                b = data.subset(order[s * config.batch_size:(s + 1) * config.batch_size])
                keep = rng.random(len(b)) >= config.answer_dropout if config.answer_dropout else True
                loss = mc_loss(model, b, m=config.m, rng=rng, kl_weight=config.kl_weight, with_answer=keep)
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at step {step}")
                gnorm = 0.0
                lr = scheduled_lr(config.learning_rate, step, total, config.warmup_frac, config.decay)
                if opt is not None and loss.requires_grad:
                    opt.zero_grad()
                    loss.backward()
                    gnorm = clip_grad_norm(params, config.grad_clip)
                    opt.lr = lr
                    opt.step()
                rec = {"step": step, "epoch": epoch, "loss": loss.item(), "H_cond_estimate": None,
                       "lr": lr, "grad_norm": gnorm, "wall_ms": (time.perf_counter() - t0) * 1e3}
                result.metrics.append(rec)
                step += 1
            if val:
                est = estimate_conditional_entropy(model, val, m=1, seed=config.seed + 1)
                result.metrics[-1]["H_cond_estimate"] = est.mean
                result.epoch_h_cond.append(est.mean)
            if fh:
                for rec in result.metrics[-steps_per_epoch:]:
                    fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return result
