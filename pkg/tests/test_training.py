import math

import numpy as np
import pytest

from mung import tensor as T
from mung.generator import sample
from mung.optim import AdamW, TrainingError, clip_grad_norm, scheduled_lr
from mung.tensor import Tensor
from mung.training import (
    Batch,
    EmptyAnswerError,
    TrainConfig,
    masked_nll,
    mc_loss,
    train,
    trainable_param_fraction,
)

from conftest import bundle


def test_masked_nll_uniform_logits():
    logits = Tensor(np.zeros((2, 3, 4)))
    mask = np.array([[False, True, True], [False, False, True]])
    assert masked_nll(logits, np.zeros((2, 3), dtype=int), mask).item() == pytest.approx(math.log(4))


def test_masked_nll_ignores_question_positions():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((1, 4, 5)))
    mask = np.array([[False, False, True, True]])
    targets = np.array([[1, 2, 3, 4]])
    shifted = logits.data.copy()
    shifted[0, :2] += rng.standard_normal((2, 5)) * 10
    a = masked_nll(logits, targets, mask).item()
    b = masked_nll(Tensor(shifted), targets, mask).item()
    assert a == b


def test_empty_answer_rejected(triplets):
    t = triplets[0]
    t.answer = t.answer[:0]
    with pytest.raises(EmptyAnswerError):
        Batch.from_triplets([t])


def _capture_logits(model):
    captured = []
    orig = model.backbone.decode

    def wrapped(*args):
        out = orig(*args)
        leaf = Tensor(out.data, requires_grad=True)
        captured.append(leaf)
        return leaf

    model.backbone.decode = wrapped
    return captured


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mc_loss_logit_gradient_is_zero_at_question_positions(triplets, seed):
    model = bundle()
    captured = _capture_logits(model)
    b = Batch.from_triplets(triplets[seed * 4:(seed + 1) * 4])
    loss = mc_loss(model, b, m=2, rng=np.random.default_rng(seed))
    loss.backward()
    g = captured[0].grad
    mask = np.tile(b.answer_mask, (2, 1))
    assert np.all(g[~mask] == 0.0)
    assert np.all(np.abs(g[mask]).sum(axis=-1) > 0)


def test_mc_loss_m1_equals_m3_when_sigma_vanishes(triplets):
    model = bundle(log_sigma_min=-1000.0, log_sigma_init=-1000.0)
    b = Batch.from_triplets(triplets[:4])
    l1 = mc_loss(model, b, m=1, rng=np.random.default_rng(0)).item()
    l3 = mc_loss(model, b, m=3, rng=np.random.default_rng(1)).item()
    assert abs(l1 - l3) < 1e-12


def test_mc_loss_is_mean_masked_nll_over_draws(triplets):
    from mung.generator import inject

    model = bundle()
    b = model.featurize(Batch.from_triplets(triplets[:3]))
    b.epsilon = np.random.default_rng(2).standard_normal((3, 3) + b.x_v.shape[1:])
    loss = mc_loss(model, b).item()
    per_draw = []
    for j in range(3):
        s = model.generator(Tensor(b.x_v), Tensor(b.q_emb), Tensor(b.a_emb), epsilon=b.epsilon[j])
        logits = model.backbone.decode(inject(Tensor(b.x_v), s.noise, "add"), Tensor(b.text_emb))
        per_draw.append(masked_nll(logits, b.target_ids, b.answer_mask).item())
    assert loss == pytest.approx(np.mean(per_draw), abs=1e-12)


def test_mc_loss_uses_batch_epsilon(triplets):
    model = bundle()
    b = Batch.from_triplets(triplets[:2])
    model.featurize(b)
    b.epsilon = np.random.default_rng(0).standard_normal((2, 2) + b.x_v.shape[1:])
    assert mc_loss(model, b).item() == mc_loss(model, b).item()
    with pytest.raises(ValueError):
        mc_loss(model, Batch.from_triplets(triplets[:2]))


def test_mixed_answer_rows_match_separate_calls(triplets):
    model = bundle()
    b = model.featurize(Batch.from_triplets(triplets[:4]))
    eps = np.random.default_rng(0).standard_normal((1, 4) + b.x_v.shape[1:])
    keep = np.array([True, False, True, False])
    mixed = model.noisy_logits(b, eps, keep)[0].data
    with_a = model.noisy_logits(b, eps, True)[0].data
    without = model.noisy_logits(b, eps, False)[0].data
    np.testing.assert_allclose(mixed[keep], with_a[keep], atol=1e-12)
    np.testing.assert_allclose(mixed[~keep], without[~keep], atol=1e-12)


def gauss_hermite_expectation(f, mu, sigma, n=64):
    x, w = np.polynomial.hermite.hermgauss(n)
    return float(np.sum(w * f(mu + math.sqrt(2.0) * sigma * x)) / math.sqrt(math.pi))


def test_one_dimensional_toy_matches_gauss_hermite():
    # q(a=1 | e) = sigmoid(w e + b); the objective is E_eps[-log q] with e = mu + sigma eps
    mu, log_sigma, w, bias = 0.3, math.log(0.8), 1.7, -0.4
    m = 100_000
    eps = np.random.default_rng(7).standard_normal(m)
    e = sample(Tensor(np.full(m, mu)), Tensor(np.full(m, log_sigma)), eps)
    logits = T.concat([T.reshape(T.add_scalar(T.scale(e, w), bias), (m, 1)), Tensor(np.zeros((m, 1)))], axis=1)
    mc = T.mean(T.cross_entropy_logits(logits, np.zeros(m, dtype=int))).item()
    oracle = gauss_hermite_expectation(lambda z: np.logaddexp(0.0, -(w * z + bias)), mu, math.exp(log_sigma))
    assert abs(mc - oracle) / oracle < 0.01


def test_training_drives_down_loss_on_a_fixed_batch():
    # the generator only moves visual features of an untrained backbone, so the floor is well above 0
    from mung.synth import dataset

    from conftest import TASK_SCENE

    data = list(dataset(0, 32, "train", TASK_SCENE))
    model = bundle()
    cfg = TrainConfig(n=32, batch_size=32, epochs=200, learning_rate=1e-2, answer_dropout=0.0)
    res = train(model, data, cfg)
    assert res.losses[-1] < 0.6 * res.losses[0]
    assert np.mean(res.losses[-20:]) < np.mean(res.losses[80:100]) < np.mean(res.losses[:20])


def test_training_is_seed_deterministic(triplets):
    digests = []
    for _ in range(2):
        model = bundle()
        train(model, triplets, TrainConfig(batch_size=4, epochs=2, answer_dropout=0.5))
        digests.append(model.generator.digest())
    assert digests[0] == digests[1]


def test_training_never_touches_the_backbone(triplets, tmp_path):
    model = bundle()
    before = model.backbone.digest()
    res = train(model, triplets, TrainConfig(batch_size=4, epochs=1), val=triplets[:4],
                metrics_path=tmp_path / "m.jsonl")
    assert model.backbone.digest() == before
    assert trainable_param_fraction(model) < 0.2
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == len(res.metrics) == 3
    import json

    rec = json.loads(lines[-1])
    assert set(rec) == {"step", "epoch", "loss", "H_cond_estimate", "lr", "grad_norm", "wall_ms"}
    assert rec["H_cond_estimate"] is not None


def test_training_refuses_unfrozen_backbone(triplets):
    model = bundle()
    model.backbone.frozen = False
    with pytest.raises(TrainingError):
        train(model, triplets, TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(m=0)


def test_adamw_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)


def test_adamw_rejects_non_finite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingError):
        AdamW([p], lr=0.1).step()


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == 5.0
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_schedules():
    assert scheduled_lr(1.0, 0, 10) == 1.0
    assert scheduled_lr(1.0, 5, 10, decay="linear") == pytest.approx(0.5)
    assert scheduled_lr(1.0, 0, 10, warmup_frac=0.5) < 1.0
