import numpy as np
import pytest

from mung import tensor as T
from mung.generator import (
    GeneratorConfig,
    NoiseGenerator,
    UnsupportedVariantError,
    attention_map,
    expected_param_count,
    inject,
    sample,
)
from mung.tensor import DimensionError, Tensor

from conftest import bundle


def test_sample_examples():
    e = sample(Tensor(np.zeros(3)), Tensor(np.zeros(3)), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(e.data, [1.0, -2.0, 0.5])
    e = sample(Tensor(np.full(2, 2.0)), Tensor(np.full(2, -40.0)), np.array([5.0, -5.0]))
    np.testing.assert_allclose(e.data, 2.0, atol=1e-15)


def test_sample_shape_mismatch():
    with pytest.raises(DimensionError):
        sample(Tensor(np.zeros(3)), Tensor(np.zeros(2)), np.zeros(3))


def test_inject_modes():
    x, e = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 0.5]))
    np.testing.assert_array_equal(inject(x, e, "add").data, [4.0, 2.5])
    np.testing.assert_array_equal(inject(x, e, "dot").data, [3.0, 1.0])
    with pytest.raises(ValueError):
        inject(x, e, "concat")


def test_reparameterization_gradients_reach_mu_and_log_sigma_only():
    mu = Tensor(np.zeros(4), requires_grad=True)
    ls = Tensor(np.zeros(4), requires_grad=True)
    eps = Tensor(np.random.default_rng(0).standard_normal(4), requires_grad=True)
    T.sum(T.square(sample(mu, ls, eps))).backward()
    assert mu.grad is not None and ls.grad is not None
    assert eps.grad is None


@pytest.mark.parametrize("variant", ["ca", "mlp"])
@pytest.mark.parametrize("noise", [True, False])
def test_param_count_formula(variant, noise):
    gen = NoiseGenerator(GeneratorConfig(variant=variant, sample_noise=noise, width=8, n_heads=2), 16)
    assert gen.param_count() == expected_param_count(variant, 16, 8, noise)


def test_gauss_has_no_trainable_parameters():
    assert NoiseGenerator(GeneratorConfig(variant="gauss"), 16).param_count() == 0


def test_bad_variant_rejected():
    with pytest.raises(UnsupportedVariantError):
        GeneratorConfig(variant="lstm")


def test_answer_changes_ca_output_but_not_shape(triplets):
    m = bundle()
    from mung.training import Batch

    b = m.featurize(Batch.from_triplets(triplets[:2]))
    mu_a, _, attn_a = m.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb), Tensor(b.a_emb))
    mu_q, _, attn_q = m.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb), None)
    assert mu_a.shape == mu_q.shape == b.x_v.shape
    assert attn_a.shape[-1] == 1 + b.q_emb.shape[1] + b.a_emb.shape[1]
    assert attn_q.shape[-1] == 1 + b.q_emb.shape[1]


def test_attention_map_range(triplets):
    m = bundle()
    from mung.training import Batch

    b = m.featurize(Batch.from_triplets(triplets[:4]))
    s = m.generator(Tensor(b.x_v), Tensor(b.q_emb), epsilon=np.zeros(b.x_v.shape))
    a = attention_map(s)
    assert a.shape == (4, 9)
    assert np.all((a >= 0) & (a <= 1))


def test_attention_map_needs_ca(triplets):
    m = bundle("mlp")
    from mung.training import Batch

    b = m.featurize(Batch.from_triplets(triplets[:1]))
    with pytest.raises(UnsupportedVariantError):
        attention_map(m.generator(Tensor(b.x_v), Tensor(b.q_emb), epsilon=np.zeros(b.x_v.shape)))


def test_log_sigma_is_clamped(triplets):
    m = bundle(log_sigma_init=50.0)
    from mung.training import Batch

    b = m.featurize(Batch.from_triplets(triplets[:1]))
    _, ls, _ = m.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb))
    assert ls.data.max() == 3.0


def test_generator_checkpoint_round_trip(tmp_path):
    gen = NoiseGenerator(GeneratorConfig(width=8, n_heads=2, seed=5), 16)
    gen.save(tmp_path / "g.mung")
    back = NoiseGenerator.load(tmp_path / "g.mung", 16)
    assert back.digest() == gen.digest()
    assert all(k.startswith("mung/") for k in back.state_dict())


def test_gauss_with_unit_scale_is_standard_normal_noise():
    gen = NoiseGenerator(GeneratorConfig(variant="gauss", gauss_scale=1.0), 16)
    mu, ls, attn = gen.compute_params(Tensor(np.ones((9, 16))), Tensor(np.ones((4, 16))))
    assert np.all(mu.data == 0) and np.all(ls.data == 0) and attn is None


def test_zero_output_heads_give_zero_parameters(triplets):
    m = bundle(log_sigma_init=0.0)
    for k in ("mu.w", "mu.b", "ls.w", "ls.b"):
        m.generator.params[k].data[:] = 0.0
    from mung.training import Batch

    b = m.featurize(Batch.from_triplets(triplets[:2]))
    mu, ls, attn = m.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb))
    assert np.all(mu.data == 0) and np.all(ls.data == 0)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


def test_sample_derivatives_against_finite_differences():
    rng = np.random.default_rng(3)
    mu, ls = Tensor(rng.standard_normal(6), requires_grad=True), Tensor(rng.standard_normal(6), requires_grad=True)
    eps = rng.standard_normal(6)
    T.sum(sample(mu, ls, eps)).backward()
    np.testing.assert_array_equal(mu.grad, np.ones(6))
    np.testing.assert_allclose(ls.grad, np.exp(ls.data) * eps, rtol=1e-15)
    rep = T.grad_check(lambda: T.sum(T.square(sample(mu, ls, eps))), [mu, ls])
    assert rep.max_rel_error < 1e-6


def test_sample_arithmetic_example():
    e = sample(Tensor([0.5]), Tensor([np.log(2.0)]), np.array([-0.25]))
    assert e.data[0] == 0.0


def test_deterministic_noise_limit():
    mu, ls = Tensor(np.full(5, 1.0)), Tensor(np.full(5, -40.0))
    a = sample(mu, ls, np.random.default_rng(0).standard_normal(5)).data
    b = sample(mu, ls, np.random.default_rng(1).standard_normal(5)).data
    assert np.abs(a - b).max() <= 1e-15


def test_injection_identities():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    e = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    assert inject(x, Tensor(np.ones((3, 4))), "dot").data.tobytes() == x.data.tobytes()
    assert inject(x, Tensor(np.zeros((3, 4))), "add").data.tobytes() == x.data.tobytes()
    np.testing.assert_allclose(T.sub(inject(x, e, "add"), e).data, x.data, atol=1e-15)
    with pytest.raises(DimensionError):
        inject(x, Tensor(np.zeros((3, 5))))


def test_gradient_isolation_through_full_forward(triplets):
    from mung.training import Batch, mc_loss

    m = bundle()
    b = Batch.from_triplets(triplets[:3])
    m.featurize(b)
    b.epsilon = np.random.default_rng(0).standard_normal((1, 3) + b.x_v.shape[1:])
    mc_loss(m, b).backward()
    assert all(p.grad is None for p in m.backbone.parameters())
    assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in m.generator.parameters())


def test_empty_answer_equals_no_answer(triplets):
    from mung.training import Batch

    m = bundle()
    b = m.featurize(Batch.from_triplets(triplets[:2]))
    none = m.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb), None)
    empty = m.generator.compute_params(Tensor(b.x_v), Tensor(b.q_emb), Tensor(np.zeros((2, 0, 16))))
    assert none[0].data.tobytes() == empty[0].data.tobytes()
    assert none[1].data.tobytes() == empty[1].data.tobytes()


def test_modality_width_mismatch():
    gen = NoiseGenerator(GeneratorConfig(width=8, n_heads=2), 16)
    with pytest.raises(DimensionError):
        gen.compute_params(Tensor(np.zeros((9, 16))), Tensor(np.zeros((4, 8))))


def test_gauss_bundle_has_zero_trainable_fraction():
    from mung.training import trainable_param_fraction

    assert trainable_param_fraction(bundle("gauss")) == 0.0


def test_width_doubling_follows_formula():
    small = expected_param_count("ca", 16, 8)
    large = expected_param_count("ca", 16, 16)
    assert large - small == 3 * 16 * 8 + 8 + 2 * 8 * 16
