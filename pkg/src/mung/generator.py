"""Multimodal noise generator.

Maps (visual features, question embeddings[, answer embeddings]) to a
per-visual-token Gaussian ``N(mu, exp(log_sigma)^2)`` and draws the noise with
the reparameterization ``E = exp(log_sigma) * eps + mu`` so gradients reach
``mu`` and ``log_sigma`` while ``eps`` stays an external constant.

Three structures are available:

``ca``
    Visual tokens query the text (question, plus answer while training).
    Each head also sees a learned "null" key with a zero value, so a visual
    token can decline to read any text; one minus the null weight is the
    token's text-attention mass, which is what :func:`attention_map` reports.
``mlp``
    Per-token MLP on ``[layernorm(x_v) | mean-pooled text]``; no attention map.
``gauss``
    Input-independent ``mu = 0``, ``sigma = s``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .nn import as_batched, attention, init_weight, linear, ones, zeros
from .tensor import Tensor

VARIANTS = ("ca", "mlp", "gauss")
MERGES = ("add", "dot")
PREFIX = "mung/"


class UnsupportedVariantError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    variant: str = "ca"
    merge: str = "add"
    width: int = 16
    n_heads: int = 4
    sample_noise: bool = True
    log_sigma_min: float = -10.0
    log_sigma_max: float = 3.0
    log_sigma_init: float = -2.0
    head_init_std: float = 0.01
    gauss_scale: float | None = None  # None: 0.1 x RMS of X_V, set by calibrate()
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnsupportedVariantError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.merge not in MERGES:
            raise ValueError(f"merge must be one of {MERGES}, got {self.merge!r}")
        if self.variant == "ca" and self.width % self.n_heads:
            raise ValueError(f"width={self.width} is not divisible by n_heads={self.n_heads}")
        if self.log_sigma_min >= self.log_sigma_max:
            raise ValueError("log_sigma_min must be below log_sigma_max")


@dataclass
class NoiseSample:
    mu: Tensor
    log_sigma: Tensor | None
    epsilon: np.ndarray | None
    noise: Tensor
    attn_weights: np.ndarray | None = None  # [..., heads, n_vis, 1 + T_text], column 0 = null key


def sample(mu: Tensor, log_sigma: Tensor, epsilon) -> Tensor:
    """``E = exp(log_sigma) * epsilon + mu``; ``epsilon`` never receives a gradient."""
    eps = Tensor(epsilon.data if isinstance(epsilon, Tensor) else epsilon)
    if mu.shape != log_sigma.shape or mu.shape != eps.shape:
        raise T.DimensionError(
            f"sample: mu {list(mu.shape)}, log_sigma {list(log_sigma.shape)}, eps {list(eps.shape)}"
        )
    return T.add(T.hadamard(T.exp(log_sigma), eps), mu)


def inject(x_v: Tensor, e: Tensor, mode: str = "add") -> Tensor:
    if x_v.shape != e.shape:
        raise T.DimensionError(f"inject: x_v {list(x_v.shape)} vs noise {list(e.shape)}")
    if mode == "add":
        return T.add(x_v, e)
    if mode == "dot":
        return T.hadamard(x_v, e)
    raise ValueError(f"unknown merge mode {mode!r}")


class NoiseGenerator:
    def __init__(self, config: GeneratorConfig, d_model: int):
        self.config = c = config
        self.d_model = d = d_model
        rng = np.random.default_rng(c.seed)
        p: dict[str, Tensor] = {}
        mu_bias = 1.0 if c.merge == "dot" else 0.0
        if c.variant == "ca":
            p["ln.g"], p["ln.b"] = ones(d, "ln.g"), zeros(d, "ln.b")
            p["wq"] = init_weight(rng, d, c.width, "wq")
            p["wk"] = init_weight(rng, d, c.width, "wk")
            p["wv"] = init_weight(rng, d, c.width, "wv")
            p["null_k"] = Tensor(rng.standard_normal(c.width) / np.sqrt(c.width), True, "null_k")
            head_in = c.width
        elif c.variant == "mlp":
            p["ln.g"], p["ln.b"] = ones(d, "ln.g"), zeros(d, "ln.b")
            p["w1"] = init_weight(rng, 2 * d, c.width, "w1")
            p["b1"] = zeros(c.width, "b1")
            head_in = c.width
        else:
            head_in = 0
        if head_in:
            p["mu.w"] = Tensor(rng.standard_normal((head_in, d)) * c.head_init_std, True, "mu.w")
            p["mu.b"] = Tensor(np.full(d, mu_bias), True, "mu.b")
            if c.sample_noise:
                p["ls.w"] = Tensor(rng.standard_normal((head_in, d)) * c.head_init_std, True, "ls.w")
                p["ls.b"] = Tensor(np.full(d, c.log_sigma_init), True, "ls.b")
        self.params = p
        self.gauss_scale = c.gauss_scale

    # ------------------------------------------------------------ distribution parameters

    def calibrate(self, x_v) -> float:
        """Fix the Gaussian-baseline scale at 0.1 x RMS of the given visual features."""
        data = x_v.data if isinstance(x_v, Tensor) else np.asarray(x_v)
        if self.config.gauss_scale is None:
            self.gauss_scale = 0.1 * float(np.sqrt(np.mean(data**2)))
        return self.gauss_scale

    def compute_params(self, x_v: Tensor, x_l: Tensor, a: Tensor | None = None):
        """Return ``(mu, log_sigma, attn_weights)``.

        ``a`` (answer embeddings) is appended to the keys/values while training
        and omitted at inference. ``log_sigma`` is None when sampling is off.
        """
        c = self.config
        xv, squeeze = as_batched(x_v)
        xl, _ = as_batched(x_l)
        if xv.shape[-1] != self.d_model or xl.shape[-1] != self.d_model:
            raise T.DimensionError(
                f"compute_params: d_model {self.d_model} vs visual {xv.shape[-1]} / text {xl.shape[-1]}"
            )
        if xl.shape[0] != xv.shape[0]:
            raise T.DimensionError(f"compute_params: batch {xv.shape[0]} vs {xl.shape[0]}")
        text = xl
        if a is not None:
            ab, _ = as_batched(a)
            if ab.shape[1]:
                text = T.concat([xl, ab], axis=1)
        p = self.params
        attn = None
        if c.variant == "gauss":
            s = self.gauss_scale if self.gauss_scale is not None else 0.1
            mu = Tensor(np.full(xv.shape, 1.0 if c.merge == "dot" else 0.0))
            ls = Tensor(np.full(xv.shape, np.log(s))) if c.sample_noise else None
        else:
            if c.variant == "ca":
                h, attn = self._cross_attend(xv, text)
            else:
                h = self._mlp(xv, text)
            mu = linear(h, p["mu.w"], p["mu.b"])
            ls = None
            if c.sample_noise:
                ls = T.clamp(linear(h, p["ls.w"], p["ls.b"]), c.log_sigma_min, c.log_sigma_max)
        if squeeze:
            mu = T.reshape(mu, mu.shape[1:])
            ls = None if ls is None else T.reshape(ls, ls.shape[1:])
            attn = None if attn is None else attn[0]
        return mu, ls, attn

    def _cross_attend(self, xv: Tensor, text: Tensor):
        p, c = self.params, self.config
        B, Tt = text.shape[0], text.shape[1]
        q = T.matmul(T.layernorm(xv, p["ln.g"], p["ln.b"]), p["wq"])
        k = T.concat([T.broadcast_to(T.reshape(p["null_k"], (1, 1, c.width)), (B, 1, c.width)),
                      T.matmul(text, p["wk"])], axis=1)
        v = T.concat([Tensor(np.zeros((B, 1, c.width))), T.matmul(text, p["wv"])], axis=1)
        out, weights = attention(q, k, v, c.n_heads)
        return out, weights.data.copy()

    def _mlp(self, xv: Tensor, text: Tensor) -> Tensor:
        p = self.params
        pooled = T.mean(text, axis=1, keepdims=True)
        pooled = T.broadcast_to(pooled, xv.shape)
        z = T.concat([T.layernorm(xv, p["ln.g"], p["ln.b"]), pooled], axis=-1)
        return T.gelu(linear(z, p["w1"], p["b1"]))

    # ------------------------------------------------------------ noise

    def __call__(self, x_v: Tensor, x_l: Tensor, a: Tensor | None = None, epsilon=None,
                 rng: np.random.Generator | None = None) -> NoiseSample:
        mu, ls, attn = self.compute_params(x_v, x_l, a)
        if ls is None:
            return NoiseSample(mu=mu, log_sigma=None, epsilon=None, noise=mu, attn_weights=attn)
        if epsilon is None:
            rng = rng if rng is not None else np.random.default_rng()
            epsilon = rng.standard_normal(mu.shape)
        epsilon = np.asarray(epsilon, dtype=np.float64)
        return NoiseSample(mu=mu, log_sigma=ls, epsilon=epsilon, noise=sample(mu, ls, epsilon), attn_weights=attn)

    # ------------------------------------------------------------ bookkeeping

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {PREFIX + k: v.data.copy() for k, v in self.params.items()}
        if self.config.variant == "gauss" and self.gauss_scale is not None:
            # a fixed buffer, not a trainable parameter
            state[PREFIX + "buffer.gauss_scale"] = np.array([self.gauss_scale])
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .backbone import IncompatibleError

        for k, t in self.params.items():
            key = PREFIX + k
            if key not in state:
                raise IncompatibleError(f"checkpoint lacks {key}")
            if state[key].shape != t.shape:
                raise IncompatibleError(f"{key}: checkpoint shape {list(state[key].shape)} vs model {list(t.shape)}")
            t.data = np.array(state[key], dtype=np.float64)
        if PREFIX + "buffer.gauss_scale" in state:
            self.gauss_scale = float(state[PREFIX + "buffer.gauss_scale"][0])

    def digest(self) -> str:
        return checkpoint.params_digest(self.state_dict())

    def save(self, path) -> str:
        meta = {"kind": "generator", "config": asdict(self.config), "d_model": self.d_model}
        return checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, d_model: int | None = None) -> "NoiseGenerator":
        from .backbone import IncompatibleError

        state, meta = checkpoint.load(path)
        if meta.get("kind") != "generator":
            raise IncompatibleError(f"{path} is not a generator checkpoint")
        if d_model is not None and meta["d_model"] != d_model:
            raise IncompatibleError(f"generator d_model: checkpoint has {meta['d_model']}, backbone has {d_model}")
        gen = cls(GeneratorConfig(**meta["config"]), meta["d_model"])
        gen.load_state_dict(state)
        return gen


def attention_map(s: NoiseSample) -> np.ndarray:
    """Text-attention mass per visual token, averaged over heads; values in [0, 1]."""
    if s.attn_weights is None:
        raise UnsupportedVariantError("attention maps exist only for the cross-attention variant")
    return (1.0 - s.attn_weights[..., 0]).mean(axis=-2)


def expected_param_count(variant: str, d_model: int, width: int, sample_noise: bool = True) -> int:
    """Closed-form size of the generator's trainable parameter set."""
    d, w = d_model, width
    heads = (2 if sample_noise else 1) * (w * d + d)
    if variant == "ca":
        return 2 * d + 3 * d * w + w + heads
    if variant == "mlp":
        return 2 * d + 2 * d * w + w + heads
    if variant == "gauss":
        return 0
    raise ValueError(variant)


def param_count(generator: NoiseGenerator, backbone_params: int) -> tuple[int, float]:
    """(trainable generator scalars, their fraction of generator + backbone)."""
    n = generator.param_count()
    total = n + backbone_params
    return n, (n / total if total else 0.0)
