"""Toy multimodal LM: visual encoder -> alignment layer -> causal decoder.

The alignment-layer output is the injection site for generated noise. The
decoder sees ``[visual tokens | text tokens]``: visual tokens attend to each
other bidirectionally, text tokens attend to every visual token and causally
to earlier text.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .nn import as_batched, attention, init_weight, linear, ones, zeros
from .synth import EOS, PAD, VOCAB_SIZE
from .tensor import Tensor


class LengthError(ValueError):
    pass


class IncompatibleError(ValueError):
    """A checkpoint does not match the configuration it is loaded into."""


@dataclass
class BackboneConfig:
    d_raw: int = 12
    d_model: int = 64
    n_vis_tokens: int = 9
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 16
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < VOCAB_SIZE:
            raise ValueError(f"vocab_size must be at least {VOCAB_SIZE}")


class Backbone:
    def __init__(self, config: BackboneConfig):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        p: dict[str, Tensor] = {}
        p["enc.w"] = init_weight(rng, c.d_raw, c.d_model, "enc.w")
        p["enc.b"] = zeros(c.d_model, "enc.b")
        p["align.w"] = init_weight(rng, c.d_model, c.d_model, "align.w")
        p["align.b"] = zeros(c.d_model, "align.b")
        p["tok_emb"] = Tensor(rng.standard_normal((c.vocab_size, c.d_model)) * 0.5, True, "tok_emb")
        p["pos_emb"] = Tensor(rng.standard_normal((c.max_seq_len, c.d_model)) * 0.1, True, "pos_emb")
        p["vis_seg"] = Tensor(rng.standard_normal(c.d_model) * 0.1, True, "vis_seg")
        for i in range(c.n_decoder_layers):
            pre = f"dec{i}."
            p[pre + "ln1.g"] = ones(c.d_model, pre + "ln1.g")
            p[pre + "ln1.b"] = zeros(c.d_model, pre + "ln1.b")
            for m in "qkvo":
                p[pre + f"w{m}"] = init_weight(rng, c.d_model, c.d_model, pre + f"w{m}")
            p[pre + "bo"] = zeros(c.d_model, pre + "bo")
            p[pre + "ln2.g"] = ones(c.d_model, pre + "ln2.g")
            p[pre + "ln2.b"] = zeros(c.d_model, pre + "ln2.b")
            p[pre + "ff1.w"] = init_weight(rng, c.d_model, c.d_ff, pre + "ff1.w")
            p[pre + "ff1.b"] = zeros(c.d_ff, pre + "ff1.b")
            p[pre + "ff2.w"] = init_weight(rng, c.d_ff, c.d_model, pre + "ff2.w", gain=0.5)
            p[pre + "ff2.b"] = zeros(c.d_model, pre + "ff2.b")
        p["lnf.g"] = ones(c.d_model, "lnf.g")
        p["lnf.b"] = zeros(c.d_model, "lnf.b")
        p["head.w"] = init_weight(rng, c.d_model, c.vocab_size, "head.w")
        p["head.b"] = zeros(c.vocab_size, "head.b")
        self.params = p
        self.frozen = False

    # ------------------------------------------------------------ visual path

    def encode_visual(self, scene_features) -> Tensor:
        x = scene_features if isinstance(scene_features, Tensor) else Tensor(scene_features)
        if x.shape[-1] != self.config.d_raw:
            raise T.DimensionError(f"scene features width {x.shape[-1]} != d_raw {self.config.d_raw}")
        return T.gelu(linear(x, self.params["enc.w"], self.params["enc.b"]))

    def align(self, visual: Tensor) -> Tensor:
        return linear(visual, self.params["align.w"], self.params["align.b"])

    def visual_features(self, scene_features) -> Tensor:
        """X_V: the alignment-layer output handed to the noise generator."""
        return self.align(self.encode_visual(scene_features))

    # ------------------------------------------------------------ text path

    def embed_tokens(self, ids, offset: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if offset + n > self.config.max_seq_len:
            raise LengthError(f"text positions up to {offset + n} exceed max_seq_len {self.config.max_seq_len}")
        tok = T.take_rows(self.params["tok_emb"], ids)
        pos = T.take_rows(self.params["pos_emb"], np.broadcast_to(np.arange(offset, offset + n), ids.shape))
        return T.add(tok, pos)

    # ------------------------------------------------------------ decoder

    def _allowed(self, n_vis: int, n_text: int) -> np.ndarray:
        S = n_vis + n_text
        i = np.arange(S)[:, None]
        j = np.arange(S)[None, :]
        return (j < n_vis) | ((i >= n_vis) & (j <= i))

    def decode(self, x_v_injected: Tensor, text_embed: Tensor) -> Tensor:
        """Next-token logits at every text position, shape [..., T_text, vocab]."""
        c = self.config
        xv, squeeze = as_batched(x_v_injected)
        xt, _ = as_batched(text_embed)
        if xv.shape[0] != xt.shape[0] or xv.shape[-1] != xt.shape[-1]:
            raise T.DimensionError(f"decode: visual {list(xv.shape)} vs text {list(xt.shape)}")
        B, n, d = xv.shape
        Tt = xt.shape[1]
        if n + Tt > c.max_seq_len:
            raise LengthError(f"sequence length {n + Tt} exceeds max_seq_len {c.max_seq_len}")
        p = self.params
        seg = T.broadcast_to(p["vis_seg"], xv.shape)
        h = T.concat([T.add(xv, seg), xt], axis=1)
        allowed = self._allowed(n, Tt)
        for i in range(c.n_decoder_layers):
            pre = f"dec{i}."
            a = T.layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q, k, v = (T.matmul(a, p[pre + f"w{m}"]) for m in "qkv")
            o, _ = attention(q, k, v, c.n_heads, allowed)
            h = T.add(h, linear(o, p[pre + "wo"], p[pre + "bo"]))
            f = T.layernorm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f = linear(T.gelu(linear(f, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
            h = T.add(h, f)
        # only text positions are read out
        text_h = T.narrow(h, 1, n, n + Tt)
        text_h = T.layernorm(text_h, p["lnf.g"], p["lnf.b"])
        logits = linear(text_h, p["head.w"], p["head.b"])
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return logits

    def forward(self, scene_features, text_ids) -> Tensor:
        return self.decode(self.visual_features(scene_features), self.embed_tokens(text_ids))

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def freeze(self) -> "Backbone":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise IncompatibleError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise IncompatibleError(f"{k}: checkpoint shape {list(state[k].shape)} vs model {list(t.shape)}")
            t.data = np.array(state[k], dtype=np.float64)

    def digest(self) -> str:
        return checkpoint.params_digest(self.state_dict())

    def save(self, path) -> str:
        return checkpoint.save(path, self.state_dict(), {"kind": "backbone", "config": asdict(self.config)})

    @classmethod
    def load(cls, path, config: BackboneConfig | None = None) -> "Backbone":
        state, meta = checkpoint.load(path)
        stored = BackboneConfig(**meta["config"]) if "config" in meta else None
        if config is not None and stored is not None:
            for key, val in asdict(config).items():
                if key != "seed" and asdict(stored)[key] != val:
                    raise IncompatibleError(f"backbone {key}: checkpoint has {asdict(stored)[key]}, config has {val}")
        model = cls(config or stored)
        model.load_state_dict(state)
        return model


def generate_greedy(backbone: Backbone, x_v_injected: Tensor, question_ids, max_new: int = 2) -> list[np.ndarray]:
    """Argmax decoding until EOS or ``max_new`` tokens; one array per batch row."""
    q = np.atleast_2d(np.asarray(question_ids, dtype=np.int64))
    xv, _ = as_batched(x_v_injected)
    ids = q.copy()
    done = np.zeros(len(q), dtype=bool)
    out = [[] for _ in range(len(q))]
    with T.no_grad():
        for _ in range(max_new):
            logits = backbone.decode(xv, backbone.embed_tokens(ids)).data
            nxt = logits[:, -1].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            for r in np.flatnonzero(~done):
                out[r].append(int(nxt[r]))
            done |= nxt == EOS
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            if done.all():
                break
    return [np.array(o, dtype=np.int64) for o in out]


def pretrain_backbone(backbone: Backbone, triplets, steps: int, lr: float, batch_size: int = 32,
                      seed: int = 0, weight_decay: float = 0.01, log=None) -> list[dict]:
    """Plain answer-masked NLL training on clean data; returns per-step metrics."""
    from .optim import AdamW, clip_grad_norm, scheduled_lr
    from .training import Batch, TrainingError, masked_nll

    if backbone.frozen:
        raise TrainingError("cannot pretrain a frozen backbone")
    data = Batch.from_triplets(list(triplets))
    rng = np.random.default_rng(seed)
    params = backbone.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    history = []
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        b = data.subset(idx)
        logits = backbone.decode(backbone.visual_features(b.visual), backbone.embed_tokens(b.input_ids))
        loss = masked_nll(logits, b.target_ids, b.answer_mask)
        for t in params:
            t.grad = None
        loss.backward()
        gnorm = clip_grad_norm(params, 1.0)
        opt.lr = scheduled_lr(lr, step, steps, decay="linear")
        opt.step()
        rec = {"step": step, "loss": loss.item(), "grad_norm": gnorm, "lr": opt.lr}
        history.append(rec)
        if log is not None:
            log(rec)
    return history
