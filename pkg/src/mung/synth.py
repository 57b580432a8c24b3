"""Synthetic VQA triplets with planted ground-truth relevance.

A scene is a grid of slots, each empty or holding an object with a type, a
colour and a salience flag. Questions come from three templates (presence,
count, colour) and are emitted directly as integer tokens, so no tokenizer
is involved. Every triplet records which slots the question is actually
about; that mask is the oracle the relevance metrics are scored against.

Everything is a pure function of ``(seed, split, index)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

# ---------------------------------------------------------------- vocabulary

TYPE_NAMES = ("zebra", "giraffe", "ball", "box")
COLOR_NAMES = ("red", "green", "blue", "yellow")
TEMPLATES = ("presence", "count", "color")
K_MAX = 4

PAD, BOS, SEP, EOS = 0, 1, 2, 3
Q_PRESENCE, Q_COUNT, Q_COLOR = 4, 5, 6
TYPE_TOKEN0 = 7
YES = TYPE_TOKEN0 + len(TYPE_NAMES)
NO = YES + 1
DIGIT0 = NO + 1
COLOR_TOKEN0 = DIGIT0 + K_MAX + 1
VOCAB_SIZE = COLOR_TOKEN0 + len(COLOR_NAMES)

QUESTION_LEN = 4  # BOS, template word, type word, SEP
ANSWER_LEN = 2  # answer word, EOS

_TEMPLATE_TOKEN = {"presence": Q_PRESENCE, "count": Q_COUNT, "color": Q_COLOR}
_SPLIT_SALT = {"train": 11, "val": 23, "test": 37, "pretrain": 53}

EMPTY = 0  # slot type code; objects use 1..len(TYPE_NAMES)


def token_name(tok: int) -> str:
    names = {PAD: "<pad>", BOS: "<bos>", SEP: "<sep>", EOS: "<eos>",
             Q_PRESENCE: "is-there", Q_COUNT: "how-many", Q_COLOR: "what-color",
             YES: "yes", NO: "no"}
    if tok in names:
        return names[tok]
    if TYPE_TOKEN0 <= tok < YES:
        return TYPE_NAMES[tok - TYPE_TOKEN0]
    if DIGIT0 <= tok < COLOR_TOKEN0:
        return str(tok - DIGIT0)
    if COLOR_TOKEN0 <= tok < VOCAB_SIZE:
        return COLOR_NAMES[tok - COLOR_TOKEN0]
    raise ValueError(f"unknown token {tok}")


class TemplateError(ValueError):
    """The requested question template does not apply to this scene."""


@dataclass
class SceneConfig:
    n_slots: int = 9
    grid: tuple[int, int] = (3, 3)
    distractors_min: int = 0
    distractors_max: int = 0
    jitter: float = 0.1
    salience_p: float = 0.5

    @property
    def d_raw(self) -> int:
        # type one-hot (incl. empty) + colour one-hot + salience + two nuisance dims
        return 1 + len(TYPE_NAMES) + len(COLOR_NAMES) + 1 + 2

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.grid[0] * self.grid[1] != self.n_slots:
            raise ValueError(f"grid {self.grid} does not hold {self.n_slots} slots")
        if not 0 <= self.distractors_min <= self.distractors_max:
            raise ValueError("need 0 <= distractors_min <= distractors_max")
        if self.n_slots < K_MAX + self.distractors_max:
            raise ValueError("too few slots for k_max targets plus distractors")


@dataclass
class SyntheticScene:
    types: np.ndarray  # int, 0 = empty
    colors: np.ndarray  # int, -1 for empty
    salient: np.ndarray  # bool
    features: np.ndarray  # [n_slots, d_raw]


@dataclass
class Triplet:
    visual: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    relevance: np.ndarray
    template: str
    scene: SyntheticScene = field(repr=False)

    @property
    def text(self) -> np.ndarray:
        return np.concatenate([self.question, self.answer])

    @property
    def answer_mask(self) -> np.ndarray:
        """True at decoder input positions whose next-token target is an answer token."""
        mask = np.zeros(len(self.question) + len(self.answer) - 1, dtype=bool)
        mask[len(self.question) - 1:] = True
        return mask


def to_visual_features(scene: SyntheticScene | None, rng: np.random.Generator, cfg: SceneConfig,
                       types=None, colors=None, salient=None) -> np.ndarray:
    """Attribute one-hots plus seeded Gaussian jitter, one row per slot."""
    if scene is not None:
        types, colors, salient = scene.types, scene.colors, scene.salient
    n = len(types)
    nt = len(TYPE_NAMES) + 1
    feats = np.zeros((n, cfg.d_raw))
    feats[np.arange(n), types] = 1.0
    has = colors >= 0
    feats[np.arange(n)[has], nt + colors[has]] = 1.0
    feats[:, nt + len(COLOR_NAMES)] = salient.astype(float)
    feats += cfg.jitter * rng.standard_normal(feats.shape)
    return feats


def make_scene(rng: np.random.Generator, cfg: SceneConfig, target_type: int, k_target: int,
               target_color: int | None = None) -> SyntheticScene:
    """Place ``k_target`` objects of ``target_type`` plus salient distractors of other types."""
    if not 0 <= k_target <= K_MAX:
        raise ValueError(f"k_target must lie in [0, {K_MAX}]")
    n = cfg.n_slots
    k_dis = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
    slots = rng.permutation(n)
    types = np.zeros(n, dtype=np.int64)
    colors = np.full(n, -1, dtype=np.int64)
    salient = np.zeros(n, dtype=bool)
    tgt, dis = slots[:k_target], slots[k_target:k_target + k_dis]
    types[tgt] = target_type
    colors[tgt] = rng.integers(0, len(COLOR_NAMES), size=k_target)
    if target_color is not None and k_target:
        colors[tgt[0]] = target_color
    salient[tgt] = rng.random(k_target) < cfg.salience_p
    others = [t for t in range(1, len(TYPE_NAMES) + 1) if t != target_type]
    types[dis] = rng.choice(others, size=k_dis)
    colors[dis] = rng.integers(0, len(COLOR_NAMES), size=k_dis)
    salient[dis] = True
    feats = to_visual_features(None, rng, cfg, types, colors, salient)
    return SyntheticScene(types=types, colors=colors, salient=salient, features=feats)


def make_question(scene: SyntheticScene, template: str, target_type: int):
    """Return ``(question_ids, answer_ids, relevance_mask)``.

    Relevance marks the slots holding the queried type. When the queried
    type is absent (presence "no", count 0) it marks every occupied slot
    instead: those are the objects that must be inspected to rule the type
    out. A clean scene with nothing in it then gets an all-false mask.
    """
    if template not in _TEMPLATE_TOKEN:
        raise ValueError(f"unknown template {template!r}")
    hits = scene.types == target_type
    k = int(hits.sum())
    question = np.array([BOS, _TEMPLATE_TOKEN[template], TYPE_TOKEN0 + target_type - 1, SEP])
    if template == "presence":
        ans = YES if k else NO
    elif template == "count":
        if k > K_MAX:
            raise TemplateError(f"count {k} exceeds k_max={K_MAX}")
        ans = DIGIT0 + k
    else:
        if k != 1:
            raise TemplateError("colour question needs exactly one object of the queried type")
        ans = COLOR_TOKEN0 + int(scene.colors[hits][0])
    relevance = hits.copy() if k else scene.types != EMPTY
    return question, np.array([ans, EOS]), relevance


def n_classes(template: str) -> int:
    return {"presence": 2, "count": K_MAX + 1, "color": len(COLOR_NAMES)}[template]


def make_triplet(seed: int, split: str, index: int, cfg: SceneConfig) -> Triplet:
    """Deterministic triplet for ``(seed, split, index)``.

    Templates cycle with the index and the answer class cycles within each
    template, which keeps the answer distribution balanced.
    """
    rng = np.random.default_rng([seed, _SPLIT_SALT[split], index])
    template = TEMPLATES[index % len(TEMPLATES)]
    cls = (index // len(TEMPLATES)) % n_classes(template)
    target_type = int(rng.integers(1, len(TYPE_NAMES) + 1))
    if template == "presence":
        k, color = (int(rng.integers(1, 3)), None) if cls == 0 else (0, None)
    elif template == "count":
        k, color = cls, None
    else:
        k, color = 1, cls
    scene = make_scene(rng, cfg, target_type, k, color)
    q, a, rel = make_question(scene, template, target_type)
    return Triplet(visual=scene.features, question=q, answer=a, relevance=rel,
                   template=template, scene=scene)


def dataset(seed: int, size: int, split: str, cfg: SceneConfig) -> Iterator[Triplet]:
    if split not in _SPLIT_SALT:
        raise ValueError(f"unknown split {split!r}")
    for i in range(size):
        yield make_triplet(seed, split, i, cfg)


def oracle_answer(scene: SyntheticScene, question: np.ndarray) -> np.ndarray:
    """Answer by reading scene attributes directly (the solvability oracle)."""
    template = {v: k for k, v in _TEMPLATE_TOKEN.items()}[int(question[1])]
    target_type = int(question[2]) - TYPE_TOKEN0 + 1
    return make_question(scene, template, target_type)[1]


def triplet_digest(t: Triplet) -> str:
    h = hashlib.sha256()
    for arr in (t.scene.types, t.scene.colors, t.scene.salient, t.visual, t.question, t.answer):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def triplet_record(t: Triplet) -> dict:
    slots = [
        {"type": int(ty), "color": int(c), "salient": bool(s), "features": [float(v) for v in f]}
        for ty, c, s, f in zip(t.scene.types, t.scene.colors, t.scene.salient, t.visual)
    ]
    return {
        "template": t.template,
        "slots": slots,
        "question": [int(x) for x in t.question],
        "answer": [int(x) for x in t.answer],
        "relevance": [bool(x) for x in t.relevance],
    }


def dump_jsonl(triplets, path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(triplet_record(t), sort_keys=True) + "\n")
            n += 1
    return n


def scene_config_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["grid"] = list(cfg.grid)
    return d
