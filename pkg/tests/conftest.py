import numpy as np
import pytest

from mung.backbone import Backbone, BackboneConfig
from mung.generator import GeneratorConfig, NoiseGenerator
from mung.synth import SceneConfig, dataset
from mung.training import ModelBundle

TINY_BB = BackboneConfig(d_model=16, n_decoder_layers=1, n_heads=2, d_ff=32, seed=3)
TASK_SCENE = SceneConfig(distractors_min=1, distractors_max=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    return Backbone(TINY_BB)


@pytest.fixture
def triplets():
    return list(dataset(0, 12, "train", TASK_SCENE))


def bundle(variant="ca", merge="add", sample_noise=True, backbone=None, **kw):
    bb = backbone or Backbone(TINY_BB)
    bb.freeze()
    gen = NoiseGenerator(GeneratorConfig(variant=variant, merge=merge, sample_noise=sample_noise, width=8,
                                         n_heads=2, **kw), bb.config.d_model)
    return ModelBundle(bb, gen)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(n: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
