import numpy as np
import pytest

from segxal.core import ALConfig, Image, LabelMask, ProbMap, Sample
from segxal.data import SceneSpec, generate_scene
from segxal.model import ModelConfig, UNetSegmenter


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SceneSpec(width=128, height=64, num_classes=5, num_objects=3, seed=11))


@pytest.fixture(scope="session")
def trained_estimator(scene):
    """A small model overfit to one scene; shared by saliency/model tests."""
    est = UNetSegmenter(num_classes=5, height=64, width=128, epochs_per_cycle=60,
                        learning_rate=0.05, seed=3, warm_start=False)
    est.fit_samples([scene])
    return est


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_probmap(rng, c, h, w):
    raw = rng.random((c, h, w)).astype(np.float64) + 1e-6
    return ProbMap(raw / raw.sum(axis=0, keepdims=True))


def flat_image(h=32, w=32, value=0.5, image_id="img"):
    return Image(np.full((h, w, 3), value, dtype=np.float32), id=image_id)


def mask_of(labels, num_classes=5):
    return LabelMask(np.asarray(labels, dtype=np.int64), num_classes)
