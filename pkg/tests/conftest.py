"""Shared fixtures: seeded generators, small configs and tiny synthetic data."""

import sys
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.config import Config, apply_overrides  # noqa: E402
from app.corpus import (  # noqa: E402
    SyntheticFaceSpec,
    expression_keypoints,
    neutral_keypoints,
    synth_session,
)
from app.generator import FaceGenerator  # noqa: E402

TINY = {
    "resolution": 16,
    "network.feature_channels": 4,
    "network.gate_hidden": 3,
    "attention.dim": 8,
    "corpus.identities": 2,
    "corpus.frames": 8,
    "corpus.vr_pairs": 6,
    "training.n_sources": 2,
    "training.steps": 2,
    "training.phase1_steps": 1,
    "training.checkpoint_every": 1,
    "training.vr_mix": 0.5,
    "training.loader_queue": 2,
    "geometry.mask_reference_resolution": 64,
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> Config:
    """16x16 images and narrow networks: fast enough for unit tests."""
    return apply_overrides(Config(), TINY)


@pytest.fixture
def spec16() -> SyntheticFaceSpec:
    return SyntheticFaceSpec.from_seed(7, resolution=16)


@pytest.fixture
def spec64() -> SyntheticFaceSpec:
    return SyntheticFaceSpec.from_seed(7, resolution=64)


@pytest.fixture
def neutral(spec64):
    return neutral_keypoints(spec64)


@pytest.fixture
def open_mouth(neutral):
    return expression_keypoints(neutral, opening=0.8)


@pytest.fixture
def tiny_generator(tiny_config) -> FaceGenerator:
    return FaceGenerator.from_config(tiny_config)


@pytest.fixture
def tiny_session(tiny_config):
    return synth_session(tiny_config, identity_seed=11, frames=6, stream_seed=0)


@pytest.fixture
def tiny_test_session(tiny_config):
    return synth_session(tiny_config, identity_seed=11, frames=4, stream_seed=1)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Centered finite differences of a scalar function of ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f()
        x[i] = orig - eps
        lo = f()
        x[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(1e-8, np.abs(a).max(), np.abs(b).max()))
