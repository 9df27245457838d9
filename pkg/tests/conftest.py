from __future__ import annotations

import numpy as np
import pytest

from app.dit import ModelConfig, build_model
from app.oracles import CompositorOracle
from app.panels import PanelLayout
from app.synthworld import render, sample_specs
from worker.synth_gen import generate_dataset

SMALL_H = 32
SMALL_W = 24


@pytest.fixture
def layout() -> PanelLayout:
    return PanelLayout()


@pytest.fixture
def small_config() -> ModelConfig:
    """Tiny transformer on 32×24 panels: large enough for synthworld renders, fast on CPU."""
    return ModelConfig(
        d_model=16,
        heads=2,
        layers=2,
        time_dim=16,
        mlp_ratio=2.0,
        layout=PanelLayout(H=SMALL_H, W=SMALL_W, patch=4, text_tokens=2),
    )


@pytest.fixture
def small_model(small_config):
    return build_model(small_config, seed=3).eval()


@pytest.fixture
def compositor() -> CompositorOracle:
    return CompositorOracle()


@pytest.fixture
def person_pair():
    pm = render(*sample_specs(11))
    pn = render(*sample_specs(12))
    return pm, pn


@pytest.fixture
def small_pair():
    pm = render(*sample_specs(21), SMALL_H, SMALL_W)
    pn = render(*sample_specs(22), SMALL_H, SMALL_W)
    return pm, pn


@pytest.fixture
def small_persons(tmp_path):
    return generate_dataset(6, seed=5, out_dir=tmp_path / "persons", H=SMALL_H, W=SMALL_W)


@pytest.fixture
def rand_image():
    def make(seed: int, H: int = SMALL_H, W: int = SMALL_W) -> np.ndarray:
        return np.random.default_rng(seed).random((H, W, 3)).astype(np.float32)

    return make

