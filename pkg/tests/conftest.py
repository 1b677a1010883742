import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.configclass import ExperimentConfig, OptimizerConfig, TrainingConfig  # noqa: E402
from core.models import Batch  # noqa: E402
from lib.network import NetworkModel, build_plain_mlp  # noqa: E402
from lib.sampling import make_synthetic  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    """40 샘플, batch 8 → epoch 당 5 batch"""
    return make_synthetic("gaussian_blobs", n=40, dims=2, seed=0, classes=3)


@pytest.fixture
def tiny_model():
    return NetworkModel(build_plain_mlp(2, 3, width=4, depth=1, activation="tanh", batch_norm=True))


@pytest.fixture
def training():
    return TrainingConfig(optimizer=OptimizerConfig(kind="sgd", eta=0.1), epochs=3, batch_size=8,
                          init_seed=3, sampler_seed=5)


@pytest.fixture
def small_batch(rng):
    return Batch(rng.normal(size=(6, 3)), rng.integers(0, 3, size=6), 0)


def experiment(**overrides) -> ExperimentConfig:
    """테스트용 최소 실험 설정"""
    data = {
        "name": "tiny",
        "data": {"kind": "gaussian_blobs", "n": 64, "dims": 2, "classes": 2, "batch_size": 16},
        "model": {"family": "residual_mlp", "width": 4, "blocks": 2, "blocks_per_stage": 1},
        "optimizer": {"kind": "sgd", "eta": 0.05},
        "epochs": 2,
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


def quadratic_experiment(eta: float = 0.1, epochs: int = 100, **overrides) -> ExperimentConfig:
    """ℓ(θ)=½θ² 닫힌형 실험 (epoch 당 2 batch)"""
    return experiment(
        name="quadratic",
        data={"kind": "gaussian_blobs", "n": 8, "dims": 2, "batch_size": 4},
        model={"family": "quadratic", "quadratic_dim": 1, "quadratic_theta0": 1.0},
        optimizer={"kind": "sgd", "eta": eta},
        epochs=epochs,
        **overrides,
    )
