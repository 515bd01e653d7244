"""
Pytest configuration and fixtures for the SDD toolkit tests.
"""
from typing import Callable, Dict, List, Mapping

import numpy as np
import pytest
import torch

from sdd.config import load_settings
from sdd.container import write_dataset
from sdd.models import model_config_for
from sdd.schemas import DatasetSpec
from sdd.synthgen import build_manifest, iter_dataset

# Small model shapes used throughout the tests
TEST_FILTERS = (8, 8, 8)
TEST_SIZE = 16
TEST_LATENT = 8


@pytest.fixture(scope="function")
def settings(tmp_path):
    """
    Settings for fast runs: 16x16 spectrograms, narrow models, one worker.
    """
    return load_settings(overrides={
        "MAX_WORKERS": 1,
        "EPOCHS": 2,
        "BATCH_SIZE": 8,
        "SPECTROGRAM_SIZE": TEST_SIZE,
        "MODEL_FILTERS": TEST_FILTERS,
        "LATENT_CHANNELS": TEST_LATENT,
        "FAILED_DELIVERY_LOG": str(tmp_path / "failed_deliveries.jsonl"),
    })


@pytest.fixture(scope="function")
def tiny_config():
    """
    Build a small FusionConfig for any model id.
    """
    def make(model_id: str, **overrides):
        values = dict(filters=TEST_FILTERS, input_size=TEST_SIZE, latent_channels=TEST_LATENT, attention_heads=4)
        values.update(overrides)
        return model_config_for(model_id, **values)
    return make


@pytest.fixture(scope="session")
def small_spec():
    """
    Four dents and eight backgrounds.
    """
    return DatasetSpec(n_damage=4, imbalance=2, seed=11)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, small_spec):
    """
    The small spec written as a dataset directory once per session.
    """
    root = tmp_path_factory.mktemp("dataset")
    manifest = build_manifest(small_spec)
    write_dataset(root, manifest, iter_dataset(small_spec, manifest))
    return root


def _finite_difference_errors(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Mapping[str, torch.Tensor],
    analytic: Mapping[str, torch.Tensor],
    n_elements: int = 5,
    eps: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-5,
) -> Dict[str, List[float]]:
    """
    Relative error between analytic gradients and central differences on
    `n_elements` random entries of every tensor (float64, perturbed in place).
    """
    rng = np.random.default_rng(seed)
    errors: Dict[str, List[float]] = {}
    with torch.no_grad():
        for name, tensor in tensors.items():
            flat = tensor.data.view(-1)
            grad = analytic[name].reshape(-1)
            picks = rng.choice(flat.numel(), size=min(n_elements, flat.numel()), replace=False)
            errors[name] = []
            for i in picks:
                original = flat[i].item()
                flat[i] = original + eps
                up = float(loss_fn())
                flat[i] = original - eps
                down = float(loss_fn())
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                exact = float(grad[i])
                errors[name].append(abs(numeric - exact) / max(abs(numeric), abs(exact), floor))
    return errors


@pytest.fixture(scope="session")
def fd_errors():
    """
    Central finite-difference checker; returns per-tensor relative errors.
    """
    return _finite_difference_errors
