"""
Shared pytest fixtures for the backdoor lab test suite.
"""
import sys
import os
import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from engines.autodiff_engine import reset_tape
from engines.data_engine import DataGenSpec, generate_synthetic_dataset
from engines.pipeline_engine import ExperimentConfig
from engines.victim_engine import TrainHyper, train_classifier


@pytest.fixture(autouse=True)
def fresh_tape():
    """Every test starts and ends with an empty tape."""
    reset_tape()
    yield
    reset_tape()


# =============================================================================
# Data Fixtures
# =============================================================================

@pytest.fixture
def tiny_spec():
    """4 classes of 1x8x8 images, small enough for exhaustive checks."""
    return DataGenSpec(
        num_classes=4,
        channels=1,
        height=8,
        width=8,
        train_per_class=20,
        test_per_class=10,
        sample_per_class=6,
        noise_std=0.05,
        seed=7,
    )


@pytest.fixture
def tiny_bundle(tiny_spec):
    """Generated train/test/sample splits for tiny_spec."""
    return generate_synthetic_dataset(tiny_spec)


@pytest.fixture
def rgb_bundle():
    """8 classes of 3x8x8 images."""
    return generate_synthetic_dataset(DataGenSpec(
        num_classes=8,
        channels=3,
        height=8,
        width=8,
        train_per_class=30,
        test_per_class=15,
        sample_per_class=8,
        seed=3,
    ))


@pytest.fixture
def tiny_hyper():
    """Short MLP training budget."""
    return TrainHyper(arch="mlp", hidden=32, feature_dim=16, epochs=12, batch_size=16, lr=0.05)


@pytest.fixture
def tiny_surrogate(tiny_bundle, tiny_hyper):
    """MLP trained on tiny_bundle.train."""
    return train_classifier(tiny_bundle.train, tiny_hyper, seed=11)


@pytest.fixture
def checkerboard():
    """Binary 1x8x8 checkerboard image."""
    rows, cols = np.indices((8, 8))
    return ((rows + cols) % 2).astype(np.float32)[None]


# =============================================================================
# Pipeline Fixtures
# =============================================================================

@pytest.fixture
def small_config():
    """End-to-end configuration with every budget cut down."""
    return ExperimentConfig(
        seed=1,
        num_classes=4,
        channels=1,
        height=8,
        width=8,
        train_per_class=20,
        test_per_class=10,
        sample_per_class=6,
        hidden=32,
        feature_dim=16,
        epochs=8,
        batch_size=16,
        latent_dim=3,
        graph_t=2.0,
        trigger_epochs=3,
        trigger_batch=8,
        targets_per_step=2,
        gcn_hidden=8,
        psnr_threshold=25.0,
        poison_per_class=2,
        fine_tune_epochs=1,
        strip_blends=4,
        strip_inputs=8,
        mc_trials=10_000,
        bound_ratios=(1.0, 3.0),
        bound_classes=(2, 11),
    )
