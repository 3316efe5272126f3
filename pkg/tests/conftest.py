"""
Shared fixtures: deterministic torch, tiny configs and small datasets
"""
from typing import List

import numpy as np
import pytest

from data_ingest import Sample, load_samples, synth_benchmark
from utils.rng import configure_torch
from utils.validators import ClassifierConfig, GanConfig, SynthConfig


@pytest.fixture(autouse=True, scope="session")
def deterministic_torch():
    configure_torch(1)


def make_samples(labels: List[int], size: int = 8, channels: int = 1, seed: int = 0,
                 split: str = "train", prefix: str = "s") -> List[Sample]:
    """Random [-1, 1] images with the given labels"""
    rng = np.random.default_rng(seed)
    return [
        Sample(id=f"{prefix}{i:03d}",
               image=rng.uniform(-1.0, 1.0, size=(size, size, channels)).astype(np.float32),
               label=label, split=split)
        for i, label in enumerate(labels)
    ]


@pytest.fixture
def sample_factory():
    return make_samples


@pytest.fixture
def tiny_synth_config():
    """16x16 benchmark, 6:2 train and 3:2 validation"""
    return SynthConfig(
        counts={"train": {0: 6, 1: 2}, "validation": {0: 3, 1: 2}},
        image_size=16, blob_sigma=1.5, blob_margin=3,
    )


@pytest.fixture
def tiny_gan_config():
    return GanConfig(
        resolution=16, channels=1, residual_blocks=1, generator_filters=4,
        discriminator_filters=4, discriminator_layers=2, epochs=2, batch_size=2,
        replay_capacity=3, checkpoint_every=1, probe_size=2,
    )


@pytest.fixture
def tiny_classifier_config():
    return ClassifierConfig(
        resolution=16, channels=1, growth_rate=4, block_config=(2, 2), num_init_features=8,
        bn_size=2, stem="compact", epochs=2, batch_size=4, eval_batch_size=8, lr=1e-3,
    )


@pytest.fixture
def tiny_benchmark(tmp_path, tiny_synth_config):
    """(manifest, directory) of a freshly written tiny blob benchmark"""
    out_dir = tmp_path / "bench"
    return synth_benchmark(tiny_synth_config, seed=3, out_dir=out_dir), out_dir


@pytest.fixture
def tiny_samples(tiny_benchmark):
    manifest, _ = tiny_benchmark
    return load_samples(manifest, resolution=16, channels=1, workers=1)
