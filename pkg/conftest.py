"""
Shared fixtures: micro-scale configs, a tiny generated dataset and a throwaway registry
"""

import numpy as np
import pytest

from schemas import AdamConfig, CfarConfig, ExperimentConfig, SimConfig, TrainingConfig, UNetConfig


@pytest.fixture(scope="session")
def tiny_sim() -> SimConfig:
    return SimConfig(n_range_bins=16, n_radar_az_bins=8, n_lidar_az_bins=32, n_fast_time=64,
                     keep_cfar=CfarConfig(guard_cells=1, train_cells=2))


@pytest.fixture(scope="session")
def tiny_unet() -> UNetConfig:
    return UNetConfig(levels=2, encoder_filters=[4, 8], history=1, n_range=16, n_az_in=8, az_upsample_factor=4)


@pytest.fixture(scope="session")
def tiny_experiment(tiny_sim, tiny_unet) -> ExperimentConfig:
    return ExperimentConfig(
        sim=tiny_sim,
        unet=tiny_unet,
        adam=AdamConfig(lr=1e-2),
        cfar=CfarConfig(guard_cells=1, train_cells=2),
        training=TrainingConfig(epochs=2, batch_size=2, n_triptychs=2),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_sim):
    """2 train, 1 test per kind, a smoke replay, 4 frames each"""
    from harness import make_dataset

    out = tmp_path_factory.mktemp("dataset")
    manifest = make_dataset(out, 2, 1, 1, 1, 4, tiny_sim, seed=7, smoke=True)
    return out, manifest


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_dataset, tiny_experiment):
    from harness import run_training

    data_dir, _ = tiny_dataset
    path = tmp_path_factory.mktemp("ckpt") / "model.rhd"
    run_training(data_dir, tiny_experiment, 1, path)
    return path


@pytest.fixture
def registry(tmp_path):
    """Fresh sqlite registry session"""
    import database

    database.configure_registry(f"sqlite:///{tmp_path / 'runs.db'}")
    database.create_tables()
    db = database.SessionLocal()
    yield db
    db.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
