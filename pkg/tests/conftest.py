import numpy as np
import pytest

from graphormer.config import DataConfig, GraphormerConfig, ModelConfig, TrainConfig


def tiny_config(**train_kwargs) -> GraphormerConfig:
    """Small-everything config for fast tests: J=3, V_coarse=6, 16px images."""
    defaults = dict(epochs=2, batch_size=4, lr=1e-3, lr_drop_epoch=1, checkpoint_every=0)
    defaults.update(train_kwargs)
    return GraphormerConfig(
        data=DataConfig(
            limbs=2,
            segments_per_limb=1,
            ring_resolution=3,
            coarse_target=6,
            seed=0,
            train_samples=8,
            test_samples=4,
            angle_range=0.5,
            image_size=16,
        ),
        model=ModelConfig(
            conv_channels=[4, 4, 8, 16],
            grid_channels=8,
            global_dim=16,
            hidden_dims=[8, 8, 4],
            blocks=2,
            heads=2,
            dropout=0.1,
        ),
        train=TrainConfig(**defaults),
    ).validate()


@pytest.fixture()
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_model_session():
    from graphormer.model import GraphormerModel

    return GraphormerModel(tiny_config())


@pytest.fixture(scope="session")
def tiny_data_session(tiny_model_session):
    from graphormer.mesh import generate_dataset

    cfg = tiny_model_session.config
    template = tiny_model_session.template
    train = generate_dataset(template, 8, 0.5, 0, cfg.data.image_size, stream=0)
    test = generate_dataset(template, 4, 0.5, 0, cfg.data.image_size, stream=1)
    return train, test


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
