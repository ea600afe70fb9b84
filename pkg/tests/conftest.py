import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides):
    """A 32x32 tiny-profile config for fast structural tests."""
    import tamperdiff as td

    cfg = td.ExperimentConfig()
    cfg.model.image_size = 32
    cfg.data.size = 32
    cfg.model.encoder_channels = [16, 24, 32, 48]
    cfg.model.fpn_channels = 32
    cfg.model.fusion_width = 32
    cfg.model.decoder_dim = 64
    cfg.model.time_dim = 64
    cfg.model.embed_dim = 8
    for key, value in overrides.items():
        section, name = key.split(".")
        setattr(getattr(cfg, section), name, value)
    return cfg


@pytest.fixture
def tiny_cfg():
    return small_config()


@pytest.fixture
def synth_dataset(tmp_path, rng):
    """A small on-disk synthetic dataset (8 samples, 32x32)."""
    from tamperdiff.data import make_base_images, synth_forgery

    bases = make_base_images(rng, 6, 32)
    return synth_forgery(bases, rng, 8, tmp_path / "data", split="train")
