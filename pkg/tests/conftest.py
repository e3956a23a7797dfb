from pathlib import Path

import pytest
import torch

from gco.config_manager import ConfigManager
from gco.denoiser_net import DenoiserConfig
from gco.latent_codec import CodecConfig, LatentCodec
from gco.outpaint_stage import FUSED, train_outpainter
from gco.synth_data import generate_sample, sample_seeds

TOY_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy.toml"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long training / acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def codec():
    """Lossless f=4 codec: 64x64 images -> 48x16x16 latents."""
    return LatentCodec(CodecConfig.patch_identity(4))


@pytest.fixture(scope="session")
def records():
    return [generate_sample(s, sample_id=f"t{i:03d}") for i, s in enumerate(sample_seeds(6, 1234))]


@pytest.fixture
def micro_config():
    """Smallest denoiser that still has every block (one level, attention at level 0)."""
    return DenoiserConfig(in_channels=4, out_channels=4, base_width=8, depth=1,
                          attention_levels=(0,), num_heads=2, norm_groups=4)


@pytest.fixture(scope="session")
def outpaint_backbone():
    """Stage-2 backbone on 48-channel latents with a text context."""
    return DenoiserConfig(in_channels=48, out_channels=48, base_width=16, depth=1,
                          attention_levels=(0,), context_dim=16, num_heads=2, norm_groups=4)


@pytest.fixture(scope="session")
def toy():
    """configs/toy.toml: (validated config, 500-sample corpus, codec, schedule)."""
    cfg = ConfigManager(TOY_CONFIG).validate()
    seeds = sample_seeds(cfg.corpus.n, cfg.corpus.seed)
    dataset = [generate_sample(s, sample_id=f"{i:05d}") for i, s in enumerate(seeds)]
    return cfg, dataset, LatentCodec(cfg.codec), cfg.schedule.build()


@pytest.fixture(scope="session")
def toy_outpainter(toy):
    """Fused outpainter trained for the toy step count (only built by slow tests)."""
    cfg, dataset, codec, sched = toy
    return train_outpainter(dataset, cfg.outpaint_model, sched, cfg.outpaint_training, codec, cfg.options,
                            FUSED, cfg.text_encoder, cfg.adapter)
