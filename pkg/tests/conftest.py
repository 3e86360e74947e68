import pytest
import torch

from cyclevqg.model import ModelConfig
from cyclevqg.training import init_params


def small_config(**overrides):
    """Tiny dimensions so unit tests stay fast; acceptance uses defaults."""
    base = dict(
        vocab_size=24, n_categories=3, latent_dim=8, image_embed=12,
        category_embed=6, fusion_hidden=16, token_embed=10, decoder_hidden=16,
        classifier_embed=10, classifier_hidden=16, max_len=12,
        image_size=16, image_channels=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return init_params(small_config(), seed=0)


@pytest.fixture
def images():
    gen = torch.Generator().manual_seed(11)
    return torch.rand(4, 3, 16, 16, generator=gen, dtype=torch.float64)
