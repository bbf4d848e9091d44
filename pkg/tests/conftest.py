import numpy as np
import pytest

from molmix.config import ModelConfig, Precision, TrainConfig, get_settings
from molmix.fusion import MolMix
from molmix.synthetic import gen_synthetic
from molmix.trainer import model_config_for

TINY_MODEL = dict(d_enc=16, d_model=32, smiles_layers=1, smiles_heads=2, gine_layers=2, schnet_blocks=2,
                  rbf_count=8, fusion_layers=2, fusion_heads=4, block_size=4)


@pytest.fixture(autouse=True)
def _fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture(scope="session")
def synthetic_ds():
    return gen_synthetic(count=16, atoms_min=4, atoms_max=8, k_conformers=2, seed=0)


@pytest.fixture
def tiny_model(tiny_cfg, synthetic_ds):
    return MolMix(model_config_for(tiny_cfg, synthetic_ds), Precision.F32, seed=0)


@pytest.fixture
def tiny_model_f64(tiny_cfg, synthetic_ds):
    return MolMix(model_config_for(tiny_cfg, synthetic_ds), Precision.F64, seed=0)


@pytest.fixture
def quick_train_cfg():
    return TrainConfig(lr=1e-3, batch_size=4, token_budget=2048, max_steps=6, eval_every=2)
