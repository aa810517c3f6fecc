import os
from dotenv import load_dotenv
import pytest
from environment import Environment
from src.cli import ALL_DEFAULTS
from src.dataio import SyntheticSpec, generate_synthetic, write_synthetic
from src.numkit import seeded_stream
from src.trainer import TrainConfig


# Determine which file to load environment variables from
dotenv_path = os.path.join(os.path.dirname(__file__), '..', 'docker.env') if os.getenv('RUN_IN_DOCKER') == 'true' else os.path.join(os.path.dirname(__file__), '..', '.env')
# Load environment variables from the specified file
load_dotenv(dotenv_path=dotenv_path)

TOY_SPEC = SyntheticSpec(n_users=60, n_items=40, latent_dim=4, relevance_rate=0.2, test_fraction=0.2,
                         fn_plant_rate=0.2, seed=3)


# Resolved configuration with defaults, .env overrides and nothing else
@pytest.fixture(scope="module")
def env():
    return Environment(ALL_DEFAULTS)


@pytest.fixture
def rng():
    return seeded_stream(1234, "tests")


# Small synthetic dataset shared by trainer, evaluation and CLI tests
@pytest.fixture(scope="session")
def toy_synthetic():
    return generate_synthetic(TOY_SPEC)


@pytest.fixture(scope="session")
def toy_dataset(toy_synthetic):
    return toy_synthetic.interactions


@pytest.fixture(scope="session")
def toy_data_dir(tmp_path_factory, toy_synthetic):
    directory = tmp_path_factory.mktemp("toy_data")
    write_synthetic(toy_synthetic, str(directory))
    return directory


# Few, small epochs; LightGCN on the toy graph
@pytest.fixture
def toy_config():
    return TrainConfig(lr=5e-3, lr_adv=1e-3, batch_size=64, n_negatives=8, k_weight=4, tau=0.5,
                       e_adv_max=2, t_adv_interval=2, max_epochs=4, patience=20, dim=8, layers=2, seed=11)
