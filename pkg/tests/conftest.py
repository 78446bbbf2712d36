import pytest

from fskd import synth as S
from fskd.config import RunConfig


def small_config(**kw):
    base = dict(num_species=4, test_species=1, train_images=60, test_images_per_species=10,
                channels=8, descriptor_dim=16, episodes=20, log_every=10, eval_episodes=5)
    base.update(kw)
    return RunConfig().replace(**base)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    from fskd.config import dataset_config

    return S.build_dataset(dataset_config(small_cfg), small_cfg.data_seed)
