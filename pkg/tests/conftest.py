import numpy as np
import pytest
import torch

from avatarforge.field import ImplicitAvatarField
from avatarforge.rigs import make_capsule_rig

# keep the single-process CPU runs deterministic and lean
torch.set_num_threads(max(1, torch.get_num_threads()))

TINY_FIELD_KWARGS = dict(num_levels=4, base_resolution=4, per_level_scale=1.5,
                         table_size=2 ** 12, feature_dim=2, hidden_dim=32,
                         geo_feat_dim=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def capsule_rig_1joint():
    return make_capsule_rig(num_joints=1)


@pytest.fixture(scope="session")
def capsule_rig_3joint():
    return make_capsule_rig(num_joints=3)


@pytest.fixture
def tiny_field():
    return ImplicitAvatarField(seed=0, **TINY_FIELD_KWARGS)
