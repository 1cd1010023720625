import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from avatarfield.body import build_body_prior, default_body_config, single_capsule_config  # noqa: E402

TINY_MODEL = {"triplane_res": 16, "triplane_channels": 4, "hidden": 16, "feature_dim": 8, "skin_hidden": 16,
              "pe_freqs": 4, "dir_freqs": 2}


@pytest.fixture(scope="session")
def prior():
    return build_body_prior(default_body_config())


@pytest.fixture(scope="session")
def capsule_prior():
    return build_body_prior(single_capsule_config())


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, prior):
    from avatarfield.io import load_dataset
    from avatarfield.synth import synth_dataset

    root = tmp_path_factory.mktemp("ds")
    synth_dataset(root, {"n_frames": 2, "n_views": 2, "n_unseen": 1, "width": 32, "height": 32}, prior=prior)
    return load_dataset(root)


@pytest.fixture
def tiny_train_cfg():
    return {
        "train": {"iters": 4, "patches": 1, "patch_size": 16, "skin_warmup": 3, "eikonal_points": 32,
                  "save_every": 2},
        "sampling": {"n_samples": 12},
        "model": dict(TINY_MODEL),
    }


@pytest.fixture(autouse=True)
def _seed():
    np.random.seed(0)
    torch.manual_seed(0)
