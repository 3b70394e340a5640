import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kindiff.latent import SegmentationSpec, desk_segmentation, make_world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return SegmentationSpec(group_dims=(2, 3, 2))


@pytest.fixture
def desk_world():
    return make_world(desk_segmentation(), seed=7)
