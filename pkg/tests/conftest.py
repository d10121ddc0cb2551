import numpy as np
import pytest

from multidepth.core import DepthMap, ImageTensor, Rng
from multidepth.rnet import RNetConfig, init_weights


def randomized_net(cfg: RNetConfig, seed: int, scale: float = 0.05):
    """Small net with every parameter (biases included) moved off zero, so no
    ReLU pre-activation sits exactly on its kink during gradient checks."""
    base = init_weights(cfg, Rng(seed), dtype=np.float64)
    rng = Rng(seed, 1)
    return {name: arr + rng.child(i).normal(0, scale, size=arr.shape)
            for i, (name, arr) in enumerate(base.items())}


def random_rgbd(seed: int, h: int, w: int, holes: float = 0.0):
    rng = Rng(seed)
    rgb = ImageTensor(rng.uniform(0, 1, (3, h, w)).astype(np.float32))
    depth = rng.uniform(1.0, 3.0, (h, w)).astype(np.float32)
    if holes > 0:
        valid = rng.uniform(size=(h, w)) > holes
        valid[0, 0] = True
        dm = DepthMap(np.where(valid, depth, 0), valid)
    else:
        dm = DepthMap.full(depth)
    return rgb, dm


@pytest.fixture
def identity_refine():
    return lambda rgb, depth: DepthMap(depth.depth.copy(), depth.valid.copy())
