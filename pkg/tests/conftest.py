import numpy as np
import pytest

from se3fm.backbone import atoms_to_frames
from se3fm.data import toy_generate
from se3fm.geometry import random_rotations


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_axis_angles(rng, n, max_norm=np.pi - 1e-6):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0.0, max_norm, size=n)[:, None]


def toy_chain(kind="helix", length=16, seed=0):
    atoms, seq = toy_generate(kind, length, seed=seed)
    return atoms_to_frames(atoms), seq


@pytest.fixture
def haar_rotations(rng):
    return random_rotations(64, rng)
