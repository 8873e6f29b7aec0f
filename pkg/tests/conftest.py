import pathlib

import numpy as np
import pytest

from mfmnet.data import write_pgm
from mfmnet.tensor import make_rng


def pytest_configure(config):
    import sys

    sys._called_from_test = True


@pytest.fixture
def user_path(tmpdir):
    dir = tmpdir / "mfmnet"
    dir.mkdir()
    return dir


@pytest.fixture(autouse=True)
def env_setup(monkeypatch, user_path):
    monkeypatch.setenv("MFMNET_USER_PATH", str(user_path))


def face_pattern(identity: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """
    A synthetic grayscale "face": noisy mid-grey background crossed by one
    horizontal bar. The identity (0-9) picks one of five bar rows and a bright
    or dark bar. Bars survive horizontal mirroring, and neighbouring rows stay
    apart under crop offsets of up to ``size // 8`` pixels.
    """
    if not 0 <= identity < 10:
        raise ValueError(f"face_pattern supports identities 0-9, got {identity}")
    image = 128.0 + 10.0 * rng.standard_normal((size, size))
    band = max(2, size // 10)
    margin = size // 8
    row, dark = divmod(identity, 2)
    top = margin + round((size - 2 * margin - band) * row / 4)
    image[top : top + band, :] = 25.0 if dark else 230.0
    return np.clip(image, 0, 255)


def make_dataset(
    root: pathlib.Path, identities: int, per_identity: int, size: int, seed: int = 0
) -> pathlib.Path:
    rng = make_rng(seed)
    for identity in range(identities):
        for i in range(per_identity):
            write_pgm(root / f"id{identity:02d}" / f"img{i:02d}.pgm", face_pattern(identity, size, rng))
    return root


@pytest.fixture
def tiny_dataset(tmp_path):
    "Four identities with four 16x16 images each, sized for the tiny config"
    return make_dataset(tmp_path / "tiny", identities=4, per_identity=4, size=16)


@pytest.fixture
def toy_dataset(tmp_path):
    "Three identities with three 36x36 images each, sized for the toy config"
    return make_dataset(tmp_path / "toy", identities=3, per_identity=3, size=36)


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture(scope="session")
def ten_identity_dataset(tmp_path_factory):
    "Ten identities with fifty 36x36 images each, sized for the toy config"
    return make_dataset(tmp_path_factory.mktemp("ten"), identities=10, per_identity=50, size=36)
