import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stflow.data import SynthSpec, synth_generate  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small noisy dataset shared by trainer/cli tests: 8x8 grid, 12 days."""
    out = tmp_path_factory.mktemp("data") / "tiny"
    ds, ext = synth_generate(SynthSpec(grid=(8, 8), days=12, noise=0.1),
                             seed=7, out_dir=str(out))
    return {"dir": str(out), "ds": ds, "ext": ext}


@pytest.fixture(scope="session")
def periodic_dataset(tmp_path_factory):
    """Noise-free dataset: exactly weekly-periodic by construction."""
    out = tmp_path_factory.mktemp("data") / "periodic"
    ds, ext = synth_generate(SynthSpec(grid=(8, 4), days=21, noise=0.0),
                             seed=3, out_dir=str(out))
    return {"dir": str(out), "ds": ds, "ext": ext}


def rand(shape, seed, scale=1.0, dtype=np.float64):
    return (np.random.default_rng(seed).standard_normal(shape) * scale) \
        .astype(dtype)
