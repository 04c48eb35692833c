import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


def random_taps(rng, batch=3, channels=4, h=5, w=5, count=4, scale=1.0):
    """Matched lists of teacher/student-style taps as float64 tensors."""
    return [torch.tensor(rng.normal(0, scale, (batch, channels, h, w)), dtype=torch.float64)
            for _ in range(count)]


def rng_for(seed):
    return np.random.default_rng(seed)
