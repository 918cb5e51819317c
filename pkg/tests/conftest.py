import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_prediction(shape, seed=0, dtype=torch.float64, sharpness=2.0):
    """Well-conditioned random softmax probabilities (N,C,H,W) or (C,H,W)."""
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(0, sharpness, size=shape)).to(dtype)
    dim = 0 if len(shape) == 3 else 1
    return torch.softmax(logits, dim=dim)


def random_label(shape, num_classes, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.integers(0, num_classes, size=shape)).long()
