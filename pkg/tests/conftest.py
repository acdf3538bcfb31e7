import numpy as np
import pytest
import torch

from dtegan.data import make_batches, synthesize_toy_dataset
from dtegan.trainer import TrainConfig, Trainer


def finite_difference(fn, tensor, eps=1e-5):
    """Central-difference gradient of a scalar function w.r.t. a tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(resolution=32, ch=8, d_z=16, d_s=32, d_c=16,
                       batch_size=4, n_items=12, epochs=2, seed=3)


@pytest.fixture(scope="session")
def toy_dataset():
    return synthesize_toy_dataset(12, 32, seed=3)


@pytest.fixture()
def tiny_trainer(tiny_config, toy_dataset):
    return Trainer(tiny_config, dataset=toy_dataset)


@pytest.fixture()
def tiny_batch(toy_dataset):
    return make_batches(toy_dataset, 4, seed=1)[0]
