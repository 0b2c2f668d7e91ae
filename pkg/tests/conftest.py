"""Shared fixtures: toy architectures, tiny models and synthetic scenes."""

import pytest
import torch

from depthdial.config import HeadKind, toy_arch
from depthdial.data import DatasetSpec, generate_dataset
from depthdial.model import build_detector


@pytest.fixture
def detr_arch():
    return toy_arch(HeadKind.SET_PREDICTION, width=16)


@pytest.fixture
def dense_arch():
    return toy_arch(HeadKind.DENSE, width=16)


@pytest.fixture(params=[HeadKind.SET_PREDICTION, HeadKind.DENSE], ids=["detr", "dense"])
def arch(request):
    return toy_arch(request.param, width=16)


@pytest.fixture
def model(arch):
    return build_detector(arch, seed=0)


@pytest.fixture
def images():
    return torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))


@pytest.fixture
def small_spec():
    return DatasetSpec(hw=(64, 64), clutter=0.5, supersample=2)


@pytest.fixture
def scenes(small_spec):
    return generate_dataset(seed=7, n_images=6, spec=small_spec)
