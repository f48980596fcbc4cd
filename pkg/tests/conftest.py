# -*- coding: utf-8 -*-
import os

import numpy as np
import pytest
import torch

from pose_fewshot.config import SyntheticConfig, TrainConfig
from pose_fewshot.datamodel import ImageSample, Keypoint
from pose_fewshot.synthetic import gen_synthetic


#: classes 0..7 split into base {0, 2, 4, 6}, validation {1, 5}, novel {3, 7}
TINY_SYNTHETIC = {
    'num_classes': 8,
    'images_per_class': 6,
    'num_parts': 3,
    'image_size': 84,
    'part_radius': 6,
    'clutter': 0.3,
}


def small_train_config(**overrides):
    """
    A TrainConfig that trains in seconds on the tiny synthetic bundle
    """
    data = {
        'algorithm': 'proto',
        'aggregator': 'pose',
        'num_parts': 3,
        'alpha': 10.0,
        'upn_vectors': 3,
        'optimizer': {'lr': 0.01},
        'schedule': {'epochs': 1, 'stages': 1},
        'episode': {'n_way': 2, 'k_shot': 2, 'q_query': 2},
        'batch_size': 8,
        'eval_every': 1,
        'finetune': {'epochs': 2, 'trial_epochs': 1, 'batch_size': 4},
        'dynamic': {
            'epochs': 1, 'fake_novel': 2, 'fake_base': 1,
            'images_per_class': 4, 'shots': 2, 'steps_per_epoch': 1,
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = dict(data[key], **value)
        else:
            data[key] = value
    return TrainConfig.from_dict(data)


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_synthetic():
    return SyntheticConfig.from_dict(TINY_SYNTHETIC)


@pytest.fixture(scope='session')
def tiny_bundle():
    return gen_synthetic(SyntheticConfig.from_dict(TINY_SYNTHETIC))


@pytest.fixture
def train_config():
    return small_train_config()


@pytest.fixture
def make_train_config():
    return small_train_config


@pytest.fixture
def blank_sample():
    """
    A 40x40 gray image with two parts (one hidden) and a box
    """
    return ImageSample(
        image=np.full((40, 40, 3), 0.5, np.float32),
        class_id=3, index=0,
        keypoints=(Keypoint(20.0, 20.0, True), Keypoint(0.0, 0.0, False)),
        bbox=(10.0, 10.0, 30.0, 30.0),
    )


@pytest.fixture
def out_dir(tmpdir):
    return str(tmpdir.mkdir('out'))


def pytest_collection_modifyitems(config, items):
    if os.environ.get('POSE_FEWSHOT_BENCHMARK') == '1':
        return
    skip = pytest.mark.skip(reason='set POSE_FEWSHOT_BENCHMARK=1 to run')
    for item in items:
        if 'benchmark' in item.keywords:
            item.add_marker(skip)
