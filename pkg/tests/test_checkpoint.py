# -*- coding: utf-8 -*-
import os

import pytest
import torch

from pose_fewshot.backbone import build_backbone
from pose_fewshot.checkpoint import (
    VERSION, load_checkpoint, load_model, save_checkpoint,
)
from pose_fewshot.exceptions import CheckpointError
from pose_fewshot.learners import seed_everything, train
from pose_fewshot.model import build_model
from pose_fewshot.signals import checkpoint_saved


@pytest.fixture
def trained(tiny_bundle, train_config):
    seed_everything(0)
    model = build_model(train_config, sorted(tiny_bundle.split.base))
    return train(model, tiny_bundle, train_config, validate_on=False)


def assert_same_state(first, second):
    a, b = first.state_dict(), second.state_dict()
    assert set(a) == set(b)
    for key in a:
        assert torch.equal(a[key], b[key]), key


class TestRoundTrip(object):

    def test_frozen_model(self, trained, out_dir):
        path = save_checkpoint(os.path.join(out_dir, 'checkpoint.pt'),
                               trained, epoch=1)
        assert not os.path.exists(path + '.partial')
        loaded = load_model(path)
        assert loaded.pose_frozen
        assert loaded.pose_fingerprint() == trained.pose_fingerprint()
        assert loaded.config == trained.config
        assert_same_state(trained, loaded)

    def test_transfer_classifier(self, tiny_bundle, make_train_config,
                                 out_dir):
        config = make_train_config(algorithm='transfer')
        model = build_model(config, sorted(tiny_bundle.split.base))
        path = save_checkpoint(os.path.join(out_dir, 'c.pt'), model)
        loaded = load_model(path)
        assert loaded.class_ids == model.class_ids
        assert not loaded.pose_frozen
        assert_same_state(model, loaded)

    def test_pose_head_survives_more_training(self, trained, tiny_bundle,
                                              train_config, out_dir):
        first = save_checkpoint(os.path.join(out_dir, 'a.pt'), trained)
        train(trained, tiny_bundle, train_config, validate_on=False)
        second = save_checkpoint(os.path.join(out_dir, 'b.pt'), trained)
        before = load_checkpoint(first)
        after = load_checkpoint(second)
        assert before['pose_fingerprint'] == after['pose_fingerprint']
        for key, value in before['state'].items():
            if key.startswith('pose_head.'):
                assert torch.equal(value, after['state'][key]), key

    def test_signal(self, trained, out_dir):
        saved = []
        with checkpoint_saved.connected_to(
            lambda sender, path, epoch: saved.append((sender, epoch))
        ):
            save_checkpoint(os.path.join(out_dir, 'c.pt'), trained, epoch=3)
        assert saved == [(trained, 3)]

    def test_provenance(self, trained, out_dir):
        path = save_checkpoint(os.path.join(out_dir, 'c.pt'), trained)
        provenance = load_checkpoint(path)['provenance']
        assert provenance['config_hash'] == trained.config.fingerprint()
        assert provenance['seed'] == trained.config.seed


class TestErrors(object):

    def test_missing(self, out_dir):
        with pytest.raises(CheckpointError) as excinfo:
            load_model(os.path.join(out_dir, 'nope.pt'))
        assert excinfo.value.code == 'checkpoint.missing'

    def test_unreadable(self, out_dir):
        path = os.path.join(out_dir, 'junk.pt')
        with open(path, 'wb') as handle:
            handle.write(b'not a checkpoint')
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.code == 'checkpoint.unreadable'

    def test_foreign_file(self, out_dir):
        path = os.path.join(out_dir, 'weights.pt')
        torch.save({'weight': torch.zeros(2)}, path)
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.code == 'checkpoint.format'

    def test_version(self, trained, out_dir):
        path = save_checkpoint(os.path.join(out_dir, 'c.pt'), trained)
        payload = torch.load(path, weights_only=True)
        payload['version'] = VERSION + 1
        torch.save(payload, path)
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.code == 'checkpoint.version'

    def test_state_mismatch(self, trained, out_dir):
        path = save_checkpoint(os.path.join(out_dir, 'c.pt'), trained)
        payload = torch.load(path, weights_only=True)
        payload['config']['aggregator'] = 'avg'
        torch.save(payload, path)
        with pytest.raises(CheckpointError) as excinfo:
            load_model(path)
        assert excinfo.value.code == 'checkpoint.state'

    def test_tampered_pose_head(self, trained, out_dir):
        path = save_checkpoint(os.path.join(out_dir, 'c.pt'), trained)
        payload = torch.load(path, weights_only=True)
        payload['pose_fingerprint'] = 'f' * 64
        torch.save(payload, path)
        with pytest.raises(CheckpointError) as excinfo:
            load_model(path)
        assert excinfo.value.code == 'checkpoint.fingerprint'


def test_backbone_init_from(trained, make_train_config, out_dir):
    path = save_checkpoint(os.path.join(out_dir, 'c.pt'), trained)
    config = make_train_config(backbone={'init_from': path})
    model = build_model(config)
    expected = trained.backbone.state_dict()
    for key, value in model.backbone.state_dict().items():
        assert torch.equal(value, expected[key]), key
    assert isinstance(build_backbone(config.backbone), type(model.backbone))
