# -*- coding: utf-8 -*-
"""
Test the pose head, the part-location loss and PCK
"""
import math
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.autograd import gradcheck

from pose_fewshot.backbone import build_backbone, count_parameters
from pose_fewshot.config import BackboneConfig
from pose_fewshot.datamodel import PREDICTED, Keypoint, PartHeatmap
from pose_fewshot.exceptions import (
    EvaluationError, FrozenParameterError, ShapeError,
)
from pose_fewshot.model import build_model
from pose_fewshot.posehead import (
    DEFAULT_THRESHOLDS, PoseHead, dataset_pck, default_hidden_channels,
    dump_heatmaps, normalized_errors, pck, pck_curve, pose_loss,
    predict_pose, read_pck_table, write_pck_table,
)


@pytest.fixture
def convnet_head():
    return PoseHead(64, default_hidden_channels(64), 5, (10, 10))


class TestPoseHead(object):

    def test_convnet_profile(self, convnet_head):
        out = convnet_head(torch.randn(2, 64, 21, 21))
        assert out.shape == (2, 5, 10, 10)
        assert bool(((out > 0) & (out < 1)).all())
        assert convnet_head.hidden_channels == 30

    def test_resnet_profile(self):
        head = PoseHead(256, default_hidden_channels(256), 15, (14, 14))
        assert head.hidden_channels == 64
        assert head(torch.randn(1, 256, 14, 14)).shape == (1, 15, 14, 14)

    def test_zero_final_weights(self, convnet_head):
        with torch.no_grad():
            convnet_head.conv2.weight.zero_()
            convnet_head.conv2.bias.zero_()
        out = convnet_head(torch.randn(1, 64, 21, 21))
        assert bool((out == 0.5).all())

    def test_channel_mismatch(self, convnet_head):
        with pytest.raises(ShapeError) as excinfo:
            convnet_head(torch.randn(1, 32, 21, 21))
        assert excinfo.value.code == 'shape.pose_channels'

    def test_predict_pose(self, convnet_head):
        convnet_head.train()
        intermediate = torch.randn(64, 21, 21)
        first = predict_pose(intermediate, convnet_head)
        second = predict_pose(intermediate, convnet_head)
        assert isinstance(first, PartHeatmap)
        assert first.kind == PREDICTED
        assert first.shape == (5, 10, 10)
        assert np.array_equal(first.values, second.values)
        assert convnet_head.training

    @pytest.mark.parametrize("arch,limit", [
        ('convnet4', 0.2), ('resnet18mod', 0.02),
    ])
    def test_parameter_share(self, arch, limit):
        backbone = build_backbone(BackboneConfig(arch=arch))
        head = PoseHead(
            backbone.tap_channels,
            default_hidden_channels(backbone.tap_channels), 15,
            backbone.output_size,
        )
        assert count_parameters(head) < limit * count_parameters(backbone)


class TestFreeze(object):

    def test_frozen_head_stays_in_eval_mode(self, convnet_head):
        convnet_head.freeze()
        convnet_head.train()
        assert not convnet_head.training
        assert not any(p.requires_grad for p in convnet_head.parameters())

    def test_update_after_freeze_raises(self, convnet_head):
        convnet_head.freeze()
        for parameter in convnet_head.parameters():
            parameter.requires_grad_(True)
        loss = convnet_head(torch.randn(1, 64, 21, 21)).sum()
        with pytest.raises(FrozenParameterError) as excinfo:
            loss.backward()
        assert excinfo.value.code == 'train.frozen_pose_head'

    def test_freeze_is_idempotent(self, convnet_head):
        convnet_head.freeze()
        convnet_head.freeze()
        assert convnet_head.frozen


def scalar_loss(pred, target):
    total = 0.0
    for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
        total += t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
    return -total / pred.size


class TestPoseLoss(object):

    def test_half_is_log_two(self):
        pred = torch.full((3, 4, 4), 0.5, dtype=torch.float64)
        target = torch.zeros(3, 4, 4, dtype=torch.float64)
        target[0, 1, 2] = 1.0
        assert abs(float(pose_loss(pred, target)) - math.log(2)) < 1e-12

    def test_matches_scalar_loop(self):
        rng = np.random.RandomState(0)
        for _ in range(50):
            pred = rng.uniform(0.01, 0.99, size=(2, 3, 4))
            target = (rng.rand(2, 3, 4) < 0.2).astype(np.float64)
            value = float(pose_loss(torch.from_numpy(pred),
                                    torch.from_numpy(target)))
            assert abs(value - scalar_loss(pred, target)) < 1e-10

    def test_binary_entropy_surrogate(self):
        target = np.array([[[0.01, 0.99], [0.99, 0.01]]])
        expected = -(0.01 * math.log(0.01) + 0.99 * math.log(0.99))
        value = float(pose_loss(target.copy(), target))
        assert abs(value - expected) < 1e-12

    def test_part_heatmaps(self):
        pred = PartHeatmap(np.full((2, 3, 3), 0.5), PREDICTED)
        target = PartHeatmap(np.zeros((2, 3, 3)), 'ground_truth')
        assert abs(float(pose_loss(pred, target)) - math.log(2)) < 1e-12

    def test_exact_zero_and_one_are_clamped(self):
        pred = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
        target = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        value = float(pose_loss(pred, target))
        assert math.isfinite(value)
        assert abs(value + math.log(1e-7)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError) as excinfo:
            pose_loss(torch.rand(2, 3, 3), torch.rand(3, 3, 3))
        assert excinfo.value.code == 'shape.heatmap'

    def test_gradient(self):
        pred = torch.empty(3, 4, 4, dtype=torch.float64).uniform_(0.05, 0.95)
        pred.requires_grad_(True)
        target = (torch.rand(3, 4, 4) < 0.3).double()
        assert gradcheck(lambda p: pose_loss(p, target), (pred,),
                         eps=1e-6, atol=1e-8, rtol=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(st.permutations(list(range(4))), st.integers(0, 1000))
    def test_channel_permutation(self, order, seed):
        generator = torch.Generator().manual_seed(seed)
        pred = torch.rand(4, 3, 3, generator=generator, dtype=torch.float64)
        target = (torch.rand(4, 3, 3, generator=generator) < 0.3).double()
        before = float(pose_loss(pred, target))
        after = float(pose_loss(pred[order], target[order]))
        assert abs(before - after) < 1e-12

    def test_non_negative_and_small_near_target(self):
        target = (torch.rand(3, 5, 5) < 0.2).double()
        assert float(pose_loss(torch.rand(3, 5, 5).double(), target)) >= 0
        close = target.clamp(1e-6, 1 - 1e-6)
        assert float(pose_loss(close, target)) < 1e-5


def one_hot(grid, cells):
    values = np.zeros((len(cells),) + grid)
    for part, (row, col) in enumerate(cells):
        values[part, row, col] = 1.0
    return values


class TestPCK(object):

    def test_exact_prediction(self):
        # cell (5, 5) of a 10x10 grid over a 100px image is centred at 55
        heatmap = one_hot((10, 10), [(5, 5), (0, 9)])
        keypoints = [Keypoint(55.0, 55.0, True), Keypoint(95.0, 5.0, True)]
        for threshold in (0.01, 0.1, 0.5):
            assert pck(heatmap, keypoints, (0, 0, 60, 80), threshold,
                       (100, 100)) == 1.0

    def test_offset_of_fifteen_hundredths(self):
        heatmap = one_hot((10, 10), [(5, 5)])
        # bbox diagonal is exactly 100, the keypoint is 15px away
        keypoints = [Keypoint(55.0, 40.0, True)]
        bbox = (0.0, 0.0, 60.0, 80.0)
        assert normalized_errors(heatmap, keypoints, bbox, (100, 100)) == \
            pytest.approx([0.15])
        assert pck(heatmap, keypoints, bbox, 0.1, (100, 100)) == 0.0
        assert pck(heatmap, keypoints, bbox, 0.2, (100, 100)) == 1.0

    def test_invisible_parts_are_ignored(self):
        heatmap = one_hot((10, 10), [(5, 5), (0, 0)])
        keypoints = [Keypoint(55.0, 55.0, True), Keypoint(90.0, 90.0, False)]
        assert pck(heatmap, keypoints, (0, 0, 100, 100), 0.05,
                   (100, 100)) == 1.0

    def test_ties_go_to_the_first_cell(self):
        heatmap = np.full((1, 4, 4), 0.5)
        errors = normalized_errors(
            heatmap, [Keypoint(5.0, 5.0, True)], (0, 0, 40, 30), (40, 40)
        )
        assert errors == [0.0]

    def test_no_visible_parts(self):
        with pytest.raises(EvaluationError) as excinfo:
            pck(one_hot((4, 4), [(0, 0)]), [Keypoint(0, 0, False)],
                (0, 0, 4, 4), 0.1, (4, 4))
        assert excinfo.value.code == 'eval.no_visible_parts'

    def test_no_bbox(self):
        with pytest.raises(EvaluationError) as excinfo:
            pck(one_hot((4, 4), [(0, 0)]), [Keypoint(1, 1, True)], None,
                0.1, (4, 4))
        assert excinfo.value.code == 'eval.no_bbox'

    def test_channel_count(self):
        with pytest.raises(ShapeError):
            pck(one_hot((4, 4), [(0, 0)]),
                [Keypoint(1, 1, True), Keypoint(2, 2, True)],
                (0, 0, 4, 4), 0.1, (4, 4))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10000), st.integers(1, 4))
    def test_curve_is_monotone(self, seed, parts):
        rng = np.random.RandomState(seed)
        heatmap = rng.rand(parts, 6, 6)
        keypoints = [Keypoint(float(x), float(y), True)
                     for x, y in rng.uniform(0, 60, size=(parts, 2))]
        curve = pck_curve(heatmap, keypoints, (10, 10, 50, 40), (60, 60))
        values = [v for _, v in curve]
        assert values == sorted(values)
        assert [t for t, _ in curve] == list(DEFAULT_THRESHOLDS)

    def test_table_round_trip(self, tmpdir):
        curve = [(0.05, 1.0 / 3.0), (0.1, 0.7)]
        path = str(tmpdir.join('pck.csv'))
        write_pck_table(curve, path)
        assert list(read_pck_table(path).items()) == curve
        with open(path) as handle:
            assert handle.readline().strip() == 'threshold,accuracy'


class TestDatasetPCK(object):

    def test_untrained_model(self, tiny_bundle, train_config):
        model = build_model(train_config, sorted(tiny_bundle.split.base))
        curve = dataset_pck(model, tiny_bundle.query[:6], batch_size=4)
        assert list(curve) == list(DEFAULT_THRESHOLDS)
        values = list(curve.values())
        assert values == sorted(values)
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_needs_scorable_samples(self, tiny_bundle, train_config):
        model = build_model(train_config, sorted(tiny_bundle.split.base))
        sample = tiny_bundle.query[0]
        bare = type(sample)(image=sample.image, class_id=sample.class_id,
                            index=sample.index)
        with pytest.raises(EvaluationError):
            dataset_pck(model, [bare])

    def test_dump_heatmaps(self, tiny_bundle, train_config, tmpdir):
        model = build_model(train_config, sorted(tiny_bundle.split.base))
        target = str(tmpdir.join('heatmaps'))
        paths = dump_heatmaps(model, tiny_bundle.query, target, limit=2)
        assert len(paths) == 2
        assert all(os.path.exists(p) for p in paths)
        sample = tiny_bundle.query[0]
        assert os.path.basename(paths[0]) == 'class%03d-image%06d.png' % (
            sample.class_id, sample.index
        )
