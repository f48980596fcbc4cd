# -*- coding: utf-8 -*-
"""
Pose estimator, part-location loss and keypoint accuracy (PCK)
"""
import logging
import math
import os
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from more_itertools import chunked
from PIL import Image
from torch import nn

from .datamodel import PREDICTED, PartHeatmap, cell_center, to_tensor
from .exceptions import EvaluationError, FrozenParameterError, ShapeError


pose_logger = logging.getLogger('pose_fewshot.pose')

#: predictions are clamped to [CLAMP, 1 - CLAMP] before taking logs
CLAMP = 1e-7

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 11))


def default_hidden_channels(tap_channels):
    "64 -> 30 for ConvNet4 taps, 256 -> 64 for ResNet taps"
    return 30 if tap_channels <= 64 else 64


def _refuse_update(grad):
    raise FrozenParameterError(
        "pose head parameters are frozen after base training",
        'train.frozen_pose_head',
    )


class PoseHead(nn.Module):
    """
    Conv-BN-ReLU-Conv followed by a sigmoid. When the tap resolution
    differs from the final feature map, the hidden activation is
    bilinearly resized to `output_size` before the second convolution.
    """

    def __init__(self, in_channels, hidden_channels, num_parts, output_size):
        super(PoseHead, self).__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.num_parts = num_parts
        self.output_size = tuple(output_size)
        self.frozen = False

        self.conv1 = nn.Conv2d(in_channels, hidden_channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(hidden_channels)
        self.conv2 = nn.Conv2d(hidden_channels, num_parts, 3, padding=1)

    def forward(self, intermediate):
        if intermediate.dim() != 4 or intermediate.shape[1] != self.in_channels:
            raise ShapeError(
                "pose head expects %d input channels, got shape %s" % (
                    self.in_channels, tuple(intermediate.shape)
                ),
                'shape.pose_channels',
                expected=self.in_channels,
                actual=tuple(intermediate.shape[1:]),
            )
        x = F.relu(self.bn(self.conv1(intermediate)))
        if tuple(x.shape[-2:]) != self.output_size:
            x = F.interpolate(
                x, size=self.output_size, mode='bilinear', align_corners=False
            )
        return torch.sigmoid(self.conv2(x))

    def train(self, mode=True):
        # a frozen head stays in inference mode for good
        return super(PoseHead, self).train(mode and not self.frozen)

    def freeze(self):
        if self.frozen:
            return
        self.frozen = True
        self.eval()
        for parameter in self.parameters():
            parameter.grad = None
            # hooks can only be registered while gradients are enabled
            parameter.register_hook(_refuse_update)
            parameter.requires_grad_(False)


def predict_pose(intermediate, head):
    """
    Predicted :class:`PartHeatmap` for one ``C' x H' x W'`` map.
    Runs in inference mode and leaves the head's mode untouched.
    """
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            values = head(intermediate.unsqueeze(0))[0]
    finally:
        head.train(was_training)
    return PartHeatmap(values.double().numpy(), PREDICTED)


def _as_tensor(heatmap):
    if isinstance(heatmap, PartHeatmap):
        return torch.from_numpy(heatmap.values)
    if isinstance(heatmap, np.ndarray):
        return torch.from_numpy(heatmap)
    return heatmap


def pose_loss(pred, target):
    """
    Mean pixel-wise log loss between predicted and target heatmaps.

    Accepts tensors (any matching shape, typically ``N x M x H x W``) or
    :class:`PartHeatmap` values.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(
            "prediction %s and target %s heatmaps differ in shape" % (
                tuple(pred.shape), tuple(target.shape)
            ),
            'shape.heatmap',
            expected=tuple(target.shape), actual=tuple(pred.shape),
        )
    target = target.to(pred.dtype)
    pred = pred.clamp(CLAMP, 1.0 - CLAMP)
    return -(
        target * torch.log(pred) + (1.0 - target) * torch.log(1.0 - pred)
    ).mean()


# --------------------------------------------------------------------------
# PCK
# --------------------------------------------------------------------------

def normalized_errors(pred, keypoints, bbox, image_size):
    """
    Distance between predicted and true location of every visible part,
    divided by the bounding box diagonal.

    The predicted location of a part is the center of its argmax cell;
    ties go to the first cell in row-major order.
    """
    values = pred.values if isinstance(pred, PartHeatmap) else np.asarray(pred)
    if bbox is None:
        raise EvaluationError("PCK needs a bounding box", 'eval.no_bbox')
    visible = [i for i, k in enumerate(keypoints or ()) if k.visible]
    if not visible:
        raise EvaluationError(
            "PCK is undefined without visible parts", 'eval.no_visible_parts'
        )
    if values.shape[0] != len(keypoints):
        raise ShapeError(
            "%d heatmap channels for %d keypoints" % (
                values.shape[0], len(keypoints)
            ),
            'shape.heatmap', expected=len(keypoints), actual=values.shape[0],
        )
    image_h, image_w = image_size
    grid_h, grid_w = values.shape[1:]
    x_min, y_min, x_max, y_max = bbox
    diagonal = math.hypot(x_max - x_min, y_max - y_min)

    errors = []
    for part in visible:
        row, col = np.unravel_index(
            int(np.argmax(values[part])), (grid_h, grid_w)
        )
        x, y = cell_center(row, col, image_h, image_w, grid_h, grid_w)
        errors.append(
            math.hypot(x - keypoints[part].x, y - keypoints[part].y) / diagonal
        )
    return errors


def pck(pred, keypoints, bbox, threshold, image_size):
    "Fraction of visible parts predicted within ``threshold`` x bbox diagonal"
    errors = normalized_errors(pred, keypoints, bbox, image_size)
    return sum(1 for e in errors if e <= threshold) / float(len(errors))


def pck_curve(pred, keypoints, bbox, image_size, thresholds=DEFAULT_THRESHOLDS):
    "[(threshold, pck)] for one image"
    errors = normalized_errors(pred, keypoints, bbox, image_size)
    return [
        (t, sum(1 for e in errors if e <= t) / float(len(errors)))
        for t in sorted(thresholds)
    ]


def _scorable(sample):
    return sample.bbox is not None and bool(sample.visible_parts)


def dataset_pck(model, samples, thresholds=DEFAULT_THRESHOLDS, batch_size=64):
    """
    PCK pooled over every visible part of every sample that has both
    keypoints and a bounding box. Returns ``{threshold: accuracy}``.
    """
    samples = [s for s in samples if _scorable(s)]
    if not samples:
        raise EvaluationError(
            "no sample carries visible parts and a bounding box",
            'eval.no_visible_parts',
        )
    errors = []
    for batch in chunked(samples, batch_size):
        heatmaps = model.predict_heatmaps(to_tensor(batch))
        for sample, values in zip(batch, heatmaps.double().numpy()):
            errors.extend(normalized_errors(
                values, sample.keypoints, sample.bbox, sample.size
            ))
    errors = np.asarray(errors)
    curve = OrderedDict(
        (float(t), float((errors <= t).mean())) for t in sorted(thresholds)
    )
    pose_logger.info(
        "PCK::samples=%d::parts=%d::%s" % (
            len(samples), len(errors),
            ' '.join('%g=%.3f' % item for item in curve.items()),
        )
    )
    return curve


def write_pck_table(curve, path):
    "Write ``threshold,accuracy`` rows"
    from .plotting import write_table
    rows = curve.items() if isinstance(curve, dict) else curve
    return write_table(
        [{'threshold': t, 'accuracy': a} for t, a in rows],
        path, columns=('threshold', 'accuracy'),
    )


def read_pck_table(path):
    from .plotting import read_table
    frame = read_table(path)
    return OrderedDict(zip(frame['threshold'], frame['accuracy']))


# --------------------------------------------------------------------------
# Heatmap images
# --------------------------------------------------------------------------

def heatmap_overlay(sample, heatmap):
    """
    RGB image of `sample` with the maximum over part channels laid over
    it in red.
    """
    values = heatmap.values if isinstance(heatmap, PartHeatmap) else heatmap
    height, width = sample.size
    peak = Image.fromarray(
        np.round(np.asarray(values).max(axis=0) * 255.0).astype(np.uint8)
    ).resize((width, height), Image.BILINEAR)
    alpha = np.asarray(peak, dtype=np.float32)[:, :, None] / 255.0
    red = np.zeros_like(sample.image)
    red[:, :, 0] = 1.0
    blended = sample.image * (1.0 - 0.6 * alpha) + red * 0.6 * alpha
    return Image.fromarray(np.round(blended * 255.0).astype(np.uint8))


def dump_heatmaps(model, samples, out_dir, limit=4):
    "Write predicted heatmap overlays of the first `limit` samples as PNG"
    samples = list(samples)[:limit]
    if not samples:
        return []
    os.makedirs(out_dir, exist_ok=True)
    heatmaps = model.predict_heatmaps(to_tensor(samples))
    paths = []
    for sample, values in zip(samples, heatmaps.double().numpy()):
        path = os.path.join(
            out_dir, 'class%03d-image%06d.png' % (sample.class_id, sample.index)
        )
        heatmap_overlay(sample, values).save(path)
        paths.append(path)
    pose_logger.debug("HEATMAPS::%s::%d" % (out_dir, len(paths)))
    return paths
