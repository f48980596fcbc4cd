# -*- coding: utf-8 -*-
"""
Feature aggregators

Each aggregator turns a final feature map ``F`` (``N x C x H x W``, or a
single ``C x H x W`` map) into one representation vector per image.
Pose-style layouts are part-major: the vector of part 1 comes first,
followed by part 2 and so on, each block ``C`` long.
"""
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, ShapeError


#: denominator guard of the attention-weighted average
EPS = 1e-5

#: norms below this are not normalized
MIN_NORM = 1e-12

#: aggregator name -> representation layout
LAYOUTS = {
    'avg': 'avg',
    'avg_multitask': 'avg',
    'pose': 'pose',
    'pose_gt': 'pose',
    'bilinear': 'bilinear',
    'upn': 'upn',
    'bbn': 'bbn',
}


def _batched(tensor):
    if tensor.dim() == 3:
        return tensor.unsqueeze(0), True
    if tensor.dim() != 4:
        raise ShapeError(
            "expected a C x H x W map or a batch of them, got shape %s" % (
                tuple(tensor.shape),
            ),
            'shape.feature_map', actual=tuple(tensor.shape),
        )
    return tensor, False


def _unbatched(vectors, single):
    return vectors[0] if single else vectors


def representation_dim(layout, channels, num_parts):
    "Length of the representation vector of a layout"
    if layout == 'avg':
        return channels
    if layout in ('pose', 'upn'):
        return channels * num_parts
    if layout == 'bilinear':
        return channels * channels
    if layout == 'bbn':
        return 2 * channels
    raise ConfigError("unknown layout %r" % layout, 'config.bad_choice')


def part_block(vectors, part, channels):
    "The ``channels``-long block of part `part` (0-based)"
    return vectors[..., part * channels:(part + 1) * channels]


def zero_part_block(vectors, part, channels):
    "Copy of `vectors` with the block of `part` set to zero"
    rv = vectors.clone()
    rv[..., part * channels:(part + 1) * channels] = 0
    return rv


def avg_pool(features):
    "Global average pooling"
    features, single = _batched(features)
    return _unbatched(features.mean(dim=(2, 3)), single)


def pose_normalize(features, heatmaps):
    """
    Attention-weighted average of the feature map under every heatmap
    channel, concatenated in part order::

        v_i = sum_hw F(h, w) m_i(h, w) / (EPS + sum_hw m_i(h, w))
    """
    features, single = _batched(features)
    heatmaps, _ = _batched(heatmaps)
    if features.shape[0] != heatmaps.shape[0] or \
            features.shape[2:] != heatmaps.shape[2:]:
        raise ShapeError(
            "heatmaps %s do not match feature maps %s" % (
                tuple(heatmaps.shape), tuple(features.shape)
            ),
            'shape.heatmap',
            expected=(features.shape[0], None) + tuple(features.shape[2:]),
            actual=tuple(heatmaps.shape),
        )
    heatmaps = heatmaps.to(features.dtype)
    weighted = torch.einsum('nchw,nmhw->nmc', features, heatmaps)
    mass = EPS + heatmaps.sum(dim=(2, 3))
    vectors = weighted / mass.unsqueeze(-1)
    return _unbatched(vectors.flatten(1), single)


def raw_bilinear(features):
    "Sum over locations of the outer products ``F(h, w) F(h, w)^T``"
    features, single = _batched(features)
    return _unbatched(torch.einsum('nchw,ndhw->ncd', features, features),
                      single)


def bilinear_pool(features):
    """
    Bilinear pooling flattened to ``C^2``, followed by the signed square
    root and L2 normalization. A zero map gives a zero vector.
    """
    features, single = _batched(features)
    flat = raw_bilinear(features).flatten(1)
    rooted = torch.sign(flat) * torch.sqrt(flat.abs() + MIN_NORM)
    rooted = torch.where(flat == 0, torch.zeros_like(rooted), rooted)
    norm = rooted.norm(dim=1, keepdim=True)
    scale = torch.where(
        norm < MIN_NORM, torch.ones_like(norm), 1.0 / norm.clamp_min(MIN_NORM)
    )
    return _unbatched(rooted * scale, single)


class PoseVectorBank(nn.Module):
    """
    Learned, category-agnostic pose vectors that partition a feature map
    without part supervision.
    """

    def __init__(self, num_vectors, dim):
        super(PoseVectorBank, self).__init__()
        self.vectors = nn.Parameter(torch.randn(num_vectors, dim) * 0.1)

    @property
    def num_vectors(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def upn_assign(features, vectors, temperature):
    """
    Soft assignment of every location to the bank vectors:
    ``softmax_i(-||F(h, w) - b_i||^2 / temperature)``, ``N x M x H x W``.
    """
    if temperature <= 0:
        raise ConfigError(
            "temperature must be > 0, got %r" % temperature,
            'aggregate.temperature',
        )
    features, single = _batched(features)
    if vectors.shape[1] != features.shape[1]:
        raise ShapeError(
            "pose vectors have %d dimensions, features %d channels" % (
                vectors.shape[1], features.shape[1]
            ),
            'shape.pose_vectors',
            expected=features.shape[1], actual=vectors.shape[1],
        )
    vectors = vectors.to(features.dtype)
    distances = (
        features.unsqueeze(1) - vectors[None, :, :, None, None]
    ).pow(2).sum(dim=2)
    return _unbatched(torch.softmax(-distances / temperature, dim=1), single)


def upn_pool(features, bank, temperature=1.0):
    "Pose-normalize with soft regions derived from a :class:`PoseVectorBank`"
    vectors = bank.vectors if isinstance(bank, PoseVectorBank) else bank
    assignment = upn_assign(features, vectors, temperature)
    return pose_normalize(features, assignment)


class FeatureAggregator(nn.Module):
    """
    The aggregation step of a model.

    :param kind: aggregator name, see :data:`LAYOUTS`
    :param channels: ``C`` of the final feature map
    :param num_parts: number of heatmap channels (or pose vectors)
    """

    def __init__(self, kind, channels, num_parts, temperature=1.0):
        super(FeatureAggregator, self).__init__()
        if kind not in LAYOUTS:
            raise ConfigError(
                "unknown aggregator %r" % kind, 'config.bad_choice'
            )
        self.kind = kind
        self.layout = LAYOUTS[kind]
        self.channels = channels
        self.num_parts = 2 if self.layout == 'bbn' else num_parts
        self.temperature = temperature
        self.bank = None
        if self.layout == 'upn':
            self.bank = PoseVectorBank(num_parts, channels)
        self.out_dim = representation_dim(
            self.layout, channels, self.num_parts
        )

    @property
    def needs_heatmaps(self):
        return self.layout in ('pose', 'bbn')

    def forward(self, features, heatmaps=None):
        if self.layout == 'avg':
            return avg_pool(features)
        if self.layout == 'bilinear':
            return bilinear_pool(features)
        if self.layout == 'upn':
            return upn_pool(features, self.bank, self.temperature)
        if heatmaps is None:
            raise ShapeError(
                "the %s aggregator needs heatmaps" % self.kind,
                'shape.heatmaps_required',
            )
        if heatmaps.shape[-3] != self.num_parts:
            raise ShapeError(
                "expected %d heatmap channels, got %d" % (
                    self.num_parts, heatmaps.shape[-3]
                ),
                'shape.heatmap',
                expected=self.num_parts, actual=heatmaps.shape[-3],
            )
        return pose_normalize(features, heatmaps)

    def extra_repr(self):
        return 'kind=%s, out_dim=%d' % (self.kind, self.out_dim)
