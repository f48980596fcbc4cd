# -*- coding: utf-8 -*-
"""
Feature map extractors

Both architectures return the final feature map F together with an
intermediate map F' taken at a named tap point, which feeds the pose
head.
"""
import logging
from collections import namedtuple

from torch import nn
from torchvision.models import resnet18

from .config import BackboneConfig
from .exceptions import ShapeError


backbone_logger = logging.getLogger('pose_fewshot.backbone')

FeatureMaps = namedtuple('FeatureMaps', ['intermediate', 'final'])


def init_weights(module):
    "He fan-out initialisation for convolutions; BN weight 1, bias 0"
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode='fan_out',
                                    nonlinearity='relu')
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def conv_block(in_channels, out_channels, pool=True):
    layers = [
        nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """
    Common interface of the feature extractors.

    Subclasses fill ``self.stages`` (an ordered ``nn.ModuleDict``) and
    set `tap_channels`, `out_channels` and `output_size`.
    """
    arch = None
    tap_channels = None
    out_channels = None
    output_size = None

    def __init__(self, config):
        super(Backbone, self).__init__()
        self.config = config
        self.input_size = config.image_size
        self.tap_point = config.tap

    def check_input(self, images):
        expected = (self.input_size, self.input_size)
        actual = tuple(images.shape[-2:])
        if images.dim() != 4 or images.shape[1] != 3 or actual != expected:
            raise ShapeError(
                "%s expects a batch of 3x%dx%d images, got %s" % (
                    self.arch, expected[0], expected[1], tuple(images.shape)
                ),
                'shape.input_size',
                expected=(3,) + expected, actual=tuple(images.shape[1:]),
            )

    def forward(self, images):
        self.check_input(images)
        x = images
        intermediate = None
        for name, stage in self.stages.items():
            x = stage(x)
            if name == self.tap_point:
                intermediate = x
        return FeatureMaps(intermediate, x)


class ConvNet4(Backbone):
    """
    Four Conv-BN-ReLU stages of 64 channels. The first three stages are
    followed by 2x2 max pooling: 84 -> 42 -> 21 -> 10, and the fourth
    keeps 10x10.
    """
    arch = 'convnet4'
    out_channels = 64

    def __init__(self, config):
        super(ConvNet4, self).__init__(config)
        self.stages = nn.ModuleDict([
            ('stage1', conv_block(3, 64)),
            ('stage2', conv_block(64, 64)),
            ('stage3', conv_block(64, 64)),
            ('stage4', conv_block(64, 64, pool=False)),
        ])
        init_weights(self)
        self.tap_channels = 64

        size = self.input_size
        for _ in range(3):
            size //= 2
        self.output_size = (size, size)
        if self.output_size != (10, 10):
            raise ShapeError(
                "ConvNet4 must produce a 10x10 map; a %dpx input gives "
                "%dx%d" % (self.input_size, size, size),
                'shape.output_size', expected=(10, 10),
                actual=self.output_size,
            )


class ResNet18Mod(Backbone):
    """
    ResNet18 whose last block keeps stride 1 (14x14 output for a 224
    input), followed by a 1x1 convolution with batch normalization that
    reduces 512 channels to 32.
    """
    arch = 'resnet18mod'
    out_channels = 32
    TAP_CHANNELS = {'layer1': 64, 'layer2': 128, 'layer3': 256,
                    'layer4': 512}

    def __init__(self, config):
        super(ResNet18Mod, self).__init__(config)
        net = resnet18(weights=None)
        last = net.layer4[0]
        last.conv1.stride = (1, 1)
        last.downsample[0].stride = (1, 1)

        reduce = nn.Sequential(
            nn.Conv2d(512, self.out_channels, 1, bias=False),
            nn.BatchNorm2d(self.out_channels),
        )
        self.stages = nn.ModuleDict([
            ('stem', nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool
            )),
            ('layer1', net.layer1),
            ('layer2', net.layer2),
            ('layer3', net.layer3),
            ('layer4', net.layer4),
            ('reduce', reduce),
        ])
        init_weights(self)
        self.tap_channels = self.TAP_CHANNELS[self.tap_point]
        size = self.input_size // 16
        self.output_size = (size, size)


BACKBONES = {
    'convnet4': ConvNet4,
    'resnet18mod': ResNet18Mod,
}


def build_backbone(config=None):
    "Instantiate the backbone a :class:`BackboneConfig` describes"
    config = (config or BackboneConfig()).check()
    backbone = BACKBONES[config.arch](config)
    backbone_logger.debug(
        "BACKBONE::%s::input=%d::tap=%s::params=%d" % (
            config.arch, backbone.input_size, backbone.tap_point,
            count_parameters(backbone),
        )
    )
    return backbone


def forward(images, config_or_backbone):
    """
    Run a backbone on a batch of images and return :class:`FeatureMaps`.

    Accepts either a built backbone or a :class:`BackboneConfig`, in
    which case a freshly initialised backbone is used.
    """
    backbone = config_or_backbone
    if isinstance(config_or_backbone, BackboneConfig):
        backbone = build_backbone(config_or_backbone)
    return backbone(images)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def load_backbone_weights(backbone, path):
    "Initialise `backbone` from the backbone part of a library checkpoint"
    from .checkpoint import load_checkpoint
    payload = load_checkpoint(path)
    prefix = 'backbone.'
    state = dict(
        (k[len(prefix):], v) for k, v in payload['state'].items()
        if k.startswith(prefix)
    )
    backbone.load_state_dict(state)
    backbone_logger.info("BACKBONE::init_from::%s" % path)
    return backbone
