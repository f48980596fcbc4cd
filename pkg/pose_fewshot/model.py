# -*- coding: utf-8 -*-
"""
Few-shot model

:class:`FewShotModel` bundles the backbone, the optional pose head, the
aggregator and the classifier (or weight generator) of one configured
method, and owns the two-phase contract: once base training ends the
pose head is frozen for good.
"""
import hashlib
import logging
from collections import namedtuple

import numpy as np
import torch
import torch.nn.functional as F
from more_itertools import chunked
from torch import nn

from .aggregate import FeatureAggregator
from .backbone import build_backbone, load_backbone_weights
from .datamodel import heatmap_targets
from .exceptions import (
    DataError, EvaluationError, FrozenParameterError, TrainingError,
)
from .posehead import PoseHead, default_hidden_channels
from .signals import pose_head_frozen


train_logger = logging.getLogger('pose_fewshot.train')

Embedding = namedtuple('Embedding', ['vectors', 'predicted'])

#: aggregators that carry a pose head
POSE_HEAD_AGGREGATORS = ('pose', 'bbn', 'avg_multitask')


# --------------------------------------------------------------------------
# Classifiers
# --------------------------------------------------------------------------

class LinearClassifier(nn.Linear):
    "Affine classifier over representation vectors"

    def __init__(self, in_dim, num_classes):
        super(LinearClassifier, self).__init__(in_dim, num_classes)

    @property
    def num_classes(self):
        return self.out_features


class WeightClassifier(nn.Module):
    """
    Classifier whose weight matrix may be replaced per call, which is
    how generated weights for new classes are scored.
    """

    def __init__(self, in_dim, num_classes):
        super(WeightClassifier, self).__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, in_dim))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def score(self, vectors, weight):
        raise NotImplementedError

    def forward(self, vectors, weight=None):
        return self.score(vectors, self.weight if weight is None else weight)


class CosineClassifier(WeightClassifier):
    "Scaled cosine similarity between vectors and class weights"

    def __init__(self, in_dim, num_classes, scale=10.0):
        super(CosineClassifier, self).__init__(in_dim, num_classes)
        self.scale = nn.Parameter(torch.tensor(float(scale)))

    def score(self, vectors, weight):
        return self.scale * F.normalize(vectors, dim=-1) @ \
            F.normalize(weight, dim=-1).t()


class DotClassifier(WeightClassifier):

    def score(self, vectors, weight):
        return vectors @ weight.t()


class WeightGenerator(nn.Module):
    """
    Maps the support vectors of a class to classifier weights: the L2
    normalized mean of the support, passed through a linear map that
    starts as the identity.
    """

    def __init__(self, dim):
        super(WeightGenerator, self).__init__()
        self.linear = nn.Linear(dim, dim)
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(dim))
            self.linear.bias.zero_()

    def forward(self, support):
        "`support` is ``K x d`` (one class) or ``N x K x d``"
        return self.linear(F.normalize(support.mean(dim=-2), dim=-1))


CLASSIFIERS = {'cosine': CosineClassifier, 'dot': DotClassifier}


def fit_classifier(features, labels, num_classes, finetune, seed, epochs=None):
    """
    Fit a fresh :class:`LinearClassifier` on frozen features with
    minibatch SGD. Deterministic given `seed`.

    :param finetune: a :class:`FinetuneConfig`
    """
    epochs = finetune.epochs if epochs is None else epochs
    generator = torch.Generator().manual_seed(int(seed))
    classifier = LinearClassifier(features.shape[1], num_classes)
    with torch.no_grad():
        bound = 1.0 / max(features.shape[1], 1) ** 0.5
        classifier.weight.uniform_(-bound, bound, generator=generator)
        classifier.bias.zero_()
    optimizer = torch.optim.SGD(
        classifier.parameters(), lr=finetune.lr, momentum=0.9
    )
    features, labels = features.detach(), torch.as_tensor(labels)
    rng = np.random.default_rng([int(seed), 3])
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for batch in chunked(order.tolist(), finetune.batch_size):
            optimizer.zero_grad()
            loss = F.cross_entropy(classifier(features[batch]), labels[batch])
            loss.backward()
            optimizer.step()
    return classifier


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class FewShotModel(nn.Module):
    """
    :param config: the :class:`TrainConfig` the model was built from
    :param class_ids: class id of every classifier row (base classes)
    """

    def __init__(self, config, class_ids=()):
        super(FewShotModel, self).__init__()
        self.config = config
        self.class_ids = tuple(int(c) for c in class_ids)
        self.pose_frozen = False
        self.features_frozen = False

        self.backbone = build_backbone(config.backbone)
        channels = self.backbone.out_channels
        heatmap_channels = config.heatmap_channels

        self.pose_head = None
        if config.aggregator in POSE_HEAD_AGGREGATORS:
            self.pose_head = PoseHead(
                self.backbone.tap_channels,
                config.pose_hidden or default_hidden_channels(
                    self.backbone.tap_channels
                ),
                heatmap_channels,
                self.backbone.output_size,
            )
        self.aggregator = FeatureAggregator(
            config.aggregator, channels, heatmap_channels,
            config.upn_temperature,
        )

        self.classifier = None
        self.generator = None
        if config.algorithm == 'transfer' and self.class_ids:
            self.classifier = LinearClassifier(
                self.aggregator.out_dim, len(self.class_ids)
            )
        elif config.algorithm == 'dynamic':
            self.classifier = CLASSIFIERS[config.dynamic.classifier](
                self.aggregator.out_dim, max(len(self.class_ids), 1)
            )
            self.generator = WeightGenerator(self.aggregator.out_dim)

    @property
    def grid(self):
        "(H, W) of the final feature map"
        return self.backbone.output_size

    @property
    def heatmap_source(self):
        return 'bbox' if self.config.aggregator == 'bbn' else 'parts'

    def label_of(self, class_id):
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise DataError(
                "class %d is not a class of this model" % class_id,
                'data.unknown_class', class_id,
            )

    def targets(self, samples, annotated=None):
        """
        Ground-truth heatmaps of `samples` and the mask of samples whose
        annotation may be used. ``annotated`` (a set of sample indices)
        restricts the mask further.
        """
        gt, mask = heatmap_targets(
            samples, self.grid[0], self.grid[1], source=self.heatmap_source,
            sigma=self.config.heatmap_sigma,
            num_parts=self.config.heatmap_channels,
        )
        if annotated is not None:
            mask &= torch.tensor(
                [s.index in annotated for s in samples], dtype=torch.bool
            )
        return gt, mask

    def pose_forward(self, images):
        "Pose head output with gradients, for the part-location loss"
        if self.pose_head is None:
            raise TrainingError(
                "the %s aggregator has no pose head" % self.config.aggregator,
                'train.no_pose_head',
            )
        return self.pose_head(self.backbone(images).intermediate)

    def embed(self, images, gt_heatmaps=None, annotated=None):
        """
        Representation vectors of a batch, plus the predicted heatmaps
        when the model has a pose head.

        For the pose and bbN aggregators the features of samples flagged
        in the boolean `annotated` mask use `gt_heatmaps`; all others use
        the prediction. ``pose_gt`` always uses `gt_heatmaps`.
        """
        kind = self.config.aggregator
        maps = self.backbone(images)
        predicted = None
        if self.pose_head is not None and (
                kind != 'avg_multitask' or self.training):
            predicted = self.pose_head(maps.intermediate)

        heatmaps = predicted
        if kind == 'pose_gt':
            if gt_heatmaps is None:
                raise DataError(
                    "the pose_gt aggregator needs ground-truth heatmaps",
                    'data.no_keypoints',
                )
            heatmaps = gt_heatmaps
        elif kind in ('pose', 'bbn') and gt_heatmaps is not None \
                and annotated is not None and bool(annotated.any()):
            heatmaps = torch.where(
                annotated.view(-1, 1, 1, 1), gt_heatmaps.to(predicted.dtype),
                predicted,
            )
        return Embedding(self.aggregator(maps.final, heatmaps), predicted)

    def embed_samples(self, samples, images):
        "Inference-time vectors: predicted heatmaps, m* only for pose_gt"
        if self.config.aggregator == 'pose_gt':
            gt, _ = self.targets(samples)
            return self.embed(images, gt).vectors
        return self.embed(images).vectors

    def predict_heatmaps(self, images):
        "Predicted heatmaps in inference mode, without gradients"
        if self.pose_head is None:
            raise EvaluationError(
                "the %s aggregator has no pose head" % self.config.aggregator,
                'eval.no_pose_head',
            )
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self.pose_head(self.backbone(images).intermediate)
        finally:
            self.train(was_training)

    def logits(self, vectors, weight=None):
        if self.classifier is None:
            raise TrainingError(
                "the %s learner has no classifier" % self.config.algorithm,
                'train.no_classifier',
            )
        if weight is not None:
            return self.classifier(vectors, weight)
        return self.classifier(vectors)

    # ----------------------------------------------------------------------
    # Freezing
    # ----------------------------------------------------------------------

    def pose_fingerprint(self):
        "SHA-256 over the pose head tensors, None without a head"
        if self.pose_head is None:
            return None
        digest = hashlib.sha256()
        for name, tensor in sorted(self.pose_head.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def freeze_pose_head(self):
        """
        End of base training: the pose head switches permanently to
        inference mode and any later gradient reaching it raises
        :class:`FrozenParameterError`.
        """
        if self.pose_frozen:
            return
        self.pose_frozen = True
        fingerprint = None
        if self.pose_head is not None:
            self.pose_head.freeze()
            fingerprint = self.pose_fingerprint()
        train_logger.info("FREEZE::pose_head::%s" % fingerprint)
        pose_head_frozen.send(self, fingerprint=fingerprint)

    def freeze_features(self):
        "Freeze everything that produces representation vectors"
        self.freeze_pose_head()
        for module in (self.backbone, self.aggregator):
            for parameter in module.parameters():
                parameter.requires_grad_(False)
        self.features_frozen = True

    def frozen_parameters(self):
        frozen = []
        if self.pose_frozen and self.pose_head is not None:
            frozen.extend(self.pose_head.parameters())
        if self.features_frozen:
            frozen.extend(self.backbone.parameters())
            frozen.extend(self.aggregator.parameters())
        return frozen

    def trainable_parameters(self):
        frozen = set(id(p) for p in self.frozen_parameters())
        return [p for p in self.parameters()
                if id(p) not in frozen and p.requires_grad]

    def make_optimizer(self, parameters, optimizer_config, lr=None):
        """
        SGD or Adam over `parameters`. Frozen parameters are refused.
        """
        parameters = list(parameters)
        frozen = set(id(p) for p in self.frozen_parameters())
        if any(id(p) in frozen for p in parameters):
            raise FrozenParameterError(
                "refusing to optimize frozen parameters",
                'train.frozen_pose_head',
            )
        lr = optimizer_config.lr if lr is None else lr
        if optimizer_config.kind == 'adam':
            return torch.optim.Adam(
                parameters, lr=lr, weight_decay=optimizer_config.weight_decay
            )
        return torch.optim.SGD(
            parameters, lr=lr, momentum=optimizer_config.momentum,
            weight_decay=optimizer_config.weight_decay,
        )


def build_model(config, class_ids=()):
    """
    Build a :class:`FewShotModel` for a :class:`TrainConfig`, optionally
    starting from the backbone of a library checkpoint.
    """
    config.check()
    model = FewShotModel(config, class_ids)
    if config.backbone.init_from:
        load_backbone_weights(model.backbone, config.backbone.init_from)
    return model
