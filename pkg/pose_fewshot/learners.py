# -*- coding: utf-8 -*-
"""
Training loops of the transfer, prototypical and dynamic learners.

Base training optimizes the classification loss plus ``alpha`` times
the part-location loss whenever the aggregator carries a pose head.
Features of annotated images are built from ground-truth heatmaps while
the pose head learns; when base training ends the head is frozen and
every later phase works from its predictions.
"""
import copy
import csv
import logging
import math
import random
from collections import namedtuple

import numpy as np
import torch
import torch.nn.functional as F
from more_itertools import chunked
from torch.optim.lr_scheduler import MultiStepLR

from .datamodel import (
    designate_annotated, flip_sample, group_by_class, sample_episode,
    step_seed, to_tensor,
)
from .exceptions import ConfigError, DataError, TrainingError
from .model import fit_classifier
from .posehead import pose_loss
from .signals import checkpoint_due, epoch_completed, validation_completed


train_logger = logging.getLogger('pose_fewshot.train')

StepLosses = namedtuple(
    'StepLosses', ['loss_fewshot', 'loss_pose', 'accuracy']
)

METRICS_COLUMNS = ('epoch', 'split', 'loss_fewshot', 'loss_pose', 'accuracy')


def seed_everything(seed):
    "Seed python, numpy and torch and ask torch for deterministic kernels"
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _finite(value):
    if torch.is_tensor(value):
        return bool(torch.isfinite(value.detach()).all())
    return math.isfinite(value)


def total_loss(few_shot_loss, pose_loss_value, alpha):
    "``few_shot_loss + alpha * pose_loss``; non-finite inputs abort training"
    for name, value in (('few-shot', few_shot_loss),
                        ('pose', pose_loss_value)):
        if value is not None and not _finite(value):
            raise TrainingError(
                "%s loss is not finite (%s)" % (name, value), 'train.nan_loss'
            )
    if pose_loss_value is None:
        return few_shot_loss
    return few_shot_loss + alpha * pose_loss_value


# --------------------------------------------------------------------------
# Classification heads
# --------------------------------------------------------------------------

def prototypes(vectors, labels, n_way):
    "Per-class mean of the support vectors, ``n_way x d``"
    labels = torch.as_tensor(labels)
    rows = []
    for label in range(n_way):
        members = vectors[labels == label]
        if not len(members):
            raise DataError(
                "episode class %d has no support samples" % label,
                'train.empty_class',
            )
        rows.append(members.mean(dim=0))
    return torch.stack(rows)


def proto_logits(query, protos):
    "Negative squared Euclidean distance to every prototype"
    return -(query.unsqueeze(1) - protos.unsqueeze(0)).pow(2).sum(dim=-1)


def _accuracy(logits, labels):
    return float((logits.argmax(dim=1) == labels).double().mean() * 100.0)


# --------------------------------------------------------------------------
# Metrics log
# --------------------------------------------------------------------------

def _cell(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsLog(object):
    """
    Line-oriented ``epoch,split,loss_fewshot,loss_pose,accuracy`` log.
    Floats are written with ``repr`` so reruns compare bit for bit.

    Connect it to :data:`pose_fewshot.signals.epoch_completed`::

        with epoch_completed.connected_to(log.record):
            train(...)
    """

    def __init__(self, path):
        self.path = path
        with open(path, 'w', newline='') as handle:
            csv.writer(handle).writerow(METRICS_COLUMNS)

    def record(self, sender, **row):
        with open(self.path, 'a', newline='') as handle:
            csv.writer(handle).writerow(
                [_cell(row.get(column)) for column in METRICS_COLUMNS]
            )


# --------------------------------------------------------------------------
# Steps
# --------------------------------------------------------------------------

def _maybe_flip(samples, config, rng):
    if not config.augment_flip:
        return samples
    flips = rng.random(len(samples)) < 0.5
    return [flip_sample(s) if f else s for s, f in zip(samples, flips)]


def _pose_batch_per_class(class_ids, annotated_pool, per_class, rng):
    batch = []
    for class_id in class_ids:
        members = annotated_pool.get(class_id, [])
        if not members:
            continue
        picks = rng.choice(len(members), min(per_class, len(members)),
                           replace=False)
        batch.extend(members[i] for i in sorted(picks))
    return batch


def _pose_term(model, embedding, mask, gt, pose_samples, rng, config):
    """
    Part-location loss of a step: on the step's own annotated samples,
    or on a separate batch when one is given.
    """
    if model.pose_head is None or not config.uses_pose_loss:
        return None
    if pose_samples is not None:
        if not pose_samples:
            return None
        pose_samples = _maybe_flip(pose_samples, config, rng)
        target, pose_mask = model.targets(pose_samples)
        predicted = model.pose_forward(to_tensor(pose_samples))
        if not bool(pose_mask.any()):
            return None
        return pose_loss(predicted[pose_mask], target[pose_mask])
    if mask is None or not bool(mask.any()):
        return None
    return pose_loss(embedding.predicted[mask], gt[mask])


def _optimize(optimizer, loss):
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()


class StepContext(object):
    """
    Everything a training step needs besides its batch.

    :param annotated: sample indices whose annotations may be used
    :param annotated_pool: class id -> annotated samples, used for
                           per-class pose batches
    :param pose_set: disjoint part-annotated samples; when given,
                     classification features always use predicted maps
    """

    def __init__(self, model, config, optimizer, annotated=None,
                 annotated_pool=None, pose_set=None):
        self.model = model
        self.config = config
        self.optimizer = optimizer
        self.annotated = annotated
        self.annotated_pool = annotated_pool or {}
        self.pose_set = pose_set

    @property
    def feature_ground_truth(self):
        "Whether annotated samples use m* for their features"
        return self.pose_set is None and \
            self.config.pose_sampling == 'episode'

    def pose_samples(self, class_ids, rng):
        if self.pose_set is not None:
            size = min(self.config.pose_batch_size, len(self.pose_set))
            picks = rng.choice(len(self.pose_set), size, replace=False)
            return [self.pose_set[i] for i in sorted(picks)]
        if self.config.pose_sampling == 'per_class':
            return _pose_batch_per_class(
                class_ids, self.annotated_pool,
                self.config.pose_batch_per_class, rng,
            )
        return None

    def embed(self, samples):
        """
        Embed a training batch. Returns the embedding, the usable-
        annotation mask and the ground-truth heatmaps.
        """
        model = self.model
        images = to_tensor(samples)
        gt = mask = None
        if model.config.aggregator == 'pose_gt':
            gt, _ = model.targets(samples)
            return model.embed(images, gt), None, gt
        if model.pose_head is not None:
            gt, mask = model.targets(samples, self.annotated)
        feature_mask = mask if self.feature_ground_truth else None
        embedding = model.embed(images, gt, feature_mask)
        return embedding, mask, gt


def proto_train_step(model, episode, config, context, seed=0):
    """
    One episode of prototypical training: prototypes from the support
    vectors, cross-entropy over negative squared distances of the
    queries, plus the weighted pose loss. Updates `model` in place through
    the optimizer of `context`, which carries its state across steps, and
    returns :class:`StepLosses`.
    """
    rng = np.random.default_rng(seed)
    samples = _maybe_flip(
        episode.support_samples + episode.query_samples, config, rng
    )
    n_support = len(episode.support)
    embedding, mask, gt = context.embed(samples)

    support = embedding.vectors[:n_support]
    query = embedding.vectors[n_support:]
    protos = prototypes(support, episode.support_labels, episode.n_way)
    logits = proto_logits(query, protos)
    labels = torch.as_tensor(episode.query_labels)
    few_shot = F.cross_entropy(logits, labels)

    pose_value = _pose_term(
        model, embedding, mask, gt,
        context.pose_samples(episode.class_ids, rng), rng, config,
    )
    loss = total_loss(few_shot, pose_value, config.alpha)
    _optimize(context.optimizer, loss)
    return StepLosses(
        float(few_shot.detach()),
        None if pose_value is None else float(pose_value.detach()),
        _accuracy(logits.detach(), labels),
    )


def transfer_train_step(model, samples, config, context, seed=0):
    "One labelled batch of standard classification training"
    rng = np.random.default_rng(seed)
    samples = _maybe_flip(list(samples), config, rng)
    embedding, mask, gt = context.embed(samples)
    logits = model.logits(embedding.vectors)
    labels = torch.tensor([model.label_of(s.class_id) for s in samples])
    few_shot = F.cross_entropy(logits, labels)
    class_ids = sorted(set(s.class_id for s in samples))
    pose_value = _pose_term(
        model, embedding, mask, gt,
        context.pose_samples(class_ids, rng), rng, config,
    )
    loss = total_loss(few_shot, pose_value, config.alpha)
    _optimize(context.optimizer, loss)
    return StepLosses(
        float(few_shot.detach()),
        None if pose_value is None else float(pose_value.detach()),
        _accuracy(logits.detach(), labels),
    )


# --------------------------------------------------------------------------
# Epochs
# --------------------------------------------------------------------------

def episodes_per_epoch(repre, config):
    "One epoch visits about every representation image once"
    return max(1, int(math.ceil(len(repre) / float(config.episode.size))))


def _proto_epoch(model, repre, config, context, epoch):
    episode_config = config.episode
    for step in range(episodes_per_epoch(repre, config)):
        episode = sample_episode(
            repre, episode_config.n_way, episode_config.k_shot,
            episode_config.q_query, step_seed(config.seed, epoch, step),
        )
        yield proto_train_step(
            model, episode, config, context,
            seed=step_seed(config.seed, epoch, step, 1),
        )


def _transfer_epoch(model, repre, config, context, epoch):
    order = np.random.default_rng(step_seed(config.seed, epoch)).permutation(
        len(repre)
    )
    for step, batch in enumerate(chunked(order.tolist(), config.batch_size)):
        yield transfer_train_step(
            model, [repre[i] for i in batch], config, context,
            seed=step_seed(config.seed, epoch, step, 1),
        )


EPOCHS = {'proto': _proto_epoch, 'transfer': _transfer_epoch}


def _mean(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(np.mean(values))


def validate(model, validation, config):
    "All-way all-shot accuracy on the validation classes"
    from .evaluate import evaluate_allway
    refer, query = validation
    report = evaluate_allway(
        model, refer, query, 'all', n_trials=1, seed=config.seed,
    )
    return report.mean_accuracy


def _base_training(model, repre, config, validation=None, annotated=None,
                   pose_set=None, algorithm=None):
    """
    The shared base-training loop: staged learning rate schedule,
    periodic validation with best-state selection, periodic checkpoint
    signals, and the pose head frozen at the end.
    """
    algorithm = algorithm or config.algorithm
    if not repre:
        raise DataError("the representation set is empty", 'train.empty_set')
    schedule = config.schedule
    total_epochs = schedule.total_epochs
    optimizer = model.make_optimizer(
        model.trainable_parameters(), config.optimizer
    )
    scheduler = MultiStepLR(
        optimizer,
        milestones=[schedule.epochs * s for s in range(1, schedule.stages)],
        gamma=schedule.gamma,
    )
    annotated_pool = None
    if annotated is not None:
        annotated_pool = group_by_class(
            [s for s in repre if s.index in annotated]
        )
    context = StepContext(
        model, config, optimizer, annotated, annotated_pool, pose_set
    )
    validation = validation if validation and all(validation) else None

    best_accuracy, best_state, best_epoch = None, None, None
    run_epoch = EPOCHS[algorithm]
    for epoch in range(1, total_epochs + 1):
        model.train()
        losses = list(run_epoch(model, repre, config, context, epoch))
        scheduler.step()
        row = StepLosses(
            _mean(l.loss_fewshot for l in losses),
            _mean(l.loss_pose for l in losses),
            _mean(l.accuracy for l in losses),
        )
        train_logger.info(
            "EPOCH::%d/%d::loss=%s::pose=%s::acc=%s" % (
                epoch, total_epochs, row.loss_fewshot, row.loss_pose,
                row.accuracy,
            )
        )
        epoch_completed.send(model, epoch=epoch, split='train', **row._asdict())

        due = config.eval_every and (
            epoch % config.eval_every == 0 or epoch == total_epochs
        )
        if validation is not None and due:
            accuracy = validate(model, validation, config)
            improved = best_accuracy is None or accuracy > best_accuracy
            if improved:
                best_accuracy, best_epoch = accuracy, epoch
                best_state = copy.deepcopy(model.state_dict())
            train_logger.info(
                "VALIDATION::%d::acc=%.2f::best=%.2f@%d" % (
                    epoch, accuracy, best_accuracy, best_epoch
                )
            )
            epoch_completed.send(
                model, epoch=epoch, split='validation', loss_fewshot=None,
                loss_pose=None, accuracy=accuracy,
            )
            validation_completed.send(
                model, epoch=epoch, accuracy=accuracy, best=improved
            )
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint_due.send(model, epoch=epoch)

    if best_state is not None:
        model.load_state_dict(best_state)
        train_logger.info(
            "SELECT::epoch=%d::acc=%.2f" % (best_epoch, best_accuracy)
        )
    model.freeze_pose_head()
    return model


def _validation_sets(bundle):
    return bundle.refer_for('validation'), bundle.query_for('validation')


# --------------------------------------------------------------------------
# Learners
# --------------------------------------------------------------------------

def proto_train(model, repre, config, validation=None, annotated=None):
    "Episodic prototypical training on the representation set"
    return _base_training(
        model, repre, config, validation, annotated, algorithm='proto'
    )


def transfer_train(model, repre, config, validation=None, annotated=None):
    "Linear classifier over the base classes, trained jointly with features"
    if model.classifier is None:
        raise TrainingError(
            "transfer training needs a base-class classifier",
            'train.no_classifier',
        )
    return _base_training(
        model, repre, config, validation, annotated, algorithm='transfer'
    )


def transfer_finetune(model, refer, config, epochs=None, seed=None):
    """
    Replace the classifier with a new linear classifier over the classes
    of `refer`, fitted on frozen features computed from predicted
    heatmaps. Feature parameters are left bit-identical.
    """
    from .evaluate import extract_features
    if not model.pose_frozen:
        raise TrainingError(
            "finetuning needs a base-trained model", 'train.not_base_trained'
        )
    model.freeze_features()
    class_ids = sorted(set(s.class_id for s in refer))
    labels = [class_ids.index(s.class_id) for s in refer]
    features = extract_features(model, refer)
    model.classifier = fit_classifier(
        features, labels, len(class_ids), config.finetune,
        config.seed if seed is None else seed, epochs,
    )
    model.class_ids = tuple(class_ids)
    train_logger.info(
        "FINETUNE::classes=%d::images=%d" % (len(class_ids), len(refer))
    )
    return model


def _dynamic_stage_two(model, repre, config):
    from .evaluate import extract_features
    dynamic = config.dynamic
    groups = group_by_class(repre)
    class_ids = list(groups)
    if len(class_ids) < dynamic.fake_novel + dynamic.fake_base:
        raise DataError(
            "dynamic training needs %d fake-novel and %d base classes, the "
            "representation set has %d classes" % (
                dynamic.fake_novel, dynamic.fake_base, len(class_ids)
            ),
            'train.too_few_base_classes',
        )
    for class_id, members in groups.items():
        if len(members) <= dynamic.shots:
            raise DataError(
                "class %d has %d images, dynamic training needs more than "
                "%d" % (class_id, len(members), dynamic.shots),
                'train.class_too_small', class_id,
            )

    model.freeze_features()
    features = extract_features(model, repre)
    rows = dict((class_id, []) for class_id in class_ids)
    for position, sample in enumerate(repre):
        rows[sample.class_id].append(position)

    optimizer = torch.optim.Adam(model.generator.parameters(), lr=dynamic.lr)
    base_weight = model.classifier.weight.detach()
    for epoch in range(1, dynamic.epochs + 1):
        losses, accuracies = [], []
        for step in range(dynamic.steps_per_epoch):
            rng = np.random.default_rng(step_seed(config.seed, 2, epoch, step))
            picked = rng.choice(
                len(class_ids), dynamic.fake_novel + dynamic.fake_base,
                replace=False,
            )
            fake_novel = [class_ids[i] for i in picked[:dynamic.fake_novel]]
            fake_base = [class_ids[i] for i in picked[dynamic.fake_novel:]]

            generated, query_rows, query_labels = [], [], []
            for class_id in fake_novel + fake_base:
                members = rows[class_id]
                count = min(dynamic.images_per_class, len(members))
                order = [members[i] for i in rng.permutation(len(members))]
                chosen = order[:count]
                if class_id in fake_novel:
                    generated.append(
                        model.generator(features[chosen[:dynamic.shots]])
                    )
                    chosen = chosen[dynamic.shots:]
                query_rows.extend(chosen)
                query_labels.extend([model.label_of(class_id)] * len(chosen))

            weight = base_weight.clone()
            novel_labels = torch.tensor(
                [model.label_of(c) for c in fake_novel]
            )
            weight = weight.index_put((novel_labels,), torch.stack(generated))
            logits = model.logits(features[query_rows], weight)
            labels = torch.tensor(query_labels)
            loss = total_loss(F.cross_entropy(logits, labels), None, 0.0)
            _optimize(optimizer, loss)
            losses.append(float(loss.detach()))
            accuracies.append(_accuracy(logits.detach(), labels))
        epoch_completed.send(
            model, epoch=config.schedule.total_epochs + epoch, split='train',
            loss_fewshot=_mean(losses), loss_pose=None,
            accuracy=_mean(accuracies),
        )
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint_due.send(
                model, epoch=config.schedule.total_epochs + epoch
            )
    train_logger.info("DYNAMIC::generator::epochs=%d" % dynamic.epochs)
    return model


def dynamic_train(model, repre, config, validation=None, annotated=None):
    """
    Stage one trains features with a cosine classifier over the base
    classes. Stage two freezes them and trains only the weight generator
    on fake-novel episodes drawn from the base classes.
    """
    if model.generator is None:
        raise TrainingError(
            "dynamic training needs a weight generator", 'train.no_generator'
        )
    _base_training(
        model, repre, config, validation, annotated, algorithm='transfer'
    )
    return _dynamic_stage_two(model, repre, config)


def multitask_train(model, repre, config, validation=None, annotated=None):
    """
    Average-pooled features trained jointly with the pose head, which
    only contributes its loss and is ignored at inference.
    """
    if config.aggregator != 'avg_multitask':
        raise ConfigError(
            "multi-task training needs the avg_multitask aggregator, got "
            "%s" % config.aggregator,
            'config.aggregator',
        )
    if config.algorithm == 'dynamic':
        return dynamic_train(model, repre, config, validation, annotated)
    return _base_training(model, repre, config, validation, annotated)


def train_with_disjoint_pose(model, classify_set, pose_set, config,
                             validation=None):
    """
    Classification from `classify_set` with predicted heatmaps, part
    supervision from a batch of `pose_set` at every step.
    """
    pose_set = [s for s in pose_set if s.keypoints is not None or
                (config.aggregator == 'bbn' and s.bbox is not None)]
    if config.uses_pose_loss and not pose_set:
        raise DataError(
            "the pose set has no annotated images", 'train.empty_pose_set'
        )
    if config.algorithm == 'dynamic':
        raise ConfigError(
            "disjoint pose supervision supports the proto and transfer "
            "learners", 'config.algorithm',
        )
    return _base_training(
        model, classify_set, config, validation, pose_set=pose_set
    )


def train(model, bundle, config, pose_set=None, validate_on=True):
    """
    Train `model` on ``bundle.repre`` with the learner `config` names.

    Model selection runs on the bundle's validation classes unless
    `validate_on` is false. With a `pose_set`, part supervision comes
    from that disjoint set instead.
    """
    validation = _validation_sets(bundle) if validate_on else None
    repre = list(bundle.repre)
    train_logger.info(
        "TRAIN::%s::%s::images=%d::classes=%d::fraction=%s" % (
            config.algorithm, config.aggregator, len(repre),
            len(bundle.split.base), config.annotation_fraction,
        )
    )
    if pose_set is not None:
        return train_with_disjoint_pose(
            model, repre, pose_set, config, validation
        )
    annotated = designate_annotated(
        repre, config.annotation_fraction, config.seed
    )
    if config.aggregator == 'avg_multitask':
        return multitask_train(model, repre, config, validation, annotated)
    learner = LEARNERS[config.algorithm]
    return learner(model, repre, config, validation, annotated)


LEARNERS = {
    'proto': proto_train,
    'transfer': transfer_train,
    'dynamic': dynamic_train,
}
