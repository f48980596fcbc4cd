# -*- coding: utf-8 -*-
"""
All-way evaluation, statistics and part-level analyses.
"""
import logging
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from more_itertools import chunked

from .aggregate import part_block, zero_part_block
from .datamodel import to_tensor
from .exceptions import EvaluationError
from .learners import prototypes, proto_logits
from .model import fit_classifier
from .serialization import register_report_types
from .signals import trial_completed


eval_logger = logging.getLogger('pose_fewshot.eval')

SCHEMA_VERSION = 1

#: z value of a two-sided 95% normal interval
Z95 = 1.96

Neighbor = namedtuple('Neighbor', ['sample', 'same_class', 'similarity'])


@dataclass
class EvalReport:
    """
    Result of an all-way evaluation. Accuracies are percentages; `ci95`
    is the half width of the 95% interval in percentage points.
    """
    mean_accuracy: float
    per_class_accuracy: float
    ci95: float
    n_trials: int
    shots: str
    seed: int
    config_hash: str = ''
    per_class: Dict[int, float] = field(default_factory=dict)
    trial_accuracies: List[float] = field(default_factory=list)
    algorithm: str = ''
    aggregator: str = ''

    def __post_init__(self):
        values = [self.mean_accuracy, self.per_class_accuracy] + \
            list(self.per_class.values())
        if any(not 0.0 <= v <= 100.0 for v in values) or self.ci95 < 0:
            raise EvaluationError(
                "accuracies must lie in [0, 100] and ci95 must be >= 0",
                'eval.report_range',
            )

    def to_dict(self):
        return {
            '__class__': 'EvalReport',
            'schema_version': SCHEMA_VERSION,
            'mean_accuracy': self.mean_accuracy,
            'per_class_accuracy': self.per_class_accuracy,
            'ci95': self.ci95,
            'n_trials': self.n_trials,
            'shots': self.shots,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'per_class': dict(
                (str(k), v) for k, v in sorted(self.per_class.items())
            ),
            'trial_accuracies': list(self.trial_accuracies),
            'algorithm': self.algorithm,
            'aggregator': self.aggregator,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('schema_version', SCHEMA_VERSION) > SCHEMA_VERSION:
            raise EvaluationError(
                "report schema version %s is newer than %d" % (
                    data['schema_version'], SCHEMA_VERSION
                ),
                'eval.schema_version',
            )
        return cls(
            mean_accuracy=data['mean_accuracy'],
            per_class_accuracy=data['per_class_accuracy'],
            ci95=data['ci95'],
            n_trials=data['n_trials'],
            shots=str(data['shots']),
            seed=data['seed'],
            config_hash=data.get('config_hash', ''),
            per_class=dict(
                (int(k), v) for k, v in data.get('per_class', {}).items()
            ),
            trial_accuracies=list(data.get('trial_accuracies', [])),
            algorithm=data.get('algorithm', ''),
            aggregator=data.get('aggregator', ''),
        )


@dataclass
class PartImportanceTable:
    """
    Per class, the accuracy drop (percentage points) caused by removing
    each part's block from every representation. Drops may be negative.
    """
    drops: Dict[int, List[float]]
    num_parts: int

    def __post_init__(self):
        for class_id, row in self.drops.items():
            if len(row) != self.num_parts:
                raise EvaluationError(
                    "class %d has %d drops for %d parts" % (
                        class_id, len(row), self.num_parts
                    ),
                    'eval.importance_shape',
                )

    def for_class(self, class_id):
        return np.asarray(self.drops[class_id])

    def most_important_part(self, class_id):
        return int(np.argmax(self.drops[class_id]))

    def to_dict(self):
        return {
            '__class__': 'PartImportanceTable',
            'num_parts': self.num_parts,
            'drops': dict(
                (str(k), list(v)) for k, v in sorted(self.drops.items())
            ),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            drops=OrderedDict(
                (int(k), list(v)) for k, v in data['drops'].items()
            ),
            num_parts=data['num_parts'],
        )

    def to_frame(self):
        "One row per class, columns ``class_id, part_1 .. part_M``"
        return pd.DataFrame(
            [[class_id] + list(row) for class_id, row in self.drops.items()],
            columns=['class_id'] + [
                'part_%d' % (i + 1) for i in range(self.num_parts)
            ],
        )


register_report_types()


def confidence_interval(values):
    "Half width of the normal-approximation 95% interval of the mean"
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(Z95 * values.std(ddof=1) / np.sqrt(len(values)))


# --------------------------------------------------------------------------
# Features and adaptation
# --------------------------------------------------------------------------

def extract_features(model, samples, batch_size=64):
    """
    Representation vectors of `samples` in inference mode, built from
    predicted heatmaps (ground truth only for ``pose_gt``).
    """
    samples = list(samples)
    if not samples:
        return torch.zeros(0, model.aggregator.out_dim)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            rows = [
                model.embed_samples(batch, to_tensor(batch))
                for batch in chunked(samples, batch_size)
            ]
    finally:
        model.train(was_training)
    return torch.cat(rows)


def adapt_and_predict(model, ref_features, ref_labels, query_features, seed,
                      epochs=None):
    """
    Adapt the learner to the reference features and return the
    predicted label of every query.

    proto builds prototypes, transfer fits a linear classifier on the
    frozen features, dynamic scores against generated weights.
    """
    ref_labels = torch.as_tensor(ref_labels)
    num_classes = int(ref_labels.max()) + 1
    algorithm = model.config.algorithm
    if algorithm == 'proto':
        logits = proto_logits(
            query_features, prototypes(ref_features, ref_labels, num_classes)
        )
    elif algorithm == 'transfer':
        classifier = fit_classifier(
            ref_features, ref_labels, num_classes, model.config.finetune,
            seed, epochs,
        )
        with torch.no_grad():
            logits = classifier(query_features)
    else:
        with torch.no_grad():
            weight = torch.stack([
                model.generator(ref_features[ref_labels == label])
                for label in range(num_classes)
            ])
            logits = model.classifier(query_features, weight)
    return logits.argmax(dim=1)


def _trial_reference(ref_labels, num_classes, shots, rng):
    chosen = []
    for label in range(num_classes):
        members = np.flatnonzero(ref_labels == label)
        chosen.extend(sorted(members[rng.permutation(len(members))[:shots]]))
    return np.asarray(chosen, dtype=np.int64)


def _labels(refer, query):
    class_ids = sorted(set(s.class_id for s in refer))
    missing = sorted(set(s.class_id for s in query) - set(class_ids))
    if missing:
        raise EvaluationError(
            "query classes %s have no reference images" % missing,
            'eval.missing_reference',
        )
    index = dict((c, i) for i, c in enumerate(class_ids))
    return (
        class_ids,
        np.array([index[s.class_id] for s in refer], dtype=np.int64),
        np.array([index[s.class_id] for s in query], dtype=np.int64),
    )


def evaluate_features(model, class_ids, ref_features, ref_labels,
                      query_features, query_labels, shots, n_trials, seed):
    """
    All-way evaluation on precomputed features. Returns the trial
    accuracies and, per trial, the accuracy of every class.
    """
    num_classes = len(class_ids)
    if shots == 'all':
        trials = [np.arange(len(ref_labels))]
        epochs = None
    else:
        k = int(shots)
        counts = np.bincount(ref_labels, minlength=num_classes)
        if (counts < k).any():
            label = int(np.argmin(counts))
            raise EvaluationError(
                "class %d has %d reference images, %d-shot evaluation needs "
                "%d" % (class_ids[label], counts[label], k, k),
                'eval.too_few_reference',
            )
        trials = [
            _trial_reference(
                ref_labels, num_classes, k,
                np.random.default_rng([seed, trial]),
            )
            for trial in range(n_trials)
        ]
        epochs = model.config.finetune.trial_epochs

    accuracies, per_class = [], []
    for trial, rows in enumerate(trials):
        index = torch.from_numpy(rows)
        predicted = adapt_and_predict(
            model, ref_features[index], ref_labels[rows], query_features,
            seed=seed + trial, epochs=epochs,
        ).numpy()
        correct = predicted == query_labels
        accuracy = float(correct.mean() * 100.0)
        accuracies.append(accuracy)
        per_class.append(dict(
            (class_ids[label], float(correct[query_labels == label].mean()
                                     * 100.0))
            for label in range(num_classes)
            if (query_labels == label).any()
        ))
        trial_completed.send(model, trial=trial, accuracy=accuracy)
    return accuracies, per_class


def _report(model, accuracies, per_class, shots, seed):
    classes = sorted(per_class[0])
    per_class_mean = dict(
        (c, float(np.mean([trial[c] for trial in per_class])))
        for c in classes
    )
    return EvalReport(
        mean_accuracy=float(np.mean(accuracies)),
        per_class_accuracy=float(np.mean(list(per_class_mean.values()))),
        ci95=confidence_interval(accuracies),
        n_trials=len(accuracies),
        shots=str(shots),
        seed=int(seed),
        config_hash=model.config.fingerprint(),
        per_class=per_class_mean,
        trial_accuracies=list(accuracies),
        algorithm=model.config.algorithm,
        aggregator=model.config.aggregator,
    )


def evaluate_allway(model, refer, query, shots, n_trials=600, seed=0,
                    batch_size=64, features=None):
    """
    Distinguish all classes of `refer` at once.

    For integer `shots`, each of `n_trials` trials samples that many
    reference images per class, adapts the learner and scores the whole
    query set. ``shots='all'`` is a single pass over the full reference
    set, so it reports one trial and ``ci95 = 0``.

    :param features: optional ``(ref_features, query_features)`` pair
    """
    shots = str(shots)
    if not query:
        raise EvaluationError("the query set is empty", 'eval.empty_query')
    class_ids, ref_labels, query_labels = _labels(refer, query)
    if features is None:
        features = (
            extract_features(model, refer, batch_size),
            extract_features(model, query, batch_size),
        )
    accuracies, per_class = evaluate_features(
        model, class_ids, features[0], ref_labels, features[1], query_labels,
        shots, n_trials, seed,
    )
    report = _report(model, accuracies, per_class, shots, seed)
    eval_logger.info(
        "EVAL::%s-shot::classes=%d::trials=%d::acc=%.2f::ci95=%.2f" % (
            shots, len(class_ids), report.n_trials, report.mean_accuracy,
            report.ci95,
        )
    )
    return report


def evaluate_repeats(model, refer, query, shots, n_trials, seed, repeats,
                     batch_size=64):
    """
    Repeat the evaluation pass `repeats` times with seeds ``seed,
    seed + 1, ...`` and pool the passes.
    """
    features = (
        extract_features(model, refer, batch_size),
        extract_features(model, query, batch_size),
    )
    return aggregate_reports([
        evaluate_allway(model, refer, query, shots, n_trials, seed + r,
                        features=features)
        for r in range(repeats)
    ])


def aggregate_reports(reports):
    """
    Pool reports of several training runs or evaluation passes: the
    trial accuracies are concatenated and the statistics recomputed.
    """
    reports = list(reports)
    if not reports:
        raise EvaluationError("no reports to aggregate", 'eval.empty')
    if len(reports) == 1:
        return reports[0]
    shots = set(r.shots for r in reports)
    if len(shots) > 1:
        raise EvaluationError(
            "cannot pool reports of different shots %s" % sorted(shots),
            'eval.mixed_shots',
        )
    accuracies = [a for r in reports for a in r.trial_accuracies]
    classes = sorted(set(c for r in reports for c in r.per_class))
    per_class = dict(
        (c, float(np.mean([r.per_class[c] for r in reports
                           if c in r.per_class])))
        for c in classes
    )
    hashes = sorted(set(r.config_hash for r in reports))
    return EvalReport(
        mean_accuracy=float(np.mean(accuracies)),
        per_class_accuracy=float(np.mean(list(per_class.values()))),
        ci95=confidence_interval(accuracies),
        n_trials=len(accuracies),
        shots=reports[0].shots,
        seed=reports[0].seed,
        config_hash=hashes[0] if len(hashes) == 1 else ','.join(hashes),
        per_class=per_class,
        trial_accuracies=accuracies,
        algorithm=reports[0].algorithm,
        aggregator=reports[0].aggregator,
    )


# --------------------------------------------------------------------------
# Part analyses
# --------------------------------------------------------------------------

def _pose_layout(model):
    if model.aggregator.layout not in ('pose', 'upn'):
        raise EvaluationError(
            "part analyses need a per-part representation, the %s "
            "aggregator has none" % model.config.aggregator,
            'eval.not_pose_layout',
        )
    return model.aggregator.num_parts, model.aggregator.channels


def part_importance_table(model, refer, query, seed=0, features=None):
    """
    For every class and part, the drop in all-shot accuracy when that
    part's block is zeroed in every reference and query vector.
    """
    num_parts, channels = _pose_layout(model)
    class_ids, ref_labels, query_labels = _labels(refer, query)
    if features is None:
        features = (extract_features(model, refer),
                    extract_features(model, query))
    ref_features, query_features = features

    def per_class(ref, qry):
        _, classes = evaluate_features(
            model, class_ids, ref, ref_labels, qry, query_labels, 'all', 1,
            seed,
        )
        return classes[0]

    baseline = per_class(ref_features, query_features)
    drops = OrderedDict((c, []) for c in sorted(baseline))
    for part in range(num_parts):
        ablated = per_class(
            zero_part_block(ref_features, part, channels),
            zero_part_block(query_features, part, channels),
        )
        for class_id in drops:
            drops[class_id].append(baseline[class_id] - ablated[class_id])
    eval_logger.info(
        "IMPORTANCE::classes=%d::parts=%d" % (len(drops), num_parts)
    )
    return PartImportanceTable(drops=drops, num_parts=num_parts)


def part_importance(model, refer, query, class_id, seed=0, features=None):
    "Accuracy drop of `class_id` for every removed part, length M"
    if class_id not in set(s.class_id for s in query):
        raise EvaluationError(
            "class %d has no query images" % class_id, 'eval.unknown_class'
        )
    table = part_importance_table(model, refer, query, seed, features)
    return table.for_class(class_id)


def nearest_part_neighbors(model, query_sample, part_index, refer, k=5,
                           ref_features=None):
    """
    The `k` reference samples whose block of part `part_index` is most
    cosine-similar to the query's, best first, with a same-class flag.
    """
    num_parts, channels = _pose_layout(model)
    if not 0 <= part_index < num_parts:
        raise EvaluationError(
            "part index %d is outside 0..%d" % (part_index, num_parts - 1),
            'eval.part_index',
        )
    refer = list(refer)
    if not 1 <= k <= len(refer):
        raise EvaluationError(
            "k=%d must be between 1 and the %d reference images" % (
                k, len(refer)
            ),
            'eval.neighbors_k',
        )
    if ref_features is None:
        ref_features = extract_features(model, refer)
    query_vector = extract_features(model, [query_sample])
    similarity = F.cosine_similarity(
        part_block(ref_features, part_index, channels),
        part_block(query_vector, part_index, channels),
        dim=1,
    ).double().numpy()
    ranking = np.argsort(-similarity, kind='stable')[:k]
    return [
        Neighbor(
            refer[i], refer[i].class_id == query_sample.class_id,
            float(similarity[i]),
        )
        for i in ranking
    ]


def neighbor_rows(model, queries, refer, k=5):
    "Flat listing of the neighbours of every query and part"
    num_parts, _ = _pose_layout(model)
    ref_features = extract_features(model, refer)
    rows = []
    for query_sample in queries:
        for part in range(num_parts):
            neighbors = nearest_part_neighbors(
                model, query_sample, part, refer, k, ref_features
            )
            for rank, neighbor in enumerate(neighbors, 1):
                rows.append({
                    'query_index': query_sample.index,
                    'query_class': query_sample.class_id,
                    'part': part + 1,
                    'rank': rank,
                    'neighbor_index': neighbor.sample.index,
                    'neighbor_class': neighbor.sample.class_id,
                    'same_class': int(neighbor.same_class),
                    'similarity': neighbor.similarity,
                })
    return rows