# -*- coding: utf-8 -*-
"""
Dataset abstraction

Samples, class splits, reference/query partitioning, ground-truth
heatmap rasterization and episode sampling. Every sampling function is a
pure function of its inputs and seed.
"""
import logging
import math
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .exceptions import DataError


data_logger = logging.getLogger('pose_fewshot.data')

Keypoint = namedtuple('Keypoint', ['x', 'y', 'visible'])

#: per-channel statistics used to normalize images before the backbone
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

GROUND_TRUTH = 'ground_truth'
SOFT_GROUND_TRUTH = 'soft_ground_truth'
PREDICTED = 'predicted'
HEATMAP_KINDS = (GROUND_TRUTH, SOFT_GROUND_TRUTH, PREDICTED)


@dataclass(frozen=True, eq=False)
class ImageSample:
    """
    An image with its class label and optional part keypoints and
    bounding box. Coordinates are pixels, x to the right and y down, on
    the continuous ``[0, W] x [0, H]`` canvas.

    `index` identifies the image within its dataset; two samples with
    the same index are the same image.
    """
    image: np.ndarray
    class_id: int
    index: int
    keypoints: Optional[Tuple[Keypoint, ...]] = None
    bbox: Optional[Tuple[float, float, float, float]] = None
    path: Optional[str] = None

    def __post_init__(self):
        image = self.image
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(
                "image %d must be H x W x 3, got %s" % (
                    self.index, image.shape
                ),
                'data.image_shape', self.class_id,
            )
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise DataError(
                "image %d has values outside [0, 1]" % self.index,
                'data.image_range', self.class_id,
            )
        if self.class_id < 0:
            raise DataError(
                "class id must be >= 0, got %d" % self.class_id,
                'data.class_id', self.class_id,
            )
        image.setflags(write=False)

        height, width = image.shape[:2]
        if self.keypoints is not None:
            keypoints = tuple(Keypoint(*k) for k in self.keypoints)
            object.__setattr__(self, 'keypoints', keypoints)
            for part, keypoint in enumerate(keypoints):
                if keypoint.visible and not (
                        0 <= keypoint.x <= width and 0 <= keypoint.y <= height):
                    raise DataError(
                        "image %d: visible part %d at (%g, %g) lies outside "
                        "the %dx%d image" % (
                            self.index, part + 1, keypoint.x, keypoint.y,
                            width, height,
                        ),
                        'data.keypoint_bounds', self.class_id,
                    )
        if self.bbox is not None:
            x_min, y_min, x_max, y_max = self.bbox
            if not (x_max > x_min and y_max > y_min):
                raise DataError(
                    "image %d: bounding box %s has no area" % (
                        self.index, self.bbox
                    ),
                    'data.bbox_area', self.class_id,
                )
            if x_min < 0 or y_min < 0 or x_max > width or y_max > height:
                raise DataError(
                    "image %d: bounding box %s exceeds the %dx%d image" % (
                        self.index, self.bbox, width, height,
                    ),
                    'data.bbox_bounds', self.class_id,
                )

    @property
    def size(self):
        "(height, width) of the image"
        return self.image.shape[:2]

    @property
    def num_parts(self):
        return len(self.keypoints) if self.keypoints is not None else 0

    @property
    def visible_parts(self):
        if self.keypoints is None:
            return []
        return [i for i, k in enumerate(self.keypoints) if k.visible]


@dataclass(frozen=True)
class SplitAssignment:
    base: FrozenSet[int]
    validation: FrozenSet[int]
    novel: FrozenSet[int]

    def __post_init__(self):
        if (self.base & self.validation) or (self.base & self.novel) or \
                (self.validation & self.novel):
            raise DataError(
                "class splits must be pairwise disjoint", 'data.split_overlap'
            )

    @property
    def all(self):
        return self.base | self.validation | self.novel

    def classes(self, kind):
        if kind not in ('base', 'validation', 'novel'):
            raise DataError("unknown split %r" % kind, 'data.split_kind')
        return getattr(self, kind)


@dataclass(frozen=True)
class PartHeatmap:
    """
    An ``M x H x W`` part location map with values in ``[0, 1]``.

    Ground-truth maps are binary and an invisible part has an all-zero
    channel; predicted maps come out of the pose head's sigmoid.
    """
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in HEATMAP_KINDS:
            raise DataError(
                "unknown heatmap kind %r" % self.kind, 'data.heatmap_kind'
            )
        if self.values.ndim != 3:
            raise DataError(
                "heatmaps are M x H x W, got shape %s" % (self.values.shape,),
                'data.heatmap_shape',
            )
        if self.values.size and (
                self.values.min() < 0.0 or self.values.max() > 1.0):
            raise DataError(
                "heatmap values must lie in [0, 1]", 'data.heatmap_range'
            )
        if self.kind == GROUND_TRUTH and not np.isin(
                self.values, (0.0, 1.0)).all():
            raise DataError(
                "ground-truth heatmaps must be binary", 'data.heatmap_binary'
            )

    @property
    def num_parts(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """
    The three sample sets of an experiment: the representation set of
    base classes, and the reference and query sets of the validation and
    novel classes.
    """
    repre: List[ImageSample]
    refer: List[ImageSample]
    query: List[ImageSample]
    num_parts: int
    split: SplitAssignment

    def __post_init__(self):
        held_out = self.split.validation | self.split.novel
        for sample in self.repre:
            if sample.class_id not in self.split.base:
                raise DataError(
                    "representation set holds non-base class %d" % (
                        sample.class_id
                    ),
                    'data.bundle_repre', sample.class_id,
                )
        for sample in list(self.refer) + list(self.query):
            if sample.class_id not in held_out:
                raise DataError(
                    "reference/query sets hold base class %d" % (
                        sample.class_id
                    ),
                    'data.bundle_heldout', sample.class_id,
                )
        overlap = set(s.index for s in self.refer) & \
            set(s.index for s in self.query)
        if overlap:
            raise DataError(
                "%d images are in both the reference and the query "
                "set" % len(overlap),
                'data.bundle_overlap',
            )

    def refer_for(self, kind):
        classes = self.split.classes(kind)
        return [s for s in self.refer if s.class_id in classes]

    def query_for(self, kind):
        classes = self.split.classes(kind)
        return [s for s in self.query if s.class_id in classes]

    @property
    def samples(self):
        return list(self.repre) + list(self.refer) + list(self.query)


@dataclass(frozen=True)
class Episode:
    support: List[Tuple[ImageSample, int]]
    query: List[Tuple[ImageSample, int]]
    n_way: int
    k_shot: int
    q_query: int
    class_ids: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        support_idx = [s.index for s, _ in self.support]
        query_idx = [s.index for s, _ in self.query]
        if set(support_idx) & set(query_idx):
            raise DataError(
                "an image appears in both support and query",
                'data.episode_leak',
            )
        for items, per_class in ((self.support, self.k_shot),
                                 (self.query, self.q_query)):
            counts = np.bincount(
                [label for _, label in items], minlength=self.n_way
            )
            if len(counts) != self.n_way or (counts != per_class).any():
                raise DataError(
                    "episode classes must have %d support and %d query "
                    "samples each" % (self.k_shot, self.q_query),
                    'data.episode_shape',
                )

    @property
    def support_samples(self):
        return [s for s, _ in self.support]

    @property
    def query_samples(self):
        return [s for s, _ in self.query]

    @property
    def support_labels(self):
        return [label for _, label in self.support]

    @property
    def query_labels(self):
        return [label for _, label in self.query]


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

def split_classes(class_ids):
    """
    Assign every class to base, validation or novel: even ids are base,
    ids with ``id mod 4 == 1`` validation and the rest novel.
    """
    class_ids = list(class_ids)
    if not class_ids:
        raise DataError("no class ids to split", 'data.empty_split')
    seen = set()
    for class_id in class_ids:
        if class_id in seen:
            raise DataError(
                "duplicate class id %d" % class_id,
                'data.duplicate_class', class_id,
            )
        seen.add(class_id)
    return SplitAssignment(
        base=frozenset(c for c in class_ids if c % 2 == 0),
        validation=frozenset(c for c in class_ids if c % 4 == 1),
        novel=frozenset(c for c in class_ids if c % 4 == 3),
    )


def group_by_class(samples):
    "Map class id -> samples in input order, classes in ascending id order"
    groups = {}
    for sample in samples:
        groups.setdefault(sample.class_id, []).append(sample)
    return OrderedDict(sorted(groups.items()))


def _count(fraction, n):
    # rounding first keeps products such as 0.2 * 15 from ceiling up to 4
    return max(1, int(math.ceil(round(fraction * n, 9))))


def make_reference_query(samples_by_class, fraction, seed):
    """
    Partition every class into reference and query samples.

    ``ceil(fraction * n)`` samples per class (at least one, at most
    ``n - 1``) go to the reference set.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(
            "reference fraction must be in (0, 1), got %r" % fraction,
            'data.fraction',
        )
    refer, query = [], []
    for class_id in sorted(samples_by_class):
        samples = list(samples_by_class[class_id])
        if len(samples) < 2:
            raise DataError(
                "class %d has %d sample(s); at least 2 are needed to form "
                "both a reference and a query split" % (
                    class_id, len(samples)
                ),
                'data.class_too_small', class_id,
            )
        n_refer = min(_count(fraction, len(samples)), len(samples) - 1)
        order = np.random.default_rng([seed, class_id]).permutation(
            len(samples)
        )
        refer.extend(samples[i] for i in sorted(order[:n_refer]))
        query.extend(samples[i] for i in sorted(order[n_refer:]))
    return refer, query


def bundle_from_samples(samples, num_parts, reference_fraction, seed):
    "Split labelled samples of every class into a :class:`DatasetBundle`"
    groups = group_by_class(samples)
    split = split_classes(list(groups))
    repre = [s for s in samples if s.class_id in split.base]
    held_out = OrderedDict(
        (c, members) for c, members in groups.items() if c not in split.base
    )
    refer, query = [], []
    if held_out:
        refer, query = make_reference_query(
            held_out, reference_fraction, seed
        )
    return DatasetBundle(
        repre=repre, refer=refer, query=query, num_parts=num_parts,
        split=split,
    )


def designate_annotated(samples, fraction, seed):
    """
    Pick the images whose part annotations may be used: exactly
    ``ceil(fraction * n)`` per class. Returns a frozenset of sample
    indices, fixed for the whole run.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(
            "annotation fraction must be in (0, 1], got %r" % fraction,
            'data.fraction',
        )
    chosen = set()
    for class_id, members in group_by_class(samples).items():
        annotated = [s for s in members if s.keypoints is not None]
        n = min(_count(fraction, len(members)), len(annotated))
        order = np.random.default_rng([seed, class_id, 1]).permutation(
            len(annotated)
        )
        chosen.update(annotated[i].index for i in order[:n])
    data_logger.debug(
        "ANNOTATED::fraction=%s::%d of %d" % (
            fraction, len(chosen), len(samples)
        )
    )
    return frozenset(chosen)


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------

def keypoint_cell(x, y, image_h, image_w, grid_h, grid_w):
    "Grid cell (row, col) containing an image coordinate"
    col = min(int(math.floor(x * grid_w / float(image_w))), grid_w - 1)
    row = min(int(math.floor(y * grid_h / float(image_h))), grid_h - 1)
    return row, col


def cell_center(row, col, image_h, image_w, grid_h, grid_w):
    "Image coordinate (x, y) of a grid cell's center"
    return (
        (col + 0.5) * image_w / float(grid_w),
        (row + 0.5) * image_h / float(grid_h),
    )


def rasterize_parts(sample, grid_h, grid_w, sigma=0.0):
    """
    Ground-truth heatmap of a sample's parts on the feature grid.

    Each visible part sets the one cell containing its keypoint to 1;
    invisible parts leave their channel at zero. With ``sigma > 0`` (in
    cells) a peak-1 Gaussian around that cell is drawn instead.
    """
    if sample.keypoints is None:
        raise DataError(
            "image %d has no part keypoints" % sample.index,
            'data.no_keypoints', sample.class_id,
        )
    image_h, image_w = sample.size
    values = np.zeros((len(sample.keypoints), grid_h, grid_w), np.float32)
    if sigma > 0:
        rows, cols = np.mgrid[0:grid_h, 0:grid_w]
    for part, keypoint in enumerate(sample.keypoints):
        if not keypoint.visible:
            continue
        if not (0 <= keypoint.x <= image_w and 0 <= keypoint.y <= image_h):
            raise DataError(
                "image %d: part %d is out of bounds" % (sample.index, part + 1),
                'data.keypoint_bounds', sample.class_id,
            )
        row, col = keypoint_cell(
            keypoint.x, keypoint.y, image_h, image_w, grid_h, grid_w
        )
        if sigma > 0:
            values[part] = np.exp(
                -((rows - row) ** 2 + (cols - col) ** 2) / (2.0 * sigma ** 2)
            )
        else:
            values[part, row, col] = 1.0
    return PartHeatmap(
        values, SOFT_GROUND_TRUTH if sigma > 0 else GROUND_TRUTH
    )


def rasterize_bbox(sample, grid_h, grid_w):
    """
    Two-channel foreground/background map: channel 0 is 1 on cells whose
    center lies inside the box, channel 1 is its complement.
    """
    if sample.bbox is None:
        raise DataError(
            "image %d has no bounding box" % sample.index,
            'data.no_bbox', sample.class_id,
        )
    image_h, image_w = sample.size
    x_min, y_min, x_max, y_max = sample.bbox
    centers_x = (np.arange(grid_w) + 0.5) * image_w / float(grid_w)
    centers_y = (np.arange(grid_h) + 0.5) * image_h / float(grid_h)
    inside_x = (centers_x >= x_min) & (centers_x <= x_max)
    inside_y = (centers_y >= y_min) & (centers_y <= y_max)
    foreground = np.outer(inside_y, inside_x).astype(np.float32)
    return PartHeatmap(
        np.stack([foreground, 1.0 - foreground]), GROUND_TRUTH
    )


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------

def sample_episode(pool, n_way, k_shot, q_query, seed):
    """
    Draw an ``n_way``-way ``k_shot``-shot episode with ``q_query``
    queries per class. `seed` is anything :func:`numpy.random.default_rng`
    accepts; equal seeds give equal episodes.
    """
    needed = k_shot + q_query
    groups = group_by_class(pool)
    eligible = [c for c, members in groups.items() if len(members) >= needed]
    if len(eligible) < n_way:
        deficient = [c for c, members in groups.items()
                     if len(members) < needed]
        if deficient:
            class_id = deficient[0]
            raise DataError(
                "cannot sample a %d-way episode: class %d has %d samples but "
                "%d-shot %d-query needs %d (%d of %d classes eligible)" % (
                    n_way, class_id, len(groups[class_id]), k_shot, q_query,
                    needed, len(eligible), len(groups),
                ),
                'data.episode_class_too_small', class_id,
            )
        raise DataError(
            "cannot sample a %d-way episode from %d classes" % (
                n_way, len(groups)
            ),
            'data.episode_too_few_classes',
        )

    rng = np.random.default_rng(seed)
    chosen = [eligible[i] for i in rng.choice(len(eligible), n_way,
                                              replace=False)]
    support, query = [], []
    for label, class_id in enumerate(chosen):
        members = groups[class_id]
        order = rng.permutation(len(members))
        support.extend((members[i], label) for i in order[:k_shot])
        query.extend((members[i], label) for i in order[k_shot:needed])
    return Episode(
        support=support, query=query, n_way=n_way, k_shot=k_shot,
        q_query=q_query, class_ids=tuple(int(c) for c in chosen),
    )


def step_seed(seed, *keys):
    "Derive a sampling seed for e.g. (epoch, step) from a run seed"
    return np.random.SeedSequence([seed] + [int(k) for k in keys])


# --------------------------------------------------------------------------
# Tensors
# --------------------------------------------------------------------------

def flip_sample(sample):
    "Mirror an image left to right together with its keypoints and box"
    image_h, image_w = sample.size
    keypoints = None
    if sample.keypoints is not None:
        keypoints = tuple(
            Keypoint(image_w - k.x if k.visible else k.x, k.y, k.visible)
            for k in sample.keypoints
        )
    bbox = None
    if sample.bbox is not None:
        x_min, y_min, x_max, y_max = sample.bbox
        bbox = (image_w - x_max, y_min, image_w - x_min, y_max)
    return ImageSample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        class_id=sample.class_id, index=sample.index,
        keypoints=keypoints, bbox=bbox, path=sample.path,
    )


def to_tensor(samples, mean=DEFAULT_MEAN, std=DEFAULT_STD):
    "Stack samples into a normalized N x 3 x H x W float tensor"
    images = np.stack([s.image for s in samples]).astype(np.float32)
    batch = torch.from_numpy(images).permute(0, 3, 1, 2)
    mean = torch.tensor(mean, dtype=batch.dtype).view(1, 3, 1, 1)
    std = torch.tensor(std, dtype=batch.dtype).view(1, 3, 1, 1)
    return (batch - mean) / std


def heatmap_targets(samples, grid_h, grid_w, source='parts', sigma=0.0,
                    num_parts=None):
    """
    Ground-truth heatmaps for a batch as an ``N x M x H x W`` tensor and
    a boolean mask of the samples that carry the needed annotation.
    Unannotated samples get all-zero maps.

    :param source: ``'parts'`` for keypoints, ``'bbox'`` for the
                   foreground/background pair
    """
    channels = 2 if source == 'bbox' else num_parts
    if channels is None:
        channels = max([s.num_parts for s in samples] + [1])
    maps = np.zeros((len(samples), channels, grid_h, grid_w), np.float32)
    mask = np.zeros(len(samples), bool)
    for i, sample in enumerate(samples):
        if source == 'bbox':
            if sample.bbox is None:
                continue
            maps[i] = rasterize_bbox(sample, grid_h, grid_w).values
        else:
            if sample.keypoints is None:
                continue
            values = rasterize_parts(sample, grid_h, grid_w, sigma).values
            if values.shape[0] != channels:
                raise DataError(
                    "image %d has %d parts, expected %d" % (
                        sample.index, values.shape[0], channels
                    ),
                    'data.part_count', sample.class_id,
                )
            maps[i] = values
        mask[i] = True
    return torch.from_numpy(maps), torch.from_numpy(mask)
