# -*- coding: utf-8 -*-
"""
Synthetic part-annotated benchmark

Every class is a fixed assignment of (color, shape, texture) attributes
to M parts. An image scatters the parts at random non-overlapping
positions over a gray, procedurally cluttered background, so class
identity lives only in the parts and nowhere else.
"""
import itertools
import logging

import numpy as np

from .config import SyntheticConfig
from .datamodel import ImageSample, Keypoint, bundle_from_samples
from .exceptions import DataError, PlacementError


data_logger = logging.getLogger('pose_fewshot.data')

PALETTE = np.array([
    (0.90, 0.10, 0.10),
    (0.10, 0.75, 0.15),
    (0.15, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
    (1.00, 0.55, 0.05),
    (0.55, 0.25, 0.05),
], dtype=np.float64)
SHAPES = ('disk', 'square', 'diamond', 'ring')
TEXTURES = ('solid', 'stripes', 'checker')

#: every (color, shape, texture) combination a part can take
ATTRIBUTES = tuple(itertools.product(
    range(len(PALETTE)), range(len(SHAPES)), range(len(TEXTURES))
))

# textured pixels use this fraction of the part's color
SHADE = 0.35


def random_class_attributes(num_classes, num_parts, seed):
    """
    Draw a distinct attribute assignment for every class.

    Returns a list (one per class) of `num_parts` attribute tuples.
    """
    rng = np.random.default_rng([seed, 7])
    classes, seen = [], set()
    while len(classes) < num_classes:
        picks = rng.integers(len(ATTRIBUTES), size=num_parts)
        key = tuple(int(p) for p in picks)
        if key in seen:
            continue
        seen.add(key)
        classes.append([ATTRIBUTES[p] for p in key])
    return classes


def single_part_classes(num_classes, num_parts, seed):
    """
    Classes that differ from one shared template in exactly one part:
    class ``c`` changes part ``c mod M``. Returns the attribute lists
    and, per class, the index of its discriminative part.
    """
    rng = np.random.default_rng([seed, 11])
    template = [ATTRIBUTES[int(i)]
                for i in rng.integers(len(ATTRIBUTES), size=num_parts)]
    variants = num_classes // num_parts + 1
    if variants >= len(ATTRIBUTES):
        raise DataError(
            "too many classes for single-part variation", 'data.synthetic'
        )
    classes, parts = [], []
    for class_id in range(num_classes):
        part = class_id % num_parts
        alternatives = [a for a in ATTRIBUTES if a != template[part]]
        order = np.random.default_rng([seed, 13, part]).permutation(
            len(alternatives)
        )
        attributes = list(template)
        attributes[part] = alternatives[order[class_id // num_parts]]
        classes.append(attributes)
        parts.append(part)
    return classes, parts


def _background(rng, size, clutter):
    # low-frequency gray field plus gray clutter strokes
    coarse = rng.random((size // 12 + 2, size // 12 + 2))
    field = np.kron(coarse, np.ones((12, 12)))[:size, :size]
    gray = 0.40 + 0.20 * field * clutter + 0.1 * rng.random()
    canvas = np.repeat(gray[:, :, None], 3, axis=2)

    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(int(round(12 * clutter))):
        tone = rng.uniform(0.15, 0.85)
        if rng.random() < 0.5:
            x0, y0 = rng.integers(0, size, size=2)
            w, h = rng.integers(2, max(3, size // 6), size=2)
            canvas[y0:y0 + h, x0:x0 + w] = tone
        else:
            x0, y0, x1, y1 = rng.uniform(0, size, size=4)
            length = max(np.hypot(x1 - x0, y1 - y0), 1e-6)
            distance = np.abs(
                (y1 - y0) * (cols + 0.5) - (x1 - x0) * (rows + 0.5)
                + x1 * y0 - y1 * x0
            ) / length
            along = ((cols + 0.5 - x0) * (x1 - x0)
                     + (rows + 0.5 - y0) * (y1 - y0)) / length ** 2
            canvas[(distance < 0.8) & (along >= 0) & (along <= 1)] = tone
    noise = rng.normal(0.0, 0.03 * clutter, size=(size, size, 1))
    return np.clip(canvas + noise, 0.0, 1.0)


def part_mask(shape, rows, cols, cx, cy, radius):
    "Boolean mask of a part shape centred at (cx, cy)"
    dx = cols + 0.5 - cx
    dy = rows + 0.5 - cy
    if shape == 'disk':
        return dx ** 2 + dy ** 2 <= radius ** 2
    if shape == 'square':
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * radius
    if shape == 'diamond':
        return np.abs(dx) + np.abs(dy) <= radius
    if shape == 'ring':
        d2 = dx ** 2 + dy ** 2
        return (d2 <= radius ** 2) & (d2 >= (0.55 * radius) ** 2)
    raise DataError("unknown shape %r" % shape, 'data.synthetic')


def _texture(texture, rows, cols):
    if texture == 'solid':
        return np.ones(rows.shape, bool)
    if texture == 'stripes':
        return (cols // 2) % 2 == 0
    return ((rows // 2) + (cols // 2)) % 2 == 0


def _place(rng, num_parts, size, radius, retries, index):
    lo, hi = radius + 1, size - radius - 1
    if hi <= lo:
        raise PlacementError(
            "part radius %d does not fit a %dpx image" % (radius, size),
            'data.placement',
        )
    centers = []
    for part in range(num_parts):
        for _ in range(retries):
            x, y = rng.integers(lo, hi, size=2) + 0.5
            if all(np.hypot(x - px, y - py) >= 2 * radius + 2
                   for px, py in centers):
                centers.append((float(x), float(y)))
                break
        else:
            raise PlacementError(
                "image %d: could not place part %d without overlap in %d "
                "attempts" % (index, part + 1, retries),
                'data.placement',
            )
    return centers


def render_image(attributes, rng, config, index):
    """
    Render one image. Returns the uint8 image, the keypoints and the
    tight box around the visible parts. The layout draws from `rng`
    only, never from `attributes`.
    """
    size, radius = config.image_size, config.part_radius
    centers = _place(
        rng, len(attributes), size, radius, config.placement_retries, index
    )
    present = rng.random(len(attributes)) >= config.part_absent_prob
    if not present.any():
        present[0] = True
    canvas = _background(rng, size, config.clutter)

    rows, cols = np.mgrid[0:size, 0:size]
    keypoints = []
    for (color, shape, texture), (cx, cy), shown in zip(
            attributes, centers, present):
        if not shown:
            keypoints.append(Keypoint(0.0, 0.0, False))
            continue
        mask = part_mask(SHAPES[shape], rows, cols, cx, cy, radius)
        bright = _texture(TEXTURES[texture], rows, cols)
        rgb = PALETTE[color]
        canvas[mask & bright] = rgb
        canvas[mask & ~bright] = rgb * SHADE
        keypoints.append(Keypoint(cx, cy, True))

    visible = [(k.x, k.y) for k in keypoints if k.visible]
    xs = [x for x, _ in visible]
    ys = [y for _, y in visible]
    bbox = (
        max(0.0, min(xs) - radius), max(0.0, min(ys) - radius),
        min(float(size), max(xs) + radius), min(float(size), max(ys) + radius),
    )
    image = np.round(canvas * 255.0).astype(np.uint8)
    return image, tuple(keypoints), bbox


def gen_synthetic(config=None, seed=None, class_attributes=None,
                  reference_fraction=0.2, split_seed=None):
    """
    Generate a :class:`DatasetBundle` of synthetic part-annotated images.

    :param config: a :class:`SyntheticConfig`
    :param seed: overrides ``config.seed``
    :param class_attributes: explicit per-class attribute lists; by
                             default drawn at random (or single-part
                             variants when ``config.single_part``)
    :param reference_fraction: share of each held-out class that goes to
                               the reference set
    """
    config = config or SyntheticConfig()
    config.check()
    seed = config.seed if seed is None else seed
    split_seed = seed if split_seed is None else split_seed

    if class_attributes is None:
        if config.single_part:
            class_attributes, _ = single_part_classes(
                config.num_classes, config.num_parts, seed
            )
        else:
            class_attributes = random_class_attributes(
                config.num_classes, config.num_parts, seed
            )
    if len(class_attributes) != config.num_classes or any(
            len(a) != config.num_parts for a in class_attributes):
        raise DataError(
            "class attributes must cover %d classes x %d parts" % (
                config.num_classes, config.num_parts
            ),
            'data.synthetic',
        )

    samples = []
    for class_id, attributes in enumerate(class_attributes):
        for slot in range(config.images_per_class):
            index = class_id * config.images_per_class + slot
            if config.shared_layouts:
                rng = np.random.default_rng([seed, slot])
            else:
                rng = np.random.default_rng([seed, class_id, slot])
            image, keypoints, bbox = render_image(
                attributes, rng, config, index
            )
            samples.append(ImageSample(
                image=image.astype(np.float32) / 255.0,
                class_id=class_id, index=index,
                keypoints=keypoints, bbox=bbox,
            ))
    data_logger.info(
        "SYNTHETIC::classes=%d::images=%d::parts=%d" % (
            config.num_classes, len(samples), config.num_parts
        )
    )
    return bundle_from_samples(
        samples, config.num_parts, reference_fraction, split_seed
    )
