# -*- coding: utf-8 -*-
"""
Reading and writing datasets in a CUB-like directory layout.

``images.txt``
    one line per image: ``<relative_path> <class_id>``. The 1-based line
    number is the image index used by the other files.
``parts.txt`` (optional)
    ``<image_index> <part_id> <x> <y> <visible{0,1}>`` with part ids
    ``1..M``.
``bounding_boxes.txt`` (optional)
    ``<image_index> <x_min> <y_min> <width> <height>``.
``meta.json`` (optional)
    ``{"format_version": 1, "num_parts": M}``.

Synthetic datasets are written in the same layout, so downstream code
does not care where its data came from.
"""
import logging
import os

import numpy as np
from PIL import Image

from .datamodel import ImageSample, Keypoint, bundle_from_samples
from .exceptions import DataError
from .serialization import dumps, loads


data_logger = logging.getLogger('pose_fewshot.data')

IMAGE_LIST = 'images.txt'
PART_FILE = 'parts.txt'
BBOX_FILE = 'bounding_boxes.txt'
META_FILE = 'meta.json'
FORMAT_VERSION = 1


def _rows(path, width, name):
    if not os.path.exists(path):
        return
    with open(path) as lines:
        for number, line in enumerate(lines, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != width:
                raise DataError(
                    "%s line %d: expected %d fields, got %d" % (
                        name, number, width, len(fields)
                    ),
                    'data.file_format',
                )
            yield number, fields


def _read_image(path, image_size):
    try:
        with Image.open(path) as handle:
            image = handle.convert('RGB')
            original = image.size
            if image_size and image.size != (image_size, image_size):
                image = image.resize(
                    (image_size, image_size), Image.BILINEAR
                )
            pixels = np.asarray(image, dtype=np.float32) / 255.0
    except (IOError, OSError) as error:
        raise DataError(
            "cannot read image %s: %s" % (path, error), 'data.image_read'
        )
    return pixels, original


def load_samples(root, image_size=None):
    """
    Read every image of a dataset directory as :class:`ImageSample`.

    Images are resized to ``image_size x image_size`` when given; part
    keypoints and boxes are rescaled with them.
    """
    meta = {}
    meta_path = os.path.join(root, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path) as meta_file:
            meta = loads(meta_file.read())
        if meta.get('format_version', FORMAT_VERSION) > FORMAT_VERSION:
            raise DataError(
                "%s was written by a newer format version %s" % (
                    root, meta['format_version']
                ),
                'data.format_version',
            )

    entries = []
    for number, (relative_path, class_id) in _rows(
            os.path.join(root, IMAGE_LIST), 2, IMAGE_LIST):
        entries.append((relative_path, int(class_id)))
    if not entries:
        raise DataError(
            "no images listed in %s" % os.path.join(root, IMAGE_LIST),
            'data.empty_dataset',
        )

    parts = {}
    for number, fields in _rows(os.path.join(root, PART_FILE), 5, PART_FILE):
        image_index, part_id = int(fields[0]), int(fields[1])
        x, y, visible = float(fields[2]), float(fields[3]), int(fields[4])
        if not 1 <= image_index <= len(entries) or part_id < 1:
            raise DataError(
                "%s line %d: bad image index or part id" % (PART_FILE, number),
                'data.file_format',
            )
        parts.setdefault(image_index, {})[part_id] = (x, y, bool(visible))

    boxes = {}
    for number, fields in _rows(os.path.join(root, BBOX_FILE), 5, BBOX_FILE):
        image_index = int(fields[0])
        x_min, y_min, width, height = map(float, fields[1:])
        boxes[image_index] = (x_min, y_min, x_min + width, y_min + height)

    num_parts = meta.get('num_parts') or max(
        [max(p) for p in parts.values()] + [0]
    )

    samples = []
    for position, (relative_path, class_id) in enumerate(entries):
        image_index = position + 1
        pixels, (width, height) = _read_image(
            os.path.join(root, relative_path), image_size
        )
        scale_x = pixels.shape[1] / float(width)
        scale_y = pixels.shape[0] / float(height)

        keypoints = None
        if image_index in parts:
            annotated = parts[image_index]
            keypoints = tuple(
                Keypoint(
                    annotated[p][0] * scale_x, annotated[p][1] * scale_y,
                    annotated[p][2],
                ) if p in annotated else Keypoint(0.0, 0.0, False)
                for p in range(1, num_parts + 1)
            )
        bbox = None
        if image_index in boxes:
            x_min, y_min, x_max, y_max = boxes[image_index]
            bbox = (
                max(0.0, x_min * scale_x), max(0.0, y_min * scale_y),
                min(float(pixels.shape[1]), x_max * scale_x),
                min(float(pixels.shape[0]), y_max * scale_y),
            )
        samples.append(ImageSample(
            image=pixels, class_id=class_id, index=position,
            keypoints=keypoints, bbox=bbox, path=relative_path,
        ))
    data_logger.info(
        "LOAD::%s::images=%d::parts=%d" % (root, len(samples), num_parts)
    )
    return samples, num_parts


def load_dataset(root, image_size=None, reference_fraction=0.2, seed=0):
    "Read a dataset directory and split it into a :class:`DatasetBundle`"
    samples, num_parts = load_samples(root, image_size)
    return bundle_from_samples(samples, num_parts, reference_fraction, seed)


def save_dataset(bundle, root):
    """
    Write every sample of a bundle into `root`. Images are stored as
    8-bit PNG files; sample indices become 1-based image indices.
    """
    samples = sorted(bundle.samples, key=lambda s: s.index)
    if [s.index for s in samples] != list(range(len(samples))):
        raise DataError(
            "sample indices must be 0..N-1 to be written", 'data.indices'
        )
    os.makedirs(os.path.join(root, 'images'), exist_ok=True)

    image_lines, part_lines, bbox_lines = [], [], []
    for sample in samples:
        image_index = sample.index + 1
        relative_path = os.path.join(
            'images', '%03d' % sample.class_id, '%06d.png' % image_index
        )
        target = os.path.join(root, relative_path)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        Image.fromarray(
            np.round(sample.image * 255.0).astype(np.uint8)
        ).save(target)
        image_lines.append('%s %d' % (relative_path, sample.class_id))

        for part_id, keypoint in enumerate(sample.keypoints or (), 1):
            part_lines.append('%d %d %r %r %d' % (
                image_index, part_id, float(keypoint.x), float(keypoint.y),
                int(keypoint.visible),
            ))
        if sample.bbox is not None:
            x_min, y_min, x_max, y_max = map(float, sample.bbox)
            bbox_lines.append('%d %r %r %r %r' % (
                image_index, x_min, y_min, x_max - x_min, y_max - y_min
            ))

    for name, lines in ((IMAGE_LIST, image_lines), (PART_FILE, part_lines),
                        (BBOX_FILE, bbox_lines)):
        with open(os.path.join(root, name), 'w') as handle:
            handle.write('\n'.join(lines) + ('\n' if lines else ''))
    with open(os.path.join(root, META_FILE), 'w') as handle:
        handle.write(dumps({
            'format_version': FORMAT_VERSION,
            'num_parts': bundle.num_parts,
        }, indent=2))
    data_logger.info("SAVE::%s::images=%d" % (root, len(samples)))
    return root
