# -*- coding: utf-8 -*-
"""
Checkpoint container

A checkpoint is a plain dictionary written with :func:`torch.save`::

    {
        "format": "pose-fewshot-checkpoint",
        "version": 1,
        "arch": "convnet4",
        "config": {...},            # resolved TrainConfig mapping
        "class_ids": [...],         # class id of every classifier row
        "state": {...},             # model state dict
        "pose_frozen": true,
        "pose_fingerprint": "...",  # sha256 of the pose head tensors
        "provenance": {...},
    }

Only tensors and plain python values are stored so files load with
``weights_only=True``.
"""
import logging
import os

import torch

from . import __version__
from .config import TrainConfig
from .exceptions import CheckpointError
from .signals import checkpoint_saved


checkpoint_logger = logging.getLogger('pose_fewshot.checkpoint')

FORMAT = 'pose-fewshot-checkpoint'
VERSION = 1


def checkpoint_payload(model, run_config=None, epoch=None):
    "Build the checkpoint dictionary of a :class:`FewShotModel`"
    provenance = {
        'library_version': __version__,
        'torch_version': str(torch.__version__),
        'epoch': epoch,
        'seed': model.config.seed,
        'config_hash': model.config.fingerprint(),
    }
    if run_config is not None:
        provenance['run_config_hash'] = run_config.fingerprint()
        provenance['preset'] = run_config.preset
    return {
        'format': FORMAT,
        'version': VERSION,
        'arch': model.config.backbone.arch,
        'config': model.config.to_dict(),
        'class_ids': [int(c) for c in model.class_ids],
        'state': model.state_dict(),
        'pose_frozen': bool(model.pose_frozen),
        'pose_fingerprint': model.pose_fingerprint(),
        'provenance': provenance,
    }


def save_checkpoint(path, model, run_config=None, epoch=None):
    """
    Write `model` to `path`. The file is written next to its final name
    first and moved into place, so readers never see partial files.
    """
    payload = checkpoint_payload(model, run_config, epoch)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        partial_path = path + '.partial'
        torch.save(payload, partial_path)
        os.replace(partial_path, path)
    except (IOError, OSError) as error:
        raise CheckpointError(
            "cannot write checkpoint %s: %s" % (path, error),
            'checkpoint.unwritable',
        )
    checkpoint_logger.info(
        "SAVE::%s::epoch=%s::pose_frozen=%s" % (
            path, epoch, payload['pose_frozen']
        )
    )
    checkpoint_saved.send(model, path=path, epoch=epoch)
    return path


def load_checkpoint(path):
    "Read and validate a checkpoint dictionary"
    if not os.path.exists(path):
        raise CheckpointError(
            "checkpoint %s does not exist" % path, 'checkpoint.missing'
        )
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as error:
        raise CheckpointError(
            "cannot read checkpoint %s: %s" % (path, error),
            'checkpoint.unreadable',
        )
    if not isinstance(payload, dict) or payload.get('format') != FORMAT:
        raise CheckpointError(
            "%s is not a pose-fewshot checkpoint" % path,
            'checkpoint.format',
        )
    if payload.get('version') != VERSION:
        raise CheckpointError(
            "%s has checkpoint version %r, this release reads version %d" % (
                path, payload.get('version'), VERSION
            ),
            'checkpoint.version',
        )
    return payload


def load_model(path):
    """
    Rebuild a :class:`FewShotModel` from a checkpoint. A model saved
    after base training comes back with its pose head frozen, and the
    stored fingerprint is verified.
    """
    from .model import FewShotModel

    payload = load_checkpoint(path)
    config = TrainConfig.from_dict(payload['config'])
    # the stored state supersedes any init_from weights
    model = FewShotModel(config.check(), payload['class_ids'])
    try:
        model.load_state_dict(payload['state'])
    except RuntimeError as error:
        raise CheckpointError(
            "checkpoint %s does not match its own config: %s" % (path, error),
            'checkpoint.state',
        )
    if payload['pose_frozen']:
        model.freeze_pose_head()
        if model.pose_fingerprint() != payload['pose_fingerprint']:
            raise CheckpointError(
                "pose head of %s does not match its fingerprint" % path,
                'checkpoint.fingerprint',
            )
    checkpoint_logger.debug(
        "LOAD::%s::arch=%s::classes=%d" % (
            path, payload['arch'], len(payload['class_ids'])
        )
    )
    return model
