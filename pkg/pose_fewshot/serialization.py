# -*- coding: UTF-8 -*-
"""
JSON codec used for evaluation reports, importance tables, resolved
configuration snapshots and checkpoint metadata.

Objects that plain JSON cannot express are written as dictionaries
tagged with ``__class__`` and turned back into objects on load.
"""
import base64
from functools import partial
from pathlib import PurePath

import numpy as np
try:
    import simplejson as json
except ImportError:
    import json


class JSONDecoder(object):

    decoders = {}

    @classmethod
    def register(cls, klass, decoder):
        assert klass not in cls.decoders
        cls.decoders[klass] = decoder

    def __call__(self, dct):
        if dct.get('__class__') in self.decoders:
            return self.decoders[dct['__class__']](dct)
        return dct


def _ndarray_decoder(dct):
    data = base64.b64decode(dct['base64'].encode('utf-8'))
    return np.frombuffer(data, dtype=dct['dtype']).reshape(dct['shape']).copy()


JSONDecoder.register('ndarray', _ndarray_decoder)
JSONDecoder.register('frozenset', lambda dct: frozenset(dct['items']))


def parse_eval_report(dct):
    from .evaluate import EvalReport
    return EvalReport.from_dict(dct)


def parse_importance_table(dct):
    from .evaluate import PartImportanceTable
    return PartImportanceTable.from_dict(dct)


JSONDecoder.register('EvalReport', parse_eval_report)
JSONDecoder.register('PartImportanceTable', parse_importance_table)


class JSONEncoder(json.JSONEncoder):

    serializers = {}

    def __init__(self, *args, **kwargs):
        super(JSONEncoder, self).__init__(*args, **kwargs)
        self.use_decimal = False

    @classmethod
    def register(cls, klass, encoder):
        assert klass not in cls.serializers
        cls.serializers[klass] = encoder

    def default(self, obj):
        for klass in type(obj).__mro__:
            if klass in self.serializers:
                return self.serializers[klass](obj)
        return super(JSONEncoder, self).default(obj)


JSONEncoder.register(
    np.ndarray,
    lambda o: {
        '__class__': 'ndarray',
        'dtype': o.dtype.str,
        'shape': list(o.shape),
        'base64': base64.b64encode(
            np.ascontiguousarray(o).tobytes()
        ).decode('utf-8'),
    })
JSONEncoder.register(np.floating, lambda o: float(o))
JSONEncoder.register(np.integer, lambda o: int(o))
JSONEncoder.register(np.bool_, lambda o: bool(o))
JSONEncoder.register(PurePath, lambda o: str(o))
JSONEncoder.register(
    frozenset,
    lambda o: {
        '__class__': 'frozenset',
        'items': sorted(o),
    })
JSONEncoder.register(set, lambda o: sorted(o))


def register_report_types():
    """
    Teach the encoder about the evaluation result types. Called by
    :mod:`pose_fewshot.evaluate` at import time.
    """
    from .evaluate import EvalReport, PartImportanceTable
    for klass in (EvalReport, PartImportanceTable):
        if klass not in JSONEncoder.serializers:
            JSONEncoder.register(klass, lambda o: o.to_dict())


dumps = partial(json.dumps, cls=JSONEncoder)
loads = partial(json.loads, object_hook=JSONDecoder())
