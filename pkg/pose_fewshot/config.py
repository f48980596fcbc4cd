# -*- coding: utf-8 -*-
"""
Declarative configuration

Every configurable part of the library is a :class:`Section`: a class
whose attributes are typed field descriptors. Sections are built from
plain mappings (parsed YAML or JSON), reject unknown keys and serialize
back to the fully resolved mapping that is written next to every run.
"""
import copy
import hashlib
import logging
import math
import os

import yaml

from .exceptions import ConfigError
from .serialization import dumps


config_logger = logging.getLogger('pose_fewshot.config')

#: Environment variable that overrides ``data.root``
DATA_ROOT_ENV = 'POSE_FEWSHOT_DATA'


class BaseType(object):
    """
    A descriptor for one configuration value.

    :param cast: callable turning raw values into the field type
    :param default: value used when the key is absent
    :param required: refuse ``None`` once the section is checked
    :param choices: optional collection of allowed values
    :param minimum: optional inclusive lower bound
    """

    def __init__(self, cast, default=None, required=False, choices=None,
                 minimum=None):
        # this will be auto discovered by the meta class
        self.name = None

        self.cast = cast
        self.default = default
        self.required = required
        self.choices = choices
        self.minimum = minimum

    def __get__(self, instance, owner):
        if instance is None:
            return self
        return instance._values.get(self.name, self.default)

    def convert(self, value):
        if value is None:
            return
        if isinstance(value, self.cast):
            return value
        try:
            return self.cast(value)
        except (TypeError, ValueError):
            raise ConfigError(
                "%s: cannot interpret %r as %s" % (
                    self.name, value, self.cast.__name__
                ),
                'config.bad_value',
            )

    def validate(self, value):
        if value is None:
            return value
        if self.choices is not None and value not in self.choices:
            raise ConfigError(
                "%s: %r is not one of %s" % (
                    self.name, value, ', '.join(map(str, self.choices))
                ),
                'config.bad_choice',
            )
        if self.minimum is not None and value < self.minimum:
            raise ConfigError(
                "%s: %r is below the minimum %r" % (
                    self.name, value, self.minimum
                ),
                'config.out_of_range',
            )
        return value

    def __set__(self, instance, value):
        instance._values[self.name] = self.validate(self.convert(value))

    def __delete__(self, instance):
        del instance._values[self.name]

    def dump(self, value):
        return value


class IntType(BaseType):

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('cast', int)
        super(IntType, self).__init__(*args, **kwargs)

    def convert(self, value):
        if isinstance(value, bool):
            raise ConfigError(
                "%s: expected an integer, got %r" % (self.name, value),
                'config.bad_value',
            )
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(
                "%s: expected an integer, got %r" % (self.name, value),
                'config.bad_value',
            )
        return super(IntType, self).convert(value)


class FloatType(BaseType):

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('cast', float)
        super(FloatType, self).__init__(*args, **kwargs)

    def convert(self, value):
        value = super(FloatType, self).convert(value)
        if value is not None and not math.isfinite(value):
            raise ConfigError(
                "%s: value must be finite" % self.name, 'config.bad_value'
            )
        return value


class BooleanType(BaseType):

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('cast', bool)
        super(BooleanType, self).__init__(*args, **kwargs)

    def convert(self, value):
        if value is None or isinstance(value, bool):
            return value
        raise ConfigError(
            "%s: expected true or false, got %r" % (self.name, value),
            'config.bad_value',
        )


class StringType(BaseType):

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('cast', str)
        super(StringType, self).__init__(*args, **kwargs)


class ChoiceType(StringType):

    def __init__(self, choices, *args, **kwargs):
        kwargs['choices'] = tuple(choices)
        super(ChoiceType, self).__init__(*args, **kwargs)


class TupleType(BaseType):
    """
    A homogeneous tuple; lists coming from YAML are converted.
    """

    def __init__(self, item_cast, *args, **kwargs):
        self.item_cast = item_cast
        kwargs.setdefault('cast', tuple)
        super(TupleType, self).__init__(*args, **kwargs)

    def convert(self, value):
        if value is None:
            return
        if isinstance(value, (str, bytes)) or not hasattr(value, '__iter__'):
            value = [value]
        try:
            return tuple(self.item_cast(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(
                "%s: cannot interpret %r as a list of %s" % (
                    self.name, value, self.item_cast.__name__
                ),
                'config.bad_value',
            )

    def validate(self, value):
        if value is not None and self.choices is not None:
            for item in value:
                super(TupleType, self).validate(item)
        return value

    def dump(self, value):
        return list(value) if value is not None else None


class SectionType(BaseType):
    """
    A nested section. Mappings are turned into an instance of
    `section_class`; the default is a fresh instance per owner.
    """

    def __init__(self, section_class, *args, **kwargs):
        self.section_class = section_class
        kwargs.setdefault('cast', section_class)
        super(SectionType, self).__init__(*args, **kwargs)

    def __get__(self, instance, owner):
        if instance is None:
            return self
        if self.name not in instance._values:
            dict.__setitem__(instance._values, self.name, self.section_class())
        return instance._values[self.name]

    def convert(self, value):
        if value is None:
            return self.section_class()
        if isinstance(value, self.section_class):
            return value
        if not isinstance(value, dict):
            raise ConfigError(
                "%s: expected a mapping, got %r" % (self.name, value),
                'config.bad_value',
            )
        return self.section_class.from_dict(value, prefix=self.name)

    def dump(self, value):
        return value.to_dict()


class FieldResolverMetaClass(type):
    """
    A metaclass that discovers field names and keeps their declaration
    order so that resolved snapshots are stable.
    """

    def __new__(cls, classname, bases, class_dict):
        fields = []
        for base in bases:
            for name in getattr(base, '_fields', ()):
                if name not in fields:
                    fields.append(name)

        for name, attr in class_dict.items():
            if isinstance(attr, BaseType):
                attr.name = name
                if name not in fields:
                    fields.append(name)

        class_dict['_fields'] = tuple(fields)
        return type.__new__(cls, classname, bases, class_dict)


class ModificationTrackingDict(dict):
    """
    A change tracking dictionary
    """

    def __init__(self, *args, **kwargs):
        self.changes = set([])
        super(ModificationTrackingDict, self).__init__(*args, **kwargs)

    def __setitem__(self, key, val):
        if key not in self or self[key] != val:
            self.changes.add(key)
        dict.__setitem__(self, key, val)

    def update(self, *args, **kwargs):
        """
        Update does not call __setitem__ by default
        """
        for k, v in dict(*args, **kwargs).items():
            self[k] = v


class Section(object, metaclass=FieldResolverMetaClass):
    """
    Base class of all configuration sections.
    """

    def __init__(self, values=None, **kwargs):
        values = dict(values or {})
        values.update(kwargs)
        self._values = ModificationTrackingDict()
        self._assign(values, prefix=type(self).__name__)

    def _assign(self, values, prefix):
        unknown = sorted(set(values) - set(self._fields))
        if unknown:
            raise ConfigError(
                "unknown key%s %s in %s" % (
                    's' if len(unknown) > 1 else '',
                    ', '.join('%s.%s' % (prefix, k) for k in unknown),
                    prefix,
                ),
                'config.unknown_key',
            )
        for name, value in values.items():
            setattr(self, name, value)

    @classmethod
    def from_dict(cls, data, prefix=None):
        "Build a section from a mapping, refusing unknown keys"
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(
                "%s: expected a mapping, got %r" % (prefix or cls.__name__, data),
                'config.bad_value',
            )
        section = cls.__new__(cls)
        section._values = ModificationTrackingDict()
        section._assign(data, prefix=prefix or cls.__name__)
        return section

    def to_dict(self):
        "Return the fully resolved mapping, defaults included"
        rv = {}
        for name in self._fields:
            rv[name] = self._field(name).dump(getattr(self, name))
        return rv

    @classmethod
    def _field(cls, name):
        for klass in cls.__mro__:
            if name in klass.__dict__:
                return klass.__dict__[name]
        raise KeyError(name)

    @property
    def changes(self):
        """
        Return the explicitly set values, with dotted keys for nested
        sections
        """
        rv = {}
        for name in self._fields:
            value = self._values.get(name)
            if isinstance(value, Section):
                for key, sub in value.changes.items():
                    rv['%s.%s' % (name, key)] = sub
            elif name in self._values.changes:
                rv[name] = value
        return rv

    def replace(self, **kwargs):
        "Return a copy with the given fields replaced"
        data = self.to_dict()
        data.update(kwargs)
        return type(self).from_dict(data)

    def set_path(self, dotted, value):
        "Set a possibly nested value from a dotted key"
        head, _, rest = dotted.partition('.')
        if head not in self._fields:
            raise ConfigError(
                "unknown key %s in %s" % (dotted, type(self).__name__),
                'config.unknown_key',
            )
        if rest:
            target = getattr(self, head)
            if not isinstance(target, Section):
                raise ConfigError(
                    "%s is not a section" % head, 'config.unknown_key'
                )
            target.set_path(rest, value)
        else:
            setattr(self, head, value)

    def check(self):
        """
        Validate cross-field constraints. Subclasses extend this;
        nested sections are checked recursively.
        """
        for name in self._fields:
            field = self._field(name)
            value = getattr(self, name)
            if isinstance(value, Section):
                value.check()
            elif field.required and value is None:
                raise ConfigError(
                    "%s.%s is required" % (type(self).__name__, name),
                    'config.missing',
                )
        return self

    def fingerprint(self):
        "SHA-256 of the canonical JSON form of the resolved mapping"
        blob = dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(blob.encode('utf-8')).hexdigest()

    def __eq__(self, other):
        if type(other) is not type(self):
            return False
        return self.to_dict() == other.to_dict()

    def __repr__(self):
        return '<%s %s>' % (type(self).__name__, self.to_dict())


# --------------------------------------------------------------------------
# Sections
# --------------------------------------------------------------------------

#: arch -> (default input size, default tap point, valid tap points)
ARCHITECTURES = {
    'convnet4': (84, 'stage2', ('stage1', 'stage2', 'stage3', 'stage4')),
    'resnet18mod': (224, 'layer3', ('layer1', 'layer2', 'layer3', 'layer4')),
}

ALGORITHMS = ('transfer', 'proto', 'dynamic')
AGGREGATORS = (
    'avg', 'pose', 'pose_gt', 'bilinear', 'upn', 'bbn', 'avg_multitask'
)
#: aggregators that train the pose head with the part-location loss
POSE_LOSS_AGGREGATORS = ('pose', 'bbn', 'avg_multitask')

#: annotation-fraction grid and the per-class pose batch size for each
ANNOTATION_BATCH_SIZES = {
    0.05: 1, 0.1: 5, 0.2: 7, 0.3: 10, 0.4: 15, 0.5: 15,
    0.6: 15, 0.7: 15, 0.8: 17, 0.9: 20, 1.0: 20,
}
ANNOTATION_FRACTIONS = tuple(sorted(ANNOTATION_BATCH_SIZES))


class BackboneConfig(Section):
    arch = ChoiceType(ARCHITECTURES, default='convnet4')
    input_size = IntType(minimum=8)
    tap_point = StringType()
    #: library checkpoint whose backbone weights initialise training
    init_from = StringType()

    @property
    def image_size(self):
        return self.input_size or ARCHITECTURES[self.arch][0]

    @property
    def tap(self):
        return self.tap_point or ARCHITECTURES[self.arch][1]

    def check(self):
        valid = ARCHITECTURES[self.arch][2]
        if self.tap not in valid:
            raise ConfigError(
                "tap point %r is not a layer of %s (valid: %s)" % (
                    self.tap, self.arch, ', '.join(valid)
                ),
                'config.bad_tap_point',
            )
        return super(BackboneConfig, self).check()


class EpisodeConfig(Section):
    n_way = IntType(default=20, minimum=1)
    k_shot = IntType(default=5, minimum=1)
    q_query = IntType(default=15, minimum=1)

    @property
    def size(self):
        return self.n_way * (self.k_shot + self.q_query)


class OptimizerConfig(Section):
    kind = ChoiceType(('sgd', 'adam'), default='sgd')
    lr = FloatType(default=0.1, minimum=0.0)
    momentum = FloatType(default=0.9, minimum=0.0)
    weight_decay = FloatType(default=5e-4, minimum=0.0)


class ScheduleConfig(Section):
    #: epochs per stage
    epochs = IntType(default=400, minimum=0)
    stages = IntType(default=2, minimum=1)
    gamma = FloatType(default=0.1, minimum=0.0)

    @property
    def total_epochs(self):
        return self.epochs * self.stages


class FinetuneConfig(Section):
    epochs = IntType(default=40, minimum=0)
    lr = FloatType(default=0.001, minimum=0.0)
    batch_size = IntType(default=16, minimum=1)
    #: epochs of the per-trial refit in 1/5-shot evaluation
    trial_epochs = IntType(default=10, minimum=0)


class DynamicConfig(Section):
    epochs = IntType(default=200, minimum=0)
    lr = FloatType(default=0.001, minimum=0.0)
    fake_novel = IntType(default=16, minimum=1)
    fake_base = IntType(default=4, minimum=0)
    images_per_class = IntType(default=20, minimum=2)
    shots = IntType(default=5, minimum=1)
    classifier = ChoiceType(('cosine', 'dot'), default='cosine')
    steps_per_epoch = IntType(default=10, minimum=1)


class TrainConfig(Section):
    algorithm = ChoiceType(ALGORITHMS, default='proto')
    aggregator = ChoiceType(AGGREGATORS, default='pose')
    num_parts = IntType(default=15, minimum=1)
    alpha = FloatType(default=100.0, minimum=0.0)
    pose_hidden = IntType(minimum=1)
    backbone = SectionType(BackboneConfig)
    optimizer = SectionType(OptimizerConfig)
    schedule = SectionType(ScheduleConfig)
    episode = SectionType(EpisodeConfig)
    batch_size = IntType(default=64, minimum=1)
    finetune = SectionType(FinetuneConfig)
    dynamic = SectionType(DynamicConfig)
    annotation_fraction = FloatType(default=1.0)
    pose_sampling = ChoiceType(('episode', 'per_class'), default='episode')
    pose_batch_per_class = IntType(default=0, minimum=0)
    pose_batch_size = IntType(default=400, minimum=1)
    heatmap_sigma = FloatType(default=0.0, minimum=0.0)
    upn_vectors = IntType(default=15, minimum=1)
    upn_temperature = FloatType(default=1.0)
    eval_every = IntType(default=20, minimum=0)
    checkpoint_every = IntType(default=0, minimum=0)
    augment_flip = BooleanType(default=False)
    runs = IntType(default=1, minimum=1)
    seed = IntType(default=0, minimum=0)

    @property
    def uses_pose_loss(self):
        return self.aggregator in POSE_LOSS_AGGREGATORS

    @property
    def heatmap_channels(self):
        "Channels of the pose head (and of m*) for this aggregator"
        if self.aggregator == 'bbn':
            return 2
        if self.aggregator == 'upn':
            return self.upn_vectors
        return self.num_parts

    def check(self):
        if not 0.0 < self.annotation_fraction <= 1.0:
            raise ConfigError(
                "annotation_fraction must be in (0, 1], got %r" % (
                    self.annotation_fraction,
                ),
                'config.out_of_range',
            )
        if self.uses_pose_loss and self.alpha <= 0:
            raise ConfigError(
                "alpha must be > 0 when the %s aggregator trains a pose "
                "loss" % self.aggregator,
                'config.alpha',
            )
        if self.upn_temperature <= 0:
            raise ConfigError(
                "upn_temperature must be > 0", 'config.out_of_range'
            )
        if self.pose_sampling == 'per_class' and not self.pose_batch_per_class:
            raise ConfigError(
                "pose_sampling 'per_class' needs pose_batch_per_class > 0",
                'config.pose_sampling',
            )
        return super(TrainConfig, self).check()


class EvalConfig(Section):
    shots = TupleType(str, default=('1', '5', 'all'))
    n_trials = IntType(default=600, minimum=1)
    repeats = IntType(default=1, minimum=1)
    split = ChoiceType(('novel', 'validation'), default='novel')
    batch_size = IntType(default=64, minimum=1)
    pck_thresholds = TupleType(
        float, default=tuple(round(0.05 * i, 2) for i in range(1, 11))
    )
    neighbors_k = IntType(default=5, minimum=1)
    neighbors_queries = IntType(default=5, minimum=0)
    heatmap_dumps = IntType(default=4, minimum=0)
    seed = IntType(default=0, minimum=0)

    def check(self):
        for shot in self.shots:
            if shot != 'all' and not (shot.isdigit() and int(shot) > 0):
                raise ConfigError(
                    "shots must be positive integers or 'all', got %r" % shot,
                    'config.bad_value',
                )
        return super(EvalConfig, self).check()


class SyntheticConfig(Section):
    num_classes = IntType(default=40, minimum=1)
    images_per_class = IntType(default=30, minimum=2)
    num_parts = IntType(default=5, minimum=1)
    image_size = IntType(default=84, minimum=16)
    clutter = FloatType(default=0.5, minimum=0.0)
    part_radius = IntType(default=7, minimum=2)
    part_absent_prob = FloatType(default=0.0, minimum=0.0)
    shared_layouts = BooleanType(default=False)
    single_part = BooleanType(default=False)
    placement_retries = IntType(default=200, minimum=1)
    seed = IntType(default=0, minimum=0)

    def check(self):
        if self.clutter > 1.0 or self.part_absent_prob >= 1.0:
            raise ConfigError(
                "clutter must be in [0, 1] and part_absent_prob in [0, 1)",
                'config.out_of_range',
            )
        return super(SyntheticConfig, self).check()


class DataConfig(Section):
    #: dataset directory; empty means "generate synthetic data in memory"
    root = StringType()
    reference_fraction = FloatType(default=0.2)
    split_seed = IntType(default=0, minimum=0)
    synthetic = SectionType(SyntheticConfig)

    def check(self):
        if not 0.0 < self.reference_fraction < 1.0:
            raise ConfigError(
                "reference_fraction must be in (0, 1)", 'config.out_of_range'
            )
        return super(DataConfig, self).check()


class PathsConfig(Section):
    out_dir = StringType(default='runs/latest')
    checkpoint = StringType()
    metrics_log = StringType()


COMMANDS = ('synth-gen', 'train', 'eval', 'analyze', 'sweep')


class RunConfig(Section):
    command = ChoiceType(COMMANDS, default='train')
    preset = StringType()
    seed = IntType(default=0, minimum=0)
    data = SectionType(DataConfig)
    paths = SectionType(PathsConfig)
    train = SectionType(TrainConfig)
    eval = SectionType(EvalConfig)
    sweep_fractions = TupleType(float, default=ANNOTATION_FRACTIONS)

    def check(self):
        for fraction in self.sweep_fractions:
            if not 0.0 < fraction <= 1.0:
                raise ConfigError(
                    "sweep fractions must be in (0, 1], got %r" % fraction,
                    'config.out_of_range',
                )
        return super(RunConfig, self).check()


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

#: published CUB schedules: name -> (convnet4 row, resnet18 row) where a
#: row is (optimizer, lr, gamma, epochs per stage, stages, weight decay)
CUB_SCHEDULES = {
    'transfer': (('sgd', 0.1, 0.1, 200, 2, 5e-4),
                 ('sgd', 0.1, 0.1, 100, 2, 1e-3)),
    'transfer-pn': (('sgd', 0.1, 0.1, 200, 2, 5e-4),
                    ('sgd', 0.1, 0.1, 100, 2, 1e-3)),
    'transfer-pn_gt': (('sgd', 0.1, 0.1, 200, 2, 5e-4),
                       ('sgd', 0.1, 0.1, 100, 2, 1e-3)),
    'proto': (('sgd', 0.1, 0.1, 400, 2, 5e-4),
              ('sgd', 0.1, 0.1, 300, 2, 1e-3)),
    'proto-mt': (('sgd', 0.1, 0.1, 600, 2, 1e-3),
                 ('sgd', 0.1, 0.1, 300, 2, 5e-3)),
    'proto-bp': (('adam', 0.001, 1.0, 800, 1, 0.0),
                 ('adam', 0.001, 1.0, 600, 1, 1e-3)),
    'proto-bbn': (('sgd', 0.01, 0.1, 400, 2, 5e-4),
                  ('adam', 0.1, 0.5, 160, 5, 0.0)),
    'proto-upn': (('sgd', 0.1, 0.1, 600, 2, 1e-3),
                  ('sgd', 0.1, 0.1, 200, 2, 5e-3)),
    'proto-pn': (('sgd', 0.1, 0.1, 600, 2, 1e-3),
                 ('sgd', 0.1, 0.1, 300, 2, 5e-3)),
    'proto-pn_gt': (('sgd', 0.1, 0.1, 400, 2, 5e-4),
                    ('sgd', 0.1, 0.1, 300, 2, 5e-3)),
    'dynamic': (('sgd', 0.1, 0.1, 200, 2, 5e-4),
                ('sgd', 0.1, 0.1, 100, 2, 1e-3)),
    'dynamic-pn': (('sgd', 0.1, 0.1, 100, 2, 5e-4),
                   ('sgd', 0.1, 0.1, 25, 3, 1e-3)),
    'dynamic-pn_gt': (('sgd', 0.1, 0.1, 50, 2, 5e-4),
                      ('sgd', 0.1, 0.1, 25, 3, 1e-3)),
}

FGVC_SCHEDULES = {
    'proto': (('sgd', 0.1, 0.1, 500, 2, 1e-3),
              ('sgd', 0.1, 0.1, 300, 2, 1e-3)),
    'proto-pn': (('sgd', 0.1, 0.1, 500, 2, 1e-3),
                 ('sgd', 0.1, 0.1, 300, 2, 5e-3)),
}

AGGREGATOR_SUFFIXES = {
    '': 'avg', 'pn': 'pose', 'pn_gt': 'pose_gt', 'mt': 'avg_multitask',
    'bp': 'bilinear', 'upn': 'upn', 'bbn': 'bbn',
}
BACKBONE_SUFFIXES = (('convnet4', 'convnet4'), ('resnet18', 'resnet18mod'))


def _alpha_for(aggregator, arch, dataset):
    if aggregator == 'bbn':
        return 10.0
    if dataset == 'fgvc':
        return 50.0
    return 100.0 if arch == 'convnet4' else 200.0


def _schedule_preset(dataset, key, row, arch):
    optimizer, lr, gamma, epochs, stages, weight_decay = row
    algorithm, _, suffix = key.partition('-')
    aggregator = AGGREGATOR_SUFFIXES[suffix]
    train = {
        'algorithm': algorithm,
        'aggregator': aggregator,
        'backbone': {'arch': arch},
        'optimizer': {
            'kind': optimizer, 'lr': lr, 'weight_decay': weight_decay,
        },
        'schedule': {'epochs': epochs, 'stages': stages, 'gamma': gamma},
        'alpha': _alpha_for(aggregator, arch, dataset),
    }
    if aggregator in ('pose', 'pose_gt', 'avg_multitask'):
        train['num_parts'] = 15
    if dataset == 'fgvc':
        train['eval_every'] = 40
        if aggregator == 'pose':
            # pose supervision comes from a disjoint, part-annotated set
            train['pose_batch_size'] = 400
    return {'train': train}


def _build_presets():
    presets = {}
    for dataset, table in (('cub', CUB_SCHEDULES), ('fgvc', FGVC_SCHEDULES)):
        for key, rows in table.items():
            for (suffix, arch), row in zip(BACKBONE_SUFFIXES, rows):
                name = '%s-%s-%s' % (dataset, key, suffix)
                presets[name] = _schedule_preset(dataset, key, row, arch)

    # desk-scale presets on the synthetic benchmark
    for key in CUB_SCHEDULES:
        algorithm, _, suffix = key.partition('-')
        aggregator = AGGREGATOR_SUFFIXES[suffix]
        train = {
            'algorithm': algorithm,
            'aggregator': aggregator,
            'num_parts': 5,
            'alpha': 10.0 if aggregator == 'bbn' else 100.0,
            'backbone': {'arch': 'convnet4'},
            'optimizer': {'kind': 'sgd', 'lr': 0.05, 'weight_decay': 5e-4},
            'schedule': {'epochs': 20, 'stages': 2, 'gamma': 0.1},
            'episode': {'n_way': 10, 'k_shot': 5, 'q_query': 10},
            'batch_size': 64,
            'eval_every': 10,
            'upn_vectors': 5,
            'finetune': {'epochs': 40, 'trial_epochs': 10},
            'dynamic': {
                'epochs': 40, 'fake_novel': 8, 'fake_base': 4,
                'images_per_class': 20, 'shots': 5,
            },
        }
        if aggregator == 'bilinear':
            train['optimizer'] = {
                'kind': 'adam', 'lr': 0.001, 'weight_decay': 0.0
            }
            train['schedule'] = {'epochs': 40, 'stages': 1, 'gamma': 1.0}
        presets['synthetic-%s-convnet4' % key] = {
            'data': {'synthetic': {
                'num_classes': 40, 'images_per_class': 30, 'num_parts': 5,
            }},
            'train': train,
            'eval': {'n_trials': 100},
        }
    return presets


PRESETS = _build_presets()


def preset(name):
    "Return a deep copy of a named preset"
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(
            "unknown preset %r" % name, 'config.unknown_preset'
        )


# --------------------------------------------------------------------------
# Resolution
# --------------------------------------------------------------------------

def deep_merge(base, override):
    "Merge `override` into a copy of `base`; nested mappings merge, the rest replaces"
    rv = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(rv.get(key), dict):
            rv[key] = deep_merge(rv[key], value)
        else:
            rv[key] = copy.deepcopy(value)
    return rv


def load_config_file(path):
    "Parse a YAML (or JSON) config file into a mapping"
    try:
        with open(path) as config_file:
            data = yaml.safe_load(config_file)
    except (IOError, OSError) as error:
        raise ConfigError(
            "cannot read config file %s: %s" % (path, error),
            'config.unreadable',
        )
    except yaml.YAMLError as error:
        raise ConfigError(
            "cannot parse config file %s: %s" % (path, error),
            'config.unparsable',
        )
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(
            "config file %s must contain a mapping" % path,
            'config.unparsable',
        )
    return data


def parse_override(text):
    """
    Turn ``a.b.c=value`` into a nested mapping. The value is parsed as
    a YAML scalar so numbers, booleans and lists keep their types.
    """
    key, sep, raw = text.partition('=')
    if not sep or not key:
        raise ConfigError(
            "override %r is not of the form KEY=VALUE" % text,
            'config.bad_override',
        )
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    rv = value
    for part in reversed(key.strip().split('.')):
        rv = {part: rv}
    return rv


def resolve_config(file_data=None, preset_name=None, overrides=(),
                   environ=None):
    """
    Resolve a :class:`RunConfig`.

    Precedence, lowest first: section defaults, the preset (from the
    argument or the file's ``preset`` key), the config file, then each
    override in order (last wins). Overrides are ``KEY=VALUE`` strings
    or nested mappings. The data-root
    environment variable applies only when no layer set ``data.root``.
    """
    file_data = dict(file_data or {})
    environ = os.environ if environ is None else environ

    name = preset_name or file_data.get('preset')
    merged = {}
    if name:
        merged = deep_merge(merged, preset(name))
        merged['preset'] = name
    merged = deep_merge(merged, file_data)
    if preset_name:
        merged['preset'] = preset_name
    for override in overrides:
        if not isinstance(override, dict):
            override = parse_override(override)
        merged = deep_merge(merged, override)

    run_config = RunConfig.from_dict(merged)
    if not run_config.data.root and environ.get(DATA_ROOT_ENV):
        run_config.data.root = environ[DATA_ROOT_ENV]
    run_config.check()

    if run_config.changes:
        config_logger.debug(
            "CONFIG::explicit::%s" % sorted(run_config.changes)
        )
    return run_config


def dump_config(run_config, path):
    "Write the resolved configuration snapshot"
    with open(path, 'w') as snapshot:
        yaml.safe_dump(run_config.to_dict(), snapshot, sort_keys=False)
