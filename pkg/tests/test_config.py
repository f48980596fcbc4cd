# -*- coding: utf-8 -*-
"""
Test configuration sections, presets and resolution
"""
import pytest

from pose_fewshot.config import (
    DATA_ROOT_ENV, PRESETS, BackboneConfig, EvalConfig, RunConfig,
    SyntheticConfig, TrainConfig, deep_merge, dump_config, load_config_file,
    parse_override, preset, resolve_config,
)
from pose_fewshot.exceptions import ConfigError


class TestSection(object):

    def test_defaults(self):
        config = TrainConfig()
        assert config.algorithm == 'proto'
        assert config.aggregator == 'pose'
        assert config.num_parts == 15
        assert config.episode.n_way == 20
        assert config.episode.size == 20 * (5 + 15)
        assert config.schedule.total_epochs == 800

    def test_unknown_key_is_an_error(self):
        with pytest.raises(ConfigError) as excinfo:
            TrainConfig.from_dict({'algoritm': 'proto'})
        assert excinfo.value.code == 'config.unknown_key'
        assert 'algoritm' in excinfo.value.message

    def test_unknown_nested_key_is_an_error(self):
        with pytest.raises(ConfigError) as excinfo:
            TrainConfig.from_dict({'episode': {'n_ways': 5}})
        assert excinfo.value.code == 'config.unknown_key'

    @pytest.mark.parametrize("data,code", [
        ({'algorithm': 'maml'}, 'config.bad_choice'),
        ({'episode': {'n_way': 0}}, 'config.out_of_range'),
        ({'num_parts': True}, 'config.bad_value'),
        ({'num_parts': 2.5}, 'config.bad_value'),
        ({'alpha': 'lots'}, 'config.bad_value'),
        ({'alpha': float('nan')}, 'config.bad_value'),
        ({'augment_flip': 'yes'}, 'config.bad_value'),
        ({'episode': 5}, 'config.bad_value'),
    ])
    def test_bad_values(self, data, code):
        with pytest.raises(ConfigError) as excinfo:
            TrainConfig.from_dict(data)
        assert excinfo.value.code == code

    def test_integral_floats_are_accepted(self):
        assert TrainConfig.from_dict({'num_parts': 5.0}).num_parts == 5

    def test_to_dict_round_trip(self):
        config = TrainConfig.from_dict({
            'aggregator': 'upn', 'episode': {'k_shot': 1},
        })
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_changes_track_explicit_values(self):
        config = RunConfig.from_dict({
            'train': {'alpha': 5.0, 'episode': {'n_way': 3}},
        })
        assert config.changes == {
            'train.alpha': 5.0, 'train.episode.n_way': 3,
        }

    def test_no_changes_on_defaults(self):
        assert RunConfig().changes == {}

    def test_replace_returns_a_copy(self):
        config = TrainConfig()
        other = config.replace(seed=3)
        assert other.seed == 3
        assert config.seed == 0

    def test_set_path(self):
        config = RunConfig()
        config.set_path('train.episode.k_shot', 1)
        assert config.train.episode.k_shot == 1

    def test_set_path_unknown_key(self):
        with pytest.raises(ConfigError) as excinfo:
            RunConfig().set_path('train.nothing', 1)
        assert excinfo.value.code == 'config.unknown_key'

    def test_fingerprint_is_stable(self):
        assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
        assert TrainConfig().fingerprint() != \
            TrainConfig(seed=1).fingerprint()


class TestChecks(object):

    def test_bad_tap_point(self):
        config = BackboneConfig(arch='convnet4', tap_point='layer3')
        with pytest.raises(ConfigError) as excinfo:
            config.check()
        assert excinfo.value.code == 'config.bad_tap_point'

    @pytest.mark.parametrize("arch,size,tap", [
        ('convnet4', 84, 'stage2'),
        ('resnet18mod', 224, 'layer3'),
    ])
    def test_architecture_defaults(self, arch, size, tap):
        config = BackboneConfig(arch=arch)
        assert config.image_size == size
        assert config.tap == tap

    @pytest.mark.parametrize("data,code", [
        ({'annotation_fraction': 0.0}, 'config.out_of_range'),
        ({'annotation_fraction': 1.5}, 'config.out_of_range'),
        ({'alpha': 0.0}, 'config.alpha'),
        ({'upn_temperature': 0.0}, 'config.out_of_range'),
        ({'pose_sampling': 'per_class'}, 'config.pose_sampling'),
    ])
    def test_train_checks(self, data, code):
        with pytest.raises(ConfigError) as excinfo:
            TrainConfig.from_dict(data).check()
        assert excinfo.value.code == code

    def test_alpha_may_be_zero_without_pose_loss(self):
        TrainConfig(aggregator='avg', alpha=0.0).check()

    @pytest.mark.parametrize("aggregator,channels", [
        ('pose', 15), ('bbn', 2), ('upn', 7), ('avg', 15),
    ])
    def test_heatmap_channels(self, aggregator, channels):
        config = TrainConfig(aggregator=aggregator, upn_vectors=7)
        assert config.heatmap_channels == channels

    @pytest.mark.parametrize("shots", [('0',), ('two',), ('1', '-5')])
    def test_bad_shots(self, shots):
        with pytest.raises(ConfigError) as excinfo:
            EvalConfig(shots=shots).check()
        assert excinfo.value.code == 'config.bad_value'

    def test_shots_from_yaml_numbers(self):
        assert EvalConfig(shots=[1, 5, 'all']).shots == ('1', '5', 'all')

    def test_synthetic_clutter_range(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(clutter=1.5).check()

    def test_sweep_fraction_range(self):
        with pytest.raises(ConfigError) as excinfo:
            RunConfig(sweep_fractions=[0.5, 0.0]).check()
        assert excinfo.value.code == 'config.out_of_range'


class TestPresets(object):

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_every_preset_resolves(self, name):
        resolve_config(preset_name=name, environ={})

    def test_cub_proto_pn(self):
        config = resolve_config(
            preset_name='cub-proto-pn-convnet4', environ={}
        ).train
        assert config.algorithm == 'proto'
        assert config.aggregator == 'pose'
        assert config.alpha == 100.0
        assert config.schedule.epochs == 600
        assert config.optimizer.weight_decay == 1e-3

    def test_bbn_resnet_schedule(self):
        config = resolve_config(
            preset_name='cub-proto-bbn-resnet18', environ={}
        ).train
        assert config.backbone.arch == 'resnet18mod'
        assert config.optimizer.kind == 'adam'
        assert config.schedule.stages == 5
        assert config.schedule.gamma == 0.5
        assert config.alpha == 10.0

    def test_resnet_alpha(self):
        config = resolve_config(
            preset_name='cub-transfer-pn-resnet18', environ={}
        ).train
        assert config.alpha == 200.0

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as excinfo:
            preset('cub-maml-convnet4')
        assert excinfo.value.code == 'config.unknown_preset'

    def test_preset_is_a_copy(self):
        preset('cub-proto-convnet4')['train']['alpha'] = -1
        assert preset('cub-proto-convnet4')['train']['alpha'] == 100.0


class TestResolution(object):

    def test_precedence(self):
        config = resolve_config(
            {'train': {'alpha': 50.0, 'seed': 4}},
            'cub-proto-pn-convnet4',
            ['train.alpha=7', {'train': {'seed': 9}}],
            environ={},
        )
        assert config.preset == 'cub-proto-pn-convnet4'
        assert config.train.alpha == 7.0
        assert config.train.seed == 9
        # untouched preset values survive
        assert config.train.schedule.epochs == 600

    def test_last_override_wins(self):
        config = resolve_config(
            overrides=['seed=1', 'seed=2'], environ={}
        )
        assert config.seed == 2

    def test_preset_from_file(self):
        config = resolve_config(
            {'preset': 'cub-proto-convnet4'}, environ={}
        )
        assert config.train.aggregator == 'avg'

    def test_data_root_environment(self):
        config = resolve_config(environ={DATA_ROOT_ENV: '/data/cub'})
        assert config.data.root == '/data/cub'

    def test_explicit_data_root_beats_environment(self):
        config = resolve_config(
            {'data': {'root': '/data/mine'}},
            environ={DATA_ROOT_ENV: '/data/cub'},
        )
        assert config.data.root == '/data/mine'

    @pytest.mark.parametrize("text,expected", [
        ('train.alpha=5', {'train': {'alpha': 5}}),
        ('eval.shots=[1, all]', {'eval': {'shots': [1, 'all']}}),
        ('train.augment_flip=true', {'train': {'augment_flip': True}}),
        ('preset=cub-proto-convnet4', {'preset': 'cub-proto-convnet4'}),
    ])
    def test_parse_override(self, text, expected):
        assert parse_override(text) == expected

    @pytest.mark.parametrize("text", ['train.alpha', '=5'])
    def test_bad_override(self, text):
        with pytest.raises(ConfigError) as excinfo:
            parse_override(text)
        assert excinfo.value.code == 'config.bad_override'

    def test_deep_merge(self):
        merged = deep_merge(
            {'a': {'b': 1, 'c': 2}, 'd': 1}, {'a': {'b': 3}, 'd': {'e': 1}}
        )
        assert merged == {'a': {'b': 3, 'c': 2}, 'd': {'e': 1}}


class TestFiles(object):

    def test_snapshot_round_trip(self, tmpdir):
        config = resolve_config(
            preset_name='synthetic-proto-pn-convnet4',
            overrides=['eval.shots=[1, all]'], environ={},
        )
        path = str(tmpdir.join('resolved.yaml'))
        dump_config(config, path)
        assert resolve_config(load_config_file(path), environ={}) == config

    def test_missing_file(self, tmpdir):
        with pytest.raises(ConfigError) as excinfo:
            load_config_file(str(tmpdir.join('nope.yaml')))
        assert excinfo.value.code == 'config.unreadable'

    def test_unparsable_file(self, tmpdir):
        path = tmpdir.join('bad.yaml')
        path.write('train: [unclosed')
        with pytest.raises(ConfigError) as excinfo:
            load_config_file(str(path))
        assert excinfo.value.code == 'config.unparsable'

    def test_file_must_be_a_mapping(self, tmpdir):
        path = tmpdir.join('list.yaml')
        path.write('- 1\n- 2\n')
        with pytest.raises(ConfigError) as excinfo:
            load_config_file(str(path))
        assert excinfo.value.code == 'config.unparsable'

    def test_empty_file(self, tmpdir):
        path = tmpdir.join('empty.yaml')
        path.write('')
        assert load_config_file(str(path)) == {}
