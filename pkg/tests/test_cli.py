# -*- coding: utf-8 -*-
"""
Test the pose-fewshot command line end to end on a tiny synthetic set
"""
import os

import pytest

from pose_fewshot import __version__
from pose_fewshot.cli import run
from pose_fewshot.config import load_config_file
from pose_fewshot.plotting import read_table
from pose_fewshot.serialization import loads


TINY = [
    'data.synthetic.num_classes=8',
    'data.synthetic.images_per_class=6',
    'data.synthetic.num_parts=3',
    'data.synthetic.part_radius=6',
    'data.synthetic.clutter=0.3',
    'train.num_parts=3',
    'train.alpha=10',
    'train.upn_vectors=3',
    'train.optimizer.lr=0.01',
    'train.schedule.epochs=1',
    'train.schedule.stages=1',
    'train.episode.n_way=2',
    'train.episode.k_shot=2',
    'train.episode.q_query=2',
    'train.batch_size=8',
    'train.eval_every=1',
    'eval.n_trials=2',
    'eval.neighbors_k=2',
    'eval.heatmap_dumps=2',
]


def cli(command, out, *extra):
    argv = [command, '--out', out]
    for override in TINY:
        argv.extend(['--set', override])
    return run(argv + list(extra))


@pytest.fixture(autouse=True)
def no_data_root(monkeypatch):
    monkeypatch.delenv('POSE_FEWSHOT_DATA', raising=False)


@pytest.fixture(scope='module')
def trained_dir(tmpdir_factory):
    out = str(tmpdir_factory.mktemp('trained'))
    with pytest.MonkeyPatch.context() as patch:
        patch.delenv('POSE_FEWSHOT_DATA', raising=False)
        assert cli('train', out) == 0
    return out


def read_report(path):
    with open(path) as handle:
        return loads(handle.read())


class TestParser(object):

    def test_version(self, capsys):
        assert run(['--version']) == 0
        assert __version__ in capsys.readouterr().out

    def test_missing_command(self, capsys):
        assert run([]) == 2

    def test_unknown_preset(self, out_dir, capsys):
        assert run(['train', '--out', out_dir, '--preset', 'nope']) == 1
        err = capsys.readouterr().err
        assert 'error code=config.unknown_preset message=' in err

    def test_bad_override(self, out_dir, capsys):
        assert run(['train', '--out', out_dir, '--set', 'train']) == 1
        assert 'error code=config.bad_override' in capsys.readouterr().err


class TestCommands(object):

    def test_synth_gen(self, out_dir):
        assert cli('synth-gen', out_dir) == 0
        for name in ('images.txt', 'parts.txt', 'bounding_boxes.txt',
                     'meta.json', 'resolved_config.yaml'):
            assert os.path.exists(os.path.join(out_dir, name)), name

    def test_train_outputs(self, trained_dir):
        for name in ('checkpoint.pt', 'metrics.csv', 'resolved_config.yaml'):
            assert os.path.exists(os.path.join(trained_dir, name)), name
        snapshot = load_config_file(
            os.path.join(trained_dir, 'resolved_config.yaml')
        )
        assert snapshot['train']['num_parts'] == 3
        assert snapshot['command'] == 'train'
        metrics = read_table(os.path.join(trained_dir, 'metrics.csv'))
        assert list(metrics['split']) == ['train', 'validation']

    def test_eval(self, trained_dir):
        assert cli('eval', trained_dir, '--shots', '1,all') == 0
        one = read_report(os.path.join(trained_dir, 'report-1.json'))
        everything = read_report(os.path.join(trained_dir, 'report-all.json'))
        assert one.n_trials == 2
        assert everything.n_trials == 1
        assert everything.ci95 == 0.0
        assert set(one.per_class) == {3, 7}
        for name in ('accuracy_vs_shots.csv', 'accuracy_vs_shots.png'):
            assert os.path.exists(os.path.join(trained_dir, name)), name

    def test_analyze(self, trained_dir):
        assert cli('analyze', trained_dir) == 0
        pck = read_table(os.path.join(trained_dir, 'pck.csv'))
        assert list(pck.columns) == ['threshold', 'accuracy']
        assert len(pck) == 10
        importance = read_table(
            os.path.join(trained_dir, 'part_importance.csv')
        )
        assert list(importance['class_id']) == [3, 7]
        neighbors = read_table(os.path.join(trained_dir, 'neighbors.csv'))
        # one query per class, three parts, two neighbours
        assert len(neighbors) == 2 * 3 * 2
        assert len(os.listdir(os.path.join(trained_dir, 'heatmaps'))) == 2

    def test_analyze_bounding_box_model(self, out_dir, capsys):
        bbn = ('--set', 'train.aggregator=bbn')
        assert cli('train', out_dir, *bbn) == 0
        assert cli('analyze', out_dir, *bbn) == 0
        assert 'error code=' not in capsys.readouterr().err
        assert not os.path.exists(os.path.join(out_dir, 'pck.csv'))
        assert not os.path.exists(
            os.path.join(out_dir, 'part_importance.csv')
        )
        assert len(os.listdir(os.path.join(out_dir, 'heatmaps'))) == 2

    def test_eval_without_checkpoint(self, out_dir, capsys):
        assert cli('eval', out_dir) == 1
        assert 'error code=checkpoint.missing' in capsys.readouterr().err

    def test_part_count_mismatch(self, out_dir, capsys):
        assert cli('train', out_dir, '--set', 'train.num_parts=4') == 1
        assert 'error code=config.num_parts' in capsys.readouterr().err

    def test_training_is_reproducible(self, trained_dir, out_dir):
        assert cli('train', out_dir) == 0
        with open(os.path.join(trained_dir, 'metrics.csv')) as first, \
                open(os.path.join(out_dir, 'metrics.csv')) as second:
            assert first.read() == second.read()

    def test_runs_are_pooled(self, out_dir):
        assert cli('train', out_dir, '--set', 'train.runs=2') == 0
        for i in range(2):
            assert os.path.exists(
                os.path.join(out_dir, 'run-%d' % i, 'checkpoint.pt')
            )
        assert cli('eval', out_dir, '--set', 'train.runs=2',
                   '--shots', '1') == 0
        report = read_report(os.path.join(out_dir, 'report-1.json'))
        assert report.n_trials == 4

    def test_sweep(self, out_dir):
        assert cli('sweep', out_dir,
                   '--set', 'sweep_fractions=[0.5, 1.0]') == 0
        table = read_table(os.path.join(out_dir, 'annotation_fraction.csv'))
        assert list(table['fraction']) == [0.5, 1.0]
        assert list(table['n_trials']) == [1, 1]
        assert os.path.exists(
            os.path.join(out_dir, 'fraction-0.5', 'report-all.json')
        )
