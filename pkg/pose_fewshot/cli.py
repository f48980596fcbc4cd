# -*- coding: utf-8 -*-
"""
``pose-fewshot`` command line

::

    pose-fewshot synth-gen --out data/synthetic
    pose-fewshot train --preset synthetic-proto-pn-convnet4 --out runs/pn
    pose-fewshot eval --out runs/pn
    pose-fewshot analyze --out runs/pn
    pose-fewshot sweep --preset synthetic-proto-pn-convnet4 --out runs/sweep

Failures print one ``error code=<code> message=<message>`` line on
stderr and exit with status 1.
"""
import argparse
import glob
import logging
import os
import sys

from . import __version__
from .checkpoint import load_model, save_checkpoint
from .config import (
    ANNOTATION_BATCH_SIZES, COMMANDS, dump_config, load_config_file,
    resolve_config,
)
from .datamodel import group_by_class
from .dataset_io import load_dataset, save_dataset
from .evaluate import (
    aggregate_reports, evaluate_repeats, neighbor_rows, part_importance_table,
)
from .exceptions import CheckpointError, ConfigError, Error, EvaluationError
from .learners import MetricsLog, seed_everything, train
from .model import build_model
from .plotting import emit_plots, write_table
from .posehead import dataset_pck, dump_heatmaps, write_pck_table
from .serialization import dumps
from .signals import checkpoint_due, epoch_completed
from .synthetic import gen_synthetic


cli_logger = logging.getLogger('pose_fewshot.cli')

SNAPSHOT = 'resolved_config.yaml'
CHECKPOINT = 'checkpoint.pt'
METRICS = 'metrics.csv'


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML or JSON config file')
    common.add_argument('--preset', help='named preset to start from')
    common.add_argument(
        '--set', dest='overrides', action='append', default=[],
        metavar='KEY=VALUE', help='override a config key (repeatable)',
    )
    common.add_argument('--seed', type=int, help='seed of the run')
    common.add_argument('--out', help='output directory')
    common.add_argument('--data-root', help='dataset directory')
    common.add_argument(
        '-v', '--verbose', action='store_true', help='debug logging'
    )

    parser = argparse.ArgumentParser(
        prog='pose-fewshot',
        description='Pose-normalized few-shot fine-grained recognition',
    )
    parser.add_argument(
        '--version', action='version', version='%(prog)s ' + __version__
    )
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True
    commands.add_parser(
        'synth-gen', parents=[common], help='write a synthetic dataset'
    )
    commands.add_parser('train', parents=[common], help='train a model')
    evaluate = commands.add_parser(
        'eval', parents=[common], help='all-way evaluation'
    )
    evaluate.add_argument('--checkpoint', help='checkpoint to evaluate')
    evaluate.add_argument(
        '--shots', help="comma separated shots, e.g. '1,5,all'"
    )
    analyze = commands.add_parser(
        'analyze', parents=[common],
        help='PCK, part importance, neighbours and heatmaps',
    )
    analyze.add_argument('--checkpoint', help='checkpoint to analyze')
    commands.add_parser(
        'sweep', parents=[common], help='annotation-fraction sweep'
    )
    return parser


def _overrides(args):
    "``--set`` strings, then the dedicated flags as nested mappings"
    overrides = [{'command': args.command}]
    if args.seed is not None:
        overrides.append({
            'seed': args.seed, 'train': {'seed': args.seed},
            'eval': {'seed': args.seed},
        })
    overrides.extend(args.overrides)
    if args.out:
        overrides.append({'paths': {'out_dir': args.out}})
    if args.data_root:
        overrides.append({'data': {'root': args.data_root}})
    if getattr(args, 'checkpoint', None):
        overrides.append({'paths': {'checkpoint': args.checkpoint}})
    if getattr(args, 'shots', None):
        overrides.append({'eval': {
            'shots': [s.strip() for s in args.shots.split(',')]
        }})
    return overrides


def configure_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(
        '%(asctime)s %(levelname)s %(name)s %(message)s'
    ))
    logger = logging.getLogger('pose_fewshot')
    logger.handlers[:] = [handler]
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def load_bundle(run_config):
    "The dataset of a run: a directory when ``data.root`` is set, else synthetic"
    data = run_config.data
    image_size = run_config.train.backbone.image_size
    if data.root:
        return load_dataset(
            data.root, image_size, data.reference_fraction, data.split_seed
        )
    if data.synthetic.image_size != image_size:
        raise ConfigError(
            "synthetic images are %dpx but the %s backbone takes %dpx" % (
                data.synthetic.image_size, run_config.train.backbone.arch,
                image_size,
            ),
            'config.image_size',
        )
    return gen_synthetic(
        data.synthetic, reference_fraction=data.reference_fraction,
        split_seed=data.split_seed,
    )


def _check_parts(run_config, bundle):
    train_config = run_config.train
    if train_config.aggregator in ('pose', 'pose_gt', 'avg_multitask') and \
            train_config.num_parts != bundle.num_parts:
        raise ConfigError(
            "train.num_parts is %d but the dataset has %d parts" % (
                train_config.num_parts, bundle.num_parts
            ),
            'config.num_parts',
        )


def _run_dirs(out_dir, runs):
    if runs == 1:
        return [out_dir]
    return [os.path.join(out_dir, 'run-%d' % i) for i in range(runs)]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def train_model(run_config, bundle, out_dir, train_config, metrics_path=None):
    "Train one model into `out_dir`, writing metrics and checkpoints"
    os.makedirs(out_dir, exist_ok=True)
    seed_everything(train_config.seed)
    model = build_model(train_config, sorted(bundle.split.base))
    metrics = MetricsLog(metrics_path or os.path.join(out_dir, METRICS))

    def periodic_checkpoint(sender, epoch):
        save_checkpoint(
            os.path.join(out_dir, 'checkpoint-epoch%d.pt' % epoch),
            sender, run_config, epoch,
        )

    with epoch_completed.connected_to(metrics.record), \
            checkpoint_due.connected_to(periodic_checkpoint):
        train(model, bundle, train_config)
    save_checkpoint(os.path.join(out_dir, CHECKPOINT), model, run_config)
    return model


def train_runs(run_config, bundle, out_dir, train_config):
    "``train.runs`` models with seeds ``seed, seed + 1, ...``"
    run_dirs = _run_dirs(out_dir, train_config.runs)
    metrics_path = None
    if len(run_dirs) == 1 and out_dir == run_config.paths.out_dir:
        metrics_path = run_config.paths.metrics_log
    return [
        train_model(
            run_config, bundle, run_dir,
            train_config.replace(seed=train_config.seed + i), metrics_path,
        )
        for i, run_dir in enumerate(run_dirs)
    ]


def command_synth_gen(run_config):
    bundle = gen_synthetic(
        run_config.data.synthetic,
        reference_fraction=run_config.data.reference_fraction,
        split_seed=run_config.data.split_seed,
    )
    target = run_config.data.root or run_config.paths.out_dir
    save_dataset(bundle, target)
    cli_logger.info("SYNTH-GEN::%s::images=%d" % (target, len(bundle.samples)))


def command_train(run_config):
    bundle = load_bundle(run_config)
    _check_parts(run_config, bundle)
    train_runs(run_config, bundle, run_config.paths.out_dir, run_config.train)


def _checkpoints(run_config):
    out_dir = run_config.paths.out_dir
    if run_config.paths.checkpoint:
        paths = [run_config.paths.checkpoint]
    else:
        paths = [os.path.join(d, CHECKPOINT)
                 for d in _run_dirs(out_dir, run_config.train.runs)]
        if len(paths) == 1 and not os.path.exists(paths[0]):
            found = sorted(glob.glob(os.path.join(
                out_dir, 'run-*', CHECKPOINT
            )))
            paths = found or paths
    for path in paths:
        if not os.path.exists(path):
            raise CheckpointError(
                "checkpoint %s does not exist; run train first" % path,
                'checkpoint.missing',
            )
    return paths


def _evaluation_sets(run_config, bundle):
    split = run_config.eval.split
    return bundle.refer_for(split), bundle.query_for(split)


def evaluate_models(run_config, models, bundle):
    "``{shots: pooled report}`` over models and evaluation repeats"
    settings = run_config.eval
    refer, query = _evaluation_sets(run_config, bundle)
    reports = {}
    for shots in settings.shots:
        reports[shots] = aggregate_reports([
            evaluate_repeats(
                model, refer, query, shots,
                1 if shots == 'all' else settings.n_trials,
                settings.seed, settings.repeats, settings.batch_size,
            )
            for model in models
        ])
    return reports


def _write_reports(reports, out_dir):
    for shots, report in reports.items():
        with open(os.path.join(out_dir, 'report-%s.json' % shots), 'w') as f:
            f.write(dumps(report, indent=2, sort_keys=True))


def command_eval(run_config):
    bundle = load_bundle(run_config)
    models = [load_model(path) for path in _checkpoints(run_config)]
    reports = evaluate_models(run_config, models, bundle)
    out_dir = run_config.paths.out_dir
    _write_reports(reports, out_dir)
    emit_plots('shots', reports, out_dir)


def command_analyze(run_config):
    bundle = load_bundle(run_config)
    model = load_model(_checkpoints(run_config)[0])
    settings = run_config.eval
    out_dir = run_config.paths.out_dir
    refer, query = _evaluation_sets(run_config, bundle)

    if model.pose_head is not None and model.heatmap_source == 'parts':
        curve = dataset_pck(
            model, query, settings.pck_thresholds, settings.batch_size
        )
        write_pck_table(curve, os.path.join(out_dir, 'pck.csv'))
        emit_plots('pck', curve, out_dir)
    elif model.pose_head is not None:
        cli_logger.info("ANALYZE::skip::pck::bounding box head")
    else:
        cli_logger.info("ANALYZE::skip::pck::no pose head")

    if model.pose_head is not None:
        dump_heatmaps(
            model, query, os.path.join(out_dir, 'heatmaps'),
            settings.heatmap_dumps,
        )

    if model.aggregator.layout in ('pose', 'upn'):
        table = part_importance_table(model, refer, query, settings.seed)
        write_table(
            table.to_frame(), os.path.join(out_dir, 'part_importance.csv')
        )
        queries = [members[0] for members in group_by_class(query).values()]
        rows = neighbor_rows(
            model, queries[:settings.neighbors_queries], refer,
            min(settings.neighbors_k, len(refer)),
        )
        write_table(rows, os.path.join(out_dir, 'neighbors.csv'), columns=(
            'query_index', 'query_class', 'part', 'rank', 'neighbor_index',
            'neighbor_class', 'same_class', 'similarity',
        ))
    else:
        cli_logger.info(
            "ANALYZE::skip::importance::%s" % model.config.aggregator
        )


def command_sweep(run_config):
    bundle = load_bundle(run_config)
    _check_parts(run_config, bundle)
    if not run_config.sweep_fractions:
        raise EvaluationError("the sweep has no fractions", 'plot.empty')
    out_dir = run_config.paths.out_dir
    sweep_config = run_config.replace(
        eval=run_config.eval.replace(shots=('all',)).to_dict()
    )
    by_fraction = {}
    for fraction in run_config.sweep_fractions:
        fraction_dir = os.path.join(out_dir, 'fraction-%g' % fraction)
        train_config = run_config.train.replace(annotation_fraction=fraction)
        if train_config.pose_sampling == 'per_class':
            train_config = train_config.replace(
                pose_batch_per_class=ANNOTATION_BATCH_SIZES.get(
                    fraction, train_config.pose_batch_per_class
                )
            )
        models = train_runs(run_config, bundle, fraction_dir, train_config)
        reports = evaluate_models(sweep_config, models, bundle)
        _write_reports(reports, fraction_dir)
        by_fraction[fraction] = reports['all']
    emit_plots('fraction', by_fraction, out_dir)


HANDLERS = {
    'synth-gen': command_synth_gen,
    'train': command_train,
    'eval': command_eval,
    'analyze': command_analyze,
    'sweep': command_sweep,
}
assert set(HANDLERS) == set(COMMANDS)


def run(argv=None):
    "Run one command and return the process exit code"
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return exit_request.code
    configure_logging(args.verbose)
    try:
        file_data = load_config_file(args.config) if args.config else None
        run_config = resolve_config(
            file_data, args.preset, _overrides(args)
        )
        os.makedirs(run_config.paths.out_dir, exist_ok=True)
        dump_config(run_config, os.path.join(
            run_config.paths.out_dir, SNAPSHOT
        ))
        cli_logger.info(
            "RUN::%s::preset=%s::out=%s" % (
                run_config.command, run_config.preset,
                run_config.paths.out_dir,
            )
        )
        HANDLERS[run_config.command](run_config)
    except Error as error:
        sys.stderr.write(
            "error code=%s message=%s\n" % (
                error.code, str(error).replace('\n', ' ')
            )
        )
        return 1
    except OSError as error:
        sys.stderr.write(
            "error code=io.error message=%s\n" % str(error).replace('\n', ' ')
        )
        return 1
    return 0


def main():
    sys.exit(run())
