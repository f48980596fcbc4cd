# -*- coding: utf-8 -*-
"""
Result tables and figures

Every figure is written twice: as a comma-separated data table with a
header row, and as a PNG rendered from that table.
"""
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .exceptions import EvaluationError  # noqa: E402


plot_logger = logging.getLogger('pose_fewshot.eval')

#: kind -> (file stem, columns, x column, x label)
FIGURES = {
    'shots': (
        'accuracy_vs_shots',
        ('shots', 'mean_accuracy', 'per_class_accuracy', 'ci95', 'n_trials'),
        'shots', 'reference images per class',
    ),
    'pck': (
        'pck', ('threshold', 'accuracy'),
        'threshold', 'threshold (fraction of bbox diagonal)',
    ),
    'fraction': (
        'annotation_fraction',
        ('fraction', 'mean_accuracy', 'per_class_accuracy', 'ci95',
         'n_trials'),
        'fraction', 'annotated fraction of training images',
    ),
}


def write_table(rows, path, columns=None):
    "Write dict rows (or a DataFrame) as CSV; floats keep full precision"
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(
        list(rows), columns=list(columns) if columns else None
    )
    try:
        frame.to_csv(path, index=False)
    except (IOError, OSError) as error:
        raise EvaluationError(
            "cannot write %s: %s" % (path, error), 'plot.unwritable'
        )
    return path


def read_table(path):
    "Read a table written by :func:`write_table` bit-exactly"
    return pd.read_csv(path, float_precision='round_trip')


def _report_rows(key, reports):
    items = reports.items() if isinstance(reports, dict) else \
        [(r.shots, r) for r in reports]
    return [{
        key: x,
        'mean_accuracy': r.mean_accuracy,
        'per_class_accuracy': r.per_class_accuracy,
        'ci95': r.ci95,
        'n_trials': r.n_trials,
    } for x, r in items]


def figure_rows(kind, data):
    """
    Table rows of a figure family:

    ``shots``
        a list of :class:`EvalReport` (or ``{shots: report}``)
    ``pck``
        ``{threshold: accuracy}`` or ``[(threshold, accuracy)]``
    ``fraction``
        ``{fraction: report}``
    """
    if kind == 'shots':
        return _report_rows('shots', data)
    if kind == 'fraction':
        return sorted(_report_rows('fraction', data),
                      key=lambda row: row['fraction'])
    if kind == 'pck':
        items = data.items() if isinstance(data, dict) else data
        return [{'threshold': t, 'accuracy': a} for t, a in sorted(items)]
    raise EvaluationError("unknown figure kind %r" % kind, 'plot.kind')


def _render(kind, frame, path):
    stem, _, x_column, x_label = FIGURES[kind]
    figure, axes = plt.subplots(figsize=(5, 3.5))
    try:
        if kind == 'pck':
            axes.plot(frame['threshold'], frame['accuracy'], marker='o')
            axes.set_ylim(0, 1.02)
            axes.set_ylabel('PCK')
        else:
            x = frame[x_column].astype(str) if kind == 'shots' else \
                frame[x_column] * 100.0
            axes.errorbar(x, frame['mean_accuracy'], yerr=frame['ci95'],
                          marker='o', capsize=3)
            axes.set_ylabel('accuracy (%)')
        axes.set_xlabel(x_label)
        axes.grid(alpha=0.3)
        figure.tight_layout()
        figure.savefig(path, dpi=100)
    finally:
        plt.close(figure)


def emit_plots(kind, data, out_dir):
    """
    Write ``<stem>.csv`` and ``<stem>.png`` of a figure family into
    `out_dir`. Returns both paths.
    """
    rows = figure_rows(kind, data)
    if not rows:
        raise EvaluationError(
            "nothing to plot for %r" % kind, 'plot.empty'
        )
    stem, columns = FIGURES[kind][:2]
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as error:
        raise EvaluationError(
            "cannot create %s: %s" % (out_dir, error), 'plot.unwritable'
        )
    table_path = write_table(
        rows, os.path.join(out_dir, stem + '.csv'), columns
    )
    image_path = os.path.join(out_dir, stem + '.png')
    try:
        _render(kind, read_table(table_path), image_path)
    except (IOError, OSError) as error:
        raise EvaluationError(
            "cannot write %s: %s" % (image_path, error), 'plot.unwritable'
        )
    plot_logger.info("PLOT::%s::%s" % (kind, image_path))
    return table_path, image_path
