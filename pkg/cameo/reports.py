# -*- coding: utf-8 -*-
'''
Metrics CSV files, summary tables and SVG plots.

Plots are written with a fixed SVG hash salt and without date metadata so
rerunning a report reproduces the files byte for byte.
'''

# Standard library imports
import csv
import logging
import math
import os

# Third party imports
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

# Local imports
from .errors import MetricsError
from .probe import BINS
from .utils import format_float, load_json, output_dir

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    'iter', 'loss_denoise', 'loss_cameo', 'precision_supervised_layer',
)
SUMMARY_COLUMNS = (
    'arm', 'final_iter', 'loss_denoise', 'loss_cameo',
    'precision_supervised_layer', 'best_precision',
)
SVG_SALT = 'cameo'


def write_metrics(rows, path, arm=None):
    '''Write metric rows as CSV with a fixed column order.

    Arguments:
        rows (list): dicts keyed by METRIC_COLUMNS (plus "arm")
        path (str): output file
        arm (str): arm label written as a leading column for every row
    '''

    columns = list(METRIC_COLUMNS)
    if arm is not None or (rows and 'arm' in rows[0]):
        columns.insert(0, 'arm')
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            values = []
            for column in columns:
                if column == 'arm':
                    values.append(row.get('arm', arm))
                elif column == 'iter':
                    values.append(str(int(row['iter'])))
                else:
                    values.append(format_float(row.get(column)))
            writer.writerow(values)
    return path


def _parse_float(text, path, line):
    if text == '':
        return None
    try:
        return float(text)
    except ValueError:
        raise MetricsError('{}:{}: not a number: {!r}'.format(path, line, text))


def read_metrics(path, arm=None):
    '''Read a metrics CSV.

    Returns:
        dict: arm label -> list of rows in file order
    '''

    if not os.path.isfile(path):
        raise MetricsError('no metrics file at {}'.format(path))
    arm = arm or os.path.splitext(os.path.basename(path))[0]
    with open(path, 'r', newline='') as f:
        rows = list(csv.reader(f))
    if not rows:
        raise MetricsError('{} is empty'.format(path))

    header = rows[0]
    missing = [c for c in METRIC_COLUMNS if c not in header]
    if missing:
        raise MetricsError('{} lacks columns {}'.format(path, missing))
    if len(rows) < 2:
        raise MetricsError('{} holds no metric rows'.format(path))

    arms = {}
    for line, values in enumerate(rows[1:], start=2):
        if len(values) != len(header):
            raise MetricsError('{}:{}: expected {} fields, got {}'.format(
                path, line, len(header), len(values)))
        record = dict(zip(header, values))
        try:
            row = dict(iter=int(record['iter']))
        except ValueError:
            raise MetricsError('{}:{}: bad iteration {!r}'.format(
                path, line, record['iter']))
        for column in METRIC_COLUMNS[1:]:
            row[column] = _parse_float(record[column], path, line)
        arms.setdefault(record.get('arm') or arm, []).append(row)
    return arms


def read_reports(paths):
    '''Load PrecisionReport JSON files keyed by file stem.'''

    reports = {}
    for path in paths:
        try:
            data = load_json(path)
        except (IOError, OSError, ValueError) as e:
            raise MetricsError('Failed to read {}: {}'.format(path, e))
        if 'per_bin' not in data or 'overall' not in data:
            raise MetricsError('{} is not a precision report'.format(path))
        reports[os.path.splitext(os.path.basename(path))[0]] = data
    return reports


def _series(rows, column):
    points = [(r['iter'], r[column]) for r in rows if r.get(column) is not None]
    return [p[0] for p in points], [p[1] for p in points]


def _save(fig, path):
    with matplotlib.rc_context({'svg.hashsalt': SVG_SALT}):
        fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path


def plot_curves(arms, columns, path, title=None):
    '''Line chart of metric columns vs iteration, one curve per arm and one
    panel per column.'''

    fig, axes = plt.subplots(1, len(columns), figsize=(5 * len(columns), 3.6),
                             squeeze=False)
    for ax, column in zip(axes[0], columns):
        for label in sorted(arms):
            x, y = _series(arms[label], column)
            if x:
                ax.plot(x, y, label=label, linewidth=1.4)
        ax.set_xlabel('iteration')
        ax.set_ylabel(column)
        ax.grid(True, alpha=0.3)
        ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_bins(reports, path):
    '''Grouped bar chart of per-bin precision, one group per report.'''

    labels = [label for label, _, _ in BINS]
    names = sorted(reports)
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for n, name in enumerate(names):
        per_bin = reports[name]['per_bin']
        values = [per_bin.get(label, 0.0) for label in labels]
        ax.bar([i + n * width for i in range(len(labels))], values, width,
               label=name)
    ax.set_xticks([i + width * (len(names) - 1) / 2.0 for i in range(len(labels))])
    ax.set_xticklabels(labels)
    ax.set_xlabel('relative rotation (deg)')
    ax.set_ylabel('precision')
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def summarize(arms):
    '''One summary row per arm, in SUMMARY_COLUMNS order.'''

    summary = []
    for label in sorted(arms):
        rows = arms[label]
        last = rows[-1]
        _, precision = _series(rows, 'precision_supervised_layer')
        _, final_precision = _series(rows[-1:], 'precision_supervised_layer')
        summary.append(dict(
            arm=label,
            final_iter=last['iter'],
            loss_denoise=last['loss_denoise'],
            loss_cameo=last['loss_cameo'],
            precision_supervised_layer=(
                final_precision[0] if final_precision else None),
            best_precision=max(precision) if precision else None,
        ))
    return summary


def write_summary(summary, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SUMMARY_COLUMNS)
        for row in summary:
            writer.writerow([
                row[c] if c == 'arm' else (
                    str(row[c]) if c == 'final_iter' else format_float(row[c]))
                for c in SUMMARY_COLUMNS
            ])
    return path


def cmd_report(metrics_paths, outdir, report_paths=(), labels=None):
    '''Plot and tabulate metrics files.

    Every input is read and validated before anything is written.

    Arguments:
        metrics_paths (list): metrics CSV files
        outdir (str): output folder
        report_paths (list): optional PrecisionReport JSON files for bins.svg
        labels (list): arm labels for files without an arm column

    Returns:
        list of written paths
    '''

    if not metrics_paths:
        raise MetricsError('no metrics files given')
    labels = list(labels or [])
    arms = {}
    for n, path in enumerate(metrics_paths):
        label = labels[n] if n < len(labels) else None
        for arm, rows in read_metrics(path, label).items():
            if arm in arms:
                raise MetricsError('arm {!r} appears twice'.format(arm))
            arms[arm] = rows
    reports = read_reports(report_paths)

    written = []
    with output_dir(outdir):
        written.append(plot_curves(
            arms, ['loss_denoise', 'precision_supervised_layer'],
            os.path.join(outdir, 'curves.svg'),
        ))
        written.append(plot_curves(
            arms, ['loss_denoise', 'loss_cameo'],
            os.path.join(outdir, 'loss.svg'),
        ))
        written.append(plot_curves(
            arms, ['precision_supervised_layer'],
            os.path.join(outdir, 'precision.svg'),
        ))
        if reports:
            written.append(plot_bins(reports, os.path.join(outdir, 'bins.svg')))
        written.append(write_summary(
            summarize(arms), os.path.join(outdir, 'summary.csv')))
    log.info('Wrote %d report files to %s', len(written), outdir)
    return written


def write_report_csv(report, path):
    '''Per-bin table of a PrecisionReport.'''

    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(('bin', 'precision', 'pairs'))
        for label, _, _ in BINS:
            if label in report.per_bin:
                writer.writerow((label, format_float(report.per_bin[label]),
                                 report.bin_counts.get(label, 0)))
        writer.writerow(('overall', format_float(report.overall),
                         report.pairs_evaluated))
    return path


def checkpoint_medians(per_checkpoint):
    '''Median precision per checkpoint iteration.

    Arguments:
        per_checkpoint (dict): iteration -> list of per-pair precisions
    '''

    return {
        iteration: float(np.median(values))
        for iteration, values in sorted(per_checkpoint.items()) if len(values)
    }


def is_monotone(values, slack=0.0):
    '''True when values never drop by more than slack.'''

    values = list(values)
    return all(b >= a - slack for a, b in zip(values, values[1:])
               if not (math.isnan(a) or math.isnan(b)))
