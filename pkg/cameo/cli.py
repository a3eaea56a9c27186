# -*- coding: utf-8 -*-
'''
Command line interface.

    cameo synth    --scenes N --views F --spread-deg D --res H W --out DIR
    cameo corr     --scene DIR --tokens h w --tau 1.5 --out DIR
    cameo train    --data DIR --lambda 0.02 --tau 1.5 --iters N --out DIR
    cameo sample   --checkpoint DIR --scene DIR --steps 50 --cfg 2.0 --out DIR
    cameo probe    --pairs MANIFEST --source attention --out report.json
    cameo perturb  --checkpoint DIR --layer l --scene DIR --out DIR
    cameo report   METRICS [METRICS ...] --out DIR
    cameo pipeline --preset tiny --seed 0

Exit codes: 0 success, 2 configuration error, 3 stage failure.
'''

# Standard library imports
import argparse
import logging
import os
import sys

# Third party imports
import numpy as np

# Local imports
from . import config
from . import lib
from .attention import CrossViewAttention
from .correspondence import correspondence_set, mask_coverage, token_grid
from .dataset import pointmap_of
from .errors import CameoError, ConfigError
from .models import RunConfig, SceneRecord
from .pipeline import (
    cmd_pipeline,
    model_config,
    scene_spec,
    stage,
    train_config,
)
from .probe import (
    METRICS,
    SOURCES,
    EvalPair,
    attention_pairs,
    evaluate_pairs,
    layer_maps,
    layer_sweep,
)
from .reports import cmd_report, plot_bins, write_report_csv
from .scene import Pointmap, generate_scene_set
from .tensors import load_tensor, make_rng, save_tensor
from .training import perturbation_effect, sample, train
from .utils import dump_json, load_json, output_dir, setup_logging

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def merge(base, other):
    '''Recursively merge mapping other into base.'''

    for key, value in other.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            merge(base[key], value)
        else:
            base[key] = value
    return base


def load_params(args, default_preset=None):
    '''Preset values, overridden by --config, as a plain dict.'''

    params = {}
    preset = getattr(args, 'preset', None) or default_preset
    if preset:
        params = lib.load_preset(preset)
    if args.config:
        merge(params, lib.load_config_file(args.config))
    return params


def set_values(params, section, **values):
    '''Write the flags that were given into params[section].'''

    target = params.setdefault(section, {}) if section else params
    for key, value in values.items():
        if value is not None:
            target[key] = value
    return params


def scene_dirs(path):
    '''A scene folder or a folder of scene folders.'''

    if os.path.isfile(os.path.join(path, 'scene.json')):
        return [path]
    dirs = lib.get_scene_dirs(path)
    if not dirs:
        raise ConfigError('no scenes found in {}'.format(path))
    return dirs


def load_dataset(path, h, w, tau=None, method=None):
    '''SceneData for every scene below path, in name order.'''

    return [
        SceneRecord.load(scene).to_scene_data(h, w, tau, method)
        for scene in scene_dirs(path)
    ]


def save_run(args, params):
    return RunConfig(
        command=args.command,
        seed=args.seed,
        out=args.out or '',
        precision=config.precision,
        threads=config.threads,
        params=params,
    ).save(args.out)


def cmd_synth(args):
    params = load_params(args)
    set_values(
        params, None,
        scenes=args.scenes,
        views=args.views,
        spread_deg=args.spread_deg,
        res=args.res,
    )
    channels = args.channels or params.get('model', {}).get('channels', 4)
    spec = scene_spec(params)
    if not args.out:
        raise ConfigError('synth needs --out')

    with output_dir(args.out):
        with stage('synth'):
            scenes = generate_scene_set(spec, make_rng(args.seed, 10))
            for scene in scenes:
                SceneRecord.gather(scene, spec.res, channels).export(
                    os.path.join(args.out, scene.name))
        save_run(args, params)
    log.info('Wrote %d scenes to %s', len(scenes), args.out)


def _pointmap_grids(paths, h, w):
    grids = []
    for path in paths:
        values = load_tensor(path)
        if values.ndim != 3 or values.shape[-1] != 3:
            raise ConfigError('{} is not an H x W x 3 pointmap'.format(path))
        grids.append(token_grid(Pointmap(values.astype(np.float64)), h, w))
    return grids


def cmd_corr(args):
    params = load_params(args)
    h, w = args.tokens
    tau = config.tau if args.tau is None else args.tau
    method = args.method or config.nn_method
    set_values(params, 'corr', tokens=[h, w], tau=tau, method=method)
    if not args.out:
        raise ConfigError('corr needs --out')
    if not (args.scene or args.pointmaps):
        raise ConfigError('corr needs --scene or --pointmaps')

    with output_dir(args.out):
        with stage('corr'):
            if args.pointmaps:
                grids = _pointmap_grids(args.pointmaps, h, w)
                corrs = correspondence_set(grids, tau, method)
                lib.save_correspondence(corrs, args.out)
                coverage = mask_coverage(corrs)
            else:
                dirs = scene_dirs(args.scene)
                every = []
                for path in dirs:
                    record = SceneRecord.load(path)
                    grids = [token_grid(pm, h, w) for pm in record.pointmaps()]
                    corrs = correspondence_set(grids, tau, method)
                    outdir = args.out
                    if len(dirs) > 1:
                        outdir = os.path.join(args.out, record.name)
                    lib.save_correspondence(corrs, outdir)
                    every.extend(corrs)
                coverage = mask_coverage(every)
        save_run(args, params)
    log.info('Mask coverage %.3f', coverage)


def cmd_train(args):
    params = load_params(args)
    set_values(
        params, 'train',
        loss_weight=args.loss_weight,
        tau=args.tau,
        iterations=args.iters,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        loss_type=args.loss_type,
        eval_every=args.eval_every,
        log_every=args.log_every,
    )
    set_values(
        params, 'model',
        head_mode=args.head_mode,
        target=args.target,
        supervised_layer=args.layer,
    )
    if not (args.data and args.out):
        raise ConfigError('train needs --data and --out')

    mc = model_config(params)
    tc = train_config(params, args.seed, precision=config.precision)
    with output_dir(args.out):
        with stage('train'):
            dataset = load_dataset(args.data, mc.h, mc.w, tc.tau)
            eval_set = [d for d in dataset if d.name.startswith('eval_')]
            dataset = [d for d in dataset if not d.name.startswith('eval_')]
            if args.eval_data:
                eval_set = load_dataset(args.eval_data, mc.h, mc.w, tc.tau)
            if dataset and dataset[0].views != mc.views:
                params['model']['views'] = dataset[0].views
                mc = model_config(params)
            train(dataset, tc, mc, args.out, eval_set or None)
        save_run(args, params)


def cmd_sample(args):
    params = load_params(args)
    set_values(
        params, 'sample',
        steps=args.steps,
        cfg_weight=args.cfg,
        references=args.references,
    )
    if not (args.checkpoint and args.scene and args.out):
        raise ConfigError('sample needs --checkpoint, --scene and --out')

    model, sched, _ = lib.load_checkpoint(args.checkpoint)
    c = model.config
    with output_dir(args.out):
        with stage('sample'):
            data = SceneRecord.load(args.scene).to_scene_data(c.h, c.w)
            references = {
                view: data.latents[view] for view in args.references
                if 0 <= view < data.views
            }
            if len(references) != len(set(args.references)):
                raise ConfigError('reference views {} out of range'.format(
                    args.references))
            latents = sample((model, sched), data.cameras, references,
                             args.steps, args.cfg, args.seed)
            for view, latent in enumerate(latents):
                save_tensor(lib.view_path(args.out, view, 'sample'),
                            latent.reshape(c.h, c.w, c.channels))
        save_run(args, params)


def _resolve(root, path):
    if path is None or os.path.isabs(path):
        return path
    return os.path.join(root, path)


def manifest_pairs(path):
    '''EvalPairs listed in a JSON manifest.

    The manifest holds a list of entries (or {"pairs": [...]}) with keys
    theta, geom_a, geom_b and optionally feat_a, feat_b, attention, pair,
    name. File entries are TensorFile paths relative to the manifest:
    pointmaps are H x W x 3, features h x w x d and attention n x m row
    stochastic maps.
    '''

    try:
        data = load_json(path)
    except (IOError, OSError, ValueError) as e:
        raise ConfigError('Failed to read {}: {}'.format(path, e))
    entries = data.get('pairs', []) if isinstance(data, dict) else data
    if not entries:
        raise ConfigError('{} lists no pairs'.format(path))

    root = os.path.dirname(os.path.abspath(path))

    def tensor(entry, key):
        file = _resolve(root, entry.get(key))
        return None if file is None else load_tensor(file).astype(np.float64)

    pairs = []
    for entry in entries:
        missing = [k for k in ('theta', 'geom_a', 'geom_b') if k not in entry]
        if missing:
            raise ConfigError('manifest entry lacks {}'.format(missing))
        pair = tuple(entry.get('pair', (0, 1)))
        probs = tensor(entry, 'attention')
        pairs.append(EvalPair(
            theta=float(entry['theta']),
            geom_a=Pointmap(tensor(entry, 'geom_a')),
            geom_b=Pointmap(tensor(entry, 'geom_b')),
            feat_a=tensor(entry, 'feat_a'),
            feat_b=tensor(entry, 'feat_b'),
            attention=None if probs is None else CrossViewAttention(pair, probs),
            pair=pair,
            name=entry.get('name', ''),
        ))
    return pairs


def scene_pairs(dataset):
    '''EvalPairs of every ordered view pair whose features are the
    ground-truth token coordinates.'''

    pairs = []
    for data in dataset:
        maps = [pointmap_of(grid) for grid in data.grids]
        for (i, j) in sorted(data.thetas):
            pairs.append(EvalPair(
                theta=data.thetas[(i, j)],
                geom_a=maps[i],
                geom_b=maps[j],
                feat_a=maps[i].values,
                feat_b=maps[j].values,
                pair=(i, j),
                name=data.name,
            ))
    return pairs


def cmd_probe(args):
    params = load_params(args)
    set_values(
        params, 'probe',
        source=args.source,
        metric=args.metric,
        topk=args.topk,
        rho=args.rho,
        resize_grid=args.resize_grid,
        layer=args.layer,
        sweep=args.sweep or None,
    )
    if not args.out:
        raise ConfigError('probe needs --out')
    if not (args.pairs or args.data):
        raise ConfigError('probe needs --pairs or --data')
    if args.source == 'attention' and args.data and not args.checkpoint:
        raise ConfigError('probing attention of scenes needs --checkpoint')

    outdir = os.path.dirname(os.path.abspath(args.out))
    stem = os.path.splitext(args.out)[0]
    with output_dir(outdir):
        with stage('probe'):
            model = None
            if args.checkpoint:
                model, _, _ = lib.load_checkpoint(args.checkpoint)

            if args.sweep:
                if model is None or not args.data:
                    raise ConfigError('--sweep needs --checkpoint and --data')
                c = model.config
                dataset = load_dataset(args.data, c.h, c.w)
                reports = layer_sweep(model, dataset, k=args.topk, rho=args.rho,
                                      t=args.t)
                dump_json(dict(layers=[r.to_dict() for r in reports]), args.out)
                for layer, report in enumerate(reports):
                    write_report_csv(report, '{}.block{}.csv'.format(stem, layer))
                report = None
            else:
                if args.pairs:
                    pairs = manifest_pairs(args.pairs)
                elif args.source == 'attention':
                    c = model.config
                    dataset = load_dataset(args.data, c.h, c.w)
                    pairs = attention_pairs(model, dataset, args.layer, t=args.t)
                else:
                    h, w = args.tokens
                    pairs = scene_pairs(load_dataset(args.data, h, w))
                report = evaluate_pairs(
                    pairs, args.source, args.metric, args.topk, args.rho,
                    args.resize_grid, threads=config.threads,
                )
                dump_json(report.to_dict(), args.out)
                write_report_csv(report, stem + '.csv')
                if args.svg:
                    plot_bins({os.path.basename(stem): report.to_dict()},
                              stem + '.svg')
        RunConfig(args.command, args.seed, args.out, config.precision,
                  config.threads, params).save(outdir)
    if report is not None:
        log.info('Precision@%g: %.4f over %d pairs', report.rho,
                 report.overall, report.pairs_evaluated)


def cmd_perturb(args):
    params = load_params(args)
    set_values(params, 'perturb', layer=args.layer, topk=args.topk, rho=args.rho)
    if not (args.checkpoint and args.scene and args.out):
        raise ConfigError('perturb needs --checkpoint, --scene and --out')

    model, _, manifest = lib.load_checkpoint(args.checkpoint)
    c = model.config
    layer = c.supervised_layer if args.layer is None else args.layer
    if not 0 <= layer < c.blocks:
        raise ConfigError('layer {} out of range for {} blocks'.format(
            layer, c.blocks))
    tau = args.tau or manifest.get('train', {}).get('tau')
    loss_type = manifest.get('train', {}).get('loss_type', 'CE')

    with output_dir(args.out):
        with stage('perturb'):
            dataset = load_dataset(args.scene, c.h, c.w, tau)
            for data in dataset:
                outdir = args.out
                if len(dataset) > 1:
                    outdir = os.path.join(args.out, data.name)
                    os.makedirs(outdir, exist_ok=True)
                clean = layer_maps(model, data, layer)
                perturbed = layer_maps(model, data, layer, perturb=True)
                for (i, j) in sorted(clean):
                    save_tensor(lib.pair_path(outdir, 'attn', i, j),
                                clean[(i, j)].probs)
                    save_tensor(lib.pair_path(outdir, 'perturbed', i, j),
                                perturbed[(i, j)].probs)
            rows = perturbation_effect(model, dataset, layer, k=args.topk,
                                       rho=args.rho, loss_type=loss_type,
                                       seed=args.seed)
            dump_json(dict(layer=layer, pairs=rows),
                      os.path.join(args.out, 'effect.json'))
        save_run(args, params)

    dropped = sum(r['precision_perturbed'] < r['precision'] for r in rows)
    log.info('Perturbation lowered precision in %d of %d pairs',
             dropped, len(rows))
    if rows:
        log.info('Denoise MSE %.5f -> %.5f with block %d perturbed',
                 sum(r['denoise'] for r in rows) / len(rows),
                 sum(r['denoise_perturbed'] for r in rows) / len(rows), layer)


def cmd_report_args(args):
    if not args.out:
        raise ConfigError('report needs --out')
    params = set_values(
        load_params(args), 'report',
        metrics=args.metrics, reports=args.reports, labels=args.labels)
    with stage('report'):
        cmd_report(args.metrics, args.out, args.reports or (), args.labels)
    save_run(args, params)


def cmd_pipeline_args(args):
    preset = args.preset or 'tiny'
    params = load_params(args, preset)
    out = args.out or '{}_seed{}'.format(preset, args.seed)
    cmd_pipeline(params, out, args.seed, config.threads, config.precision)
    log.info('Experiment written to %s', out)


def _global_options():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--seed', type=int, default=config.seed,
                        help='run seed (default %(default)s)')
    parser.add_argument('--threads', type=int, default=None,
                        help='worker thread cap, CAMEO_THREADS wins')
    parser.add_argument('--precision', type=int, choices=(32, 64), default=None,
                        help='float width in bits')
    parser.add_argument('--config', default=None, metavar='FILE.yml',
                        help='YAML file overriding preset values')
    parser.add_argument('--preset', default=None,
                        help='preset name, one of {}'.format(
                            ', '.join(lib.get_presets()) or 'none'))
    parser.add_argument('--out', default=None, help='output path')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true')
    verbosity.add_argument('-q', '--quiet', action='store_true')
    return parser


def build_parser():
    common = _global_options()
    parser = argparse.ArgumentParser(
        prog='cameo',
        description='Correspondence-attention alignment toolkit.',
    )
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    p = commands.add_parser('synth', parents=[common],
                            help='generate synthetic multi-view scenes')
    p.add_argument('--scenes', type=int)
    p.add_argument('--views', type=int)
    p.add_argument('--spread-deg', dest='spread_deg', type=float)
    p.add_argument('--res', type=int, nargs=2, metavar=('H', 'W'))
    p.add_argument('--channels', type=int)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser('corr', parents=[common],
                            help='token correspondences of scenes')
    p.add_argument('--scene', help='scene folder or folder of scenes')
    p.add_argument('--pointmaps', nargs='+', metavar='FILE',
                   help='H x W x 3 pointmap TensorFiles, one per view')
    p.add_argument('--tokens', type=int, nargs=2, default=(16, 16),
                   metavar=('h', 'w'))
    p.add_argument('--tau', type=float)
    p.add_argument('--method', choices=('brute', 'kdtree'))
    p.set_defaults(func=cmd_corr)

    p = commands.add_parser('train', parents=[common],
                            help='train the toy denoiser')
    p.add_argument('--data', help='folder of scenes')
    p.add_argument('--eval-data', dest='eval_data',
                   help='held-out scenes for the precision monitor')
    p.add_argument('--lambda', dest='loss_weight', type=float)
    p.add_argument('--tau', type=float)
    p.add_argument('--iters', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--loss-type', dest='loss_type', choices=('CE', 'L1'))
    p.add_argument('--head-mode', dest='head_mode', choices=('mlp', 'none'))
    p.add_argument('--target', choices=('attention', 'cost'))
    p.add_argument('--layer', type=int, help='supervised block')
    p.add_argument('--eval-every', dest='eval_every', type=int)
    p.add_argument('--log-every', dest='log_every', type=int)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser('sample', parents=[common],
                            help='generate target views with DDIM')
    p.add_argument('--checkpoint')
    p.add_argument('--scene', help='scene providing cameras and references')
    p.add_argument('--references', type=int, nargs='+', default=[0])
    p.add_argument('--steps', type=int, default=config.sample_steps)
    p.add_argument('--cfg', type=float, default=config.cfg_weight)
    p.set_defaults(func=cmd_sample)

    p = commands.add_parser('probe', parents=[common],
                            help='correspondence precision of matches')
    p.add_argument('--pairs', metavar='MANIFEST')
    p.add_argument('--data', help='folder of scenes instead of a manifest')
    p.add_argument('--checkpoint')
    p.add_argument('--source', choices=SOURCES[:3], default='features')
    p.add_argument('--metric', choices=METRICS, default='cosine')
    p.add_argument('--topk', type=int, default=config.topk)
    p.add_argument('--rho', type=float, default=config.rho)
    p.add_argument('--resize-grid', dest='resize_grid', type=int)
    p.add_argument('--tokens', type=int, nargs=2, default=(32, 32),
                   metavar=('h', 'w'))
    p.add_argument('--layer', type=int)
    p.add_argument('--t', type=int, default=0, help='diffusion step')
    p.add_argument('--sweep', action='store_true',
                   help='report every block of the checkpoint')
    p.add_argument('--svg', action='store_true', help='per-bin bar chart')
    p.set_defaults(func=cmd_probe)

    p = commands.add_parser('perturb', parents=[common],
                            help='identity perturbation of one block')
    p.add_argument('--checkpoint')
    p.add_argument('--scene')
    p.add_argument('--layer', type=int)
    p.add_argument('--tau', type=float)
    p.add_argument('--topk', type=int, default=config.topk)
    p.add_argument('--rho', type=float, default=0.1)
    p.set_defaults(func=cmd_perturb)

    p = commands.add_parser('report', parents=[common],
                            help='plots and tables of metrics files')
    p.add_argument('metrics', nargs='+', help='metrics CSV files')
    p.add_argument('--reports', nargs='+', help='precision report JSON files')
    p.add_argument('--labels', nargs='+', help='arm labels, one per file')
    p.set_defaults(func=cmd_report_args)

    p = commands.add_parser('pipeline', parents=[common],
                            help='paired baseline / cameo experiment')
    p.set_defaults(func=cmd_pipeline_args)
    return parser


def configure(args):
    '''Apply global options to config and logging.'''

    level = None
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    setup_logging(level)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError('--threads must be >= 1')
        config.threads = args.threads
    if args.precision is not None:
        config.precision = args.precision
    config.seed = args.seed


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure(args)
        args.func(args)
    except ConfigError as e:
        log.error('%s', e)
        return EXIT_CONFIG
    except (CameoError, OSError, ValueError) as e:
        log.error('%s', e)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
