# -*- coding: utf-8 -*-
'''
End-to-end experiment: synth -> corr -> train (two arms) -> probe -> report.

The baseline arm trains with lambda = 0 and the cameo arm with the preset's
lambda, on identical data and seeds. Both arms are probed at every saved
checkpoint on held-out scenes.
'''

# Standard library imports
import logging
import os
from contextlib import contextmanager

# Local imports
from . import lib
from .correspondence import mask_coverage
from .dataset import build_dataset
from .denoiser import ModelConfig
from .errors import ConfigError, StageError
from .models import RunConfig, save_scene
from .probe import attention_pairs, evaluate_pair, evaluate_pairs
from .reports import (
    checkpoint_medians,
    cmd_report,
    is_monotone,
    write_metrics,
    write_report_csv,
)
from .scene import SceneSetSpec, generate_scene_set
from .tensors import make_rng
from .training import TrainConfig, evaluate_denoise, perturbation_effect, train
from .utils import dump_json, output_dir

log = logging.getLogger(__name__)

ARMS = ('baseline', 'cameo')
SCENE_KEYS = ('scenes', 'views', 'spread_deg', 'res', 'primitives', 'size',
              'distance', 'elevation_deg', 'jitter_deg', 'fov_deg', 'max_tries')


@contextmanager
def stage(name):
    '''Tag any failure inside the block with the stage name.'''

    log.info('Stage %s', name)
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as e:
        raise StageError(name, e)


def scene_spec(params, count=None):
    '''SceneSetSpec from the flat scene keys of a config dict.'''

    values = {key: params[key] for key in SCENE_KEYS if key in params}
    for key in ('res', 'primitives', 'size', 'distance', 'elevation_deg'):
        if key in values:
            values[key] = tuple(values[key])
    if count is not None:
        values['scenes'] = count
    try:
        spec = SceneSetSpec(**values)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError('bad scene settings: {}'.format(e))
    return spec


def model_config(params):
    values = dict(params.get('model', {}))
    values.setdefault('views', params.get('views', 2))
    try:
        return ModelConfig(**values)
    except TypeError as e:
        raise ConfigError('bad model settings: {}'.format(e))


def train_config(params, seed, **overrides):
    values = dict(params.get('train', {}))
    values['seed'] = seed
    values.update(overrides)
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ConfigError('bad train settings: {}'.format(e))


def synthesize(params, seed, outdir=None):
    '''Training and held-out scenes, exported when outdir is given.

    Returns:
        (train_scenes, eval_scenes)
    '''

    train_spec = scene_spec(params)
    eval_spec = scene_spec(params, params.get('eval_scenes', 4))
    train_scenes = generate_scene_set(train_spec, make_rng(seed, 10))
    eval_scenes = generate_scene_set(eval_spec, make_rng(seed, 11))
    for scene in eval_scenes:
        scene.name = 'eval_' + scene.name
    if outdir:
        for scene in train_scenes + eval_scenes:
            save_scene(scene, os.path.join(outdir, scene.name),
                       channels=params.get('model', {}).get('channels', 4))
    return train_scenes, eval_scenes


def probe_checkpoints(checkpoints, eval_set, k=None, rho=None):
    '''Per-pair attention precision of the supervised block at every
    checkpoint.

    Returns:
        dict: iteration -> list of per-pair precisions
    '''

    per_checkpoint = {}
    for iteration, path in sorted(checkpoints.items()):
        model, _, _ = lib.load_checkpoint(path)
        pairs = attention_pairs(model, eval_set)
        per_checkpoint[iteration] = [
            evaluate_pair(pair, 'attention', k=k, rho=rho)[0] for pair in pairs
        ]
    return per_checkpoint


def cmd_pipeline(params, outdir, seed=0, threads=None, precision=None):
    '''Run the paired experiment of a preset.

    Arguments:
        params (dict): merged preset / config file values
        outdir (str): experiment folder
        seed (int): run seed

    Returns:
        the experiment folder, holding config.json, metrics.csv,
        report.json and curves.svg
    '''

    mc = model_config(params)
    arms = {
        'baseline': train_config(params, seed, loss_weight=0.0),
        'cameo': train_config(params, seed),
    }
    if precision:
        for tc in arms.values():
            tc.precision = precision
    h, w = mc.h, mc.w
    tau = arms['cameo'].tau
    rho = arms['cameo'].probe_rho
    topk = arms['cameo'].probe_topk

    with output_dir(outdir):
        RunConfig('pipeline', seed, outdir, precision or arms['cameo'].precision,
                  threads or 1, params).save(outdir)

        with stage('synth'):
            train_scenes, eval_scenes = synthesize(
                params, seed, os.path.join(outdir, 'scenes'))

        with stage('corr'):
            dataset = build_dataset(train_scenes, h, w, mc.channels, tau=tau,
                                    threads=threads)
            eval_set = build_dataset(eval_scenes, h, w, mc.channels, tau=tau,
                                     threads=threads)
            for data in dataset + eval_set:
                lib.save_correspondence(
                    data.corrs, os.path.join(outdir, 'corr', data.name))
            coverage = mask_coverage([c for d in dataset for c in d.corrs])
            log.info('Mask coverage %.3f', coverage)

        results = {}
        with stage('train'):
            for arm in ARMS:
                results[arm] = train(dataset, arms[arm], mc,
                                     os.path.join(outdir, arm), eval_set)

        report = dict(
            seed=seed,
            mask_coverage=coverage,
            rho=rho,
            top_k=topk,
            arms={},
        )
        with stage('probe'):
            os.makedirs(os.path.join(outdir, 'probe'), exist_ok=True)
            for arm in ARMS:
                per_checkpoint = probe_checkpoints(
                    results[arm].checkpoints, eval_set, topk, rho)
                medians = checkpoint_medians(per_checkpoint)
                final = evaluate_pairs(
                    attention_pairs(results[arm].model, eval_set),
                    'attention', k=topk, rho=rho, threads=1)
                dump_json(final.to_dict(),
                          os.path.join(outdir, 'probe', arm + '.json'))
                write_report_csv(final, os.path.join(outdir, 'probe', arm + '.csv'))
                last = results[arm].metrics[-1] if results[arm].metrics else {}
                report['arms'][arm] = dict(
                    loss_weight=arms[arm].loss_weight,
                    checkpoint_medians={str(k): v for k, v in medians.items()},
                    monotone=is_monotone(medians.values()),
                    final=final.to_dict(),
                    final_loss_denoise=last.get('loss_denoise'),
                    final_loss_cameo=last.get('loss_cameo'),
                    eval_loss_denoise=evaluate_denoise(
                        results[arm].model, eval_set, arms[arm], seed=seed),
                )
            report['perturbation'] = perturbation_effect(
                results['cameo'].model, eval_set, k=topk, rho=rho,
                loss_type=arms['cameo'].loss_type, seed=seed)

        with stage('report'):
            rows = []
            for arm in ARMS:
                rows.extend(dict(r, arm=arm) for r in results[arm].metrics)
            metrics_path = write_metrics(rows, os.path.join(outdir, 'metrics.csv'))
            base = report['arms']['baseline']
            ours = report['arms']['cameo']
            report['comparison'] = dict(
                precision_gap=ours['final']['overall'] - base['final']['overall'],
                denoise_ratio=_ratio(ours['eval_loss_denoise'],
                                     base['eval_loss_denoise']),
            )
            dump_json(report, os.path.join(outdir, 'report.json'))
            cmd_report(
                [metrics_path], outdir,
                [os.path.join(outdir, 'probe', arm + '.json') for arm in ARMS],
            )
    return outdir


def _ratio(a, b):
    if a is None or not b:
        return None
    return a / b
