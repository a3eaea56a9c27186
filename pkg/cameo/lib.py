# -*- coding: utf-8 -*-
'''
Simple pipeline api used to name, find, save and load cameo artifacts.

Artifact names come from the templates in config and are parsed back with
pat, so a directory written by one command can be rediscovered by another.
'''

# Standard library imports
import logging
import os

# Third party imports
import numpy as np
import yaml

# Local imports
from . import config
from . import pat
from .correspondence import TokenCorrespondence
from .denoiser import ModelConfig, ToyDenoiser
from .diffusion import NoiseSchedule
from .errors import ConfigError
from .tensors import load_tensor, save_tensor
from .utils import dump_json, load_json, output_dir

log = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
CORR_INDEX = 'index.json'


def normalize(*parts):
    return os.path.normpath(os.path.join(*parts)).replace('\\', '/')


def get_view_template():
    '''Get the template naming per-view TensorFiles of a scene.'''

    return config.view_template


def set_view_template(template):
    '''Set the template naming per-view TensorFiles.

    The template needs a {view:d} and a {kind} field, eg.
    "{view:d}.{kind}.camt" names the pointmap of view 0 "0.pointmap.camt".
    '''
    config.view_template = template


def get_pair_template():
    '''Get the template naming per-pair correspondence TensorFiles.'''

    return config.pair_template


def set_pair_template(template):
    '''Set the template naming per-pair TensorFiles. Needs {kind}, {src:d}
    and {dst:d} fields.'''
    config.pair_template = template


def get_checkpoint_template():
    return config.checkpoint_template


def set_checkpoint_template(template):
    '''Set the template naming checkpoint folders. Needs {iteration:d}.'''
    config.checkpoint_template = template


def view_path(root, view, kind):
    tmpl = pat.compile(get_view_template())
    return normalize(root, tmpl.format(view=view, kind=kind))


def pair_path(root, kind, src, dst):
    tmpl = pat.compile(get_pair_template())
    return normalize(root, tmpl.format(kind=kind, src=src, dst=dst))


def checkpoint_path(root, iteration):
    tmpl = pat.compile(get_checkpoint_template())
    return normalize(root, tmpl.format(iteration=iteration))


def _scan(root, template, isdir=False):
    '''Parse every entry of root with a template, skipping hidden and
    unparseable entries.'''

    tmpl = pat.compile(template)
    found = []
    if not os.path.isdir(root):
        return found
    for item in sorted(os.listdir(root)):

        # Skip private files
        if item.startswith('.'):
            continue

        path = normalize(root, item)
        if os.path.isdir(path) != isdir:
            continue

        fields = tmpl.parse(item)
        if fields is None:
            log.warning('Failed to parse: %s', path)
            continue
        found.append((path, fields))
    return found


def get_views(root):
    '''Get the per-view files of a scene directory.

    Returns:
        dict: view index -> {kind: path}
    '''

    views = {}
    for path, fields in _scan(root, get_view_template()):
        views.setdefault(fields['view'], {})[fields['kind']] = path
    return views


def get_pairs(root):
    '''Get the per-pair files of a correspondence directory.

    Returns:
        dict: (src, dst) -> {kind: path}
    '''

    pairs = {}
    for path, fields in _scan(root, get_pair_template()):
        key = (fields['src'], fields['dst'])
        pairs.setdefault(key, {})[fields['kind']] = path
    return pairs


def get_checkpoints(root):
    '''Get the checkpoints of a training run.

    Returns:
        dict: iteration -> checkpoint folder, in iteration order
    '''

    found = {}
    for path, fields in _scan(root, get_checkpoint_template(), isdir=True):
        if not os.path.isfile(normalize(path, MANIFEST)):
            log.warning('Checkpoint without manifest: %s', path)
            continue
        found[fields['iteration']] = path
    return dict(sorted(found.items()))


def get_latest_checkpoint(root):
    '''Get the checkpoint folder with the highest iteration.'''

    checkpoints = get_checkpoints(root)
    if checkpoints:
        return list(checkpoints.values())[-1]


def get_scene_dirs(root):
    '''Get the scene folders (those holding a scene.json) below root.'''

    scenes = []
    if not os.path.isdir(root):
        return scenes
    for item in sorted(os.listdir(root)):
        if item.startswith('.'):
            continue
        path = normalize(root, item)
        if os.path.isfile(normalize(path, 'scene.json')):
            scenes.append(path)
    return scenes


def save_checkpoint(outdir, model, iteration, schedule=None, extra=None):
    '''Write a checkpoint folder: a JSON manifest plus one TensorFile per
    parameter.

    Arguments:
        outdir (str): checkpoint folder, see checkpoint_path
        model (ToyDenoiser): model whose params are saved
        iteration (int): training iteration
        schedule (NoiseSchedule): schedule the model was trained with
        extra (dict): additional manifest entries, eg. the train config
    '''

    with output_dir(outdir):
        names = sorted(model.params)
        for name in names:
            save_tensor(normalize(outdir, name + '.camt'), model.params[name])
        manifest = dict(
            iteration=int(iteration),
            model=model.config.to_dict(),
            dtype=np.dtype(model.dtype).name,
            params={name: list(model.params[name].shape) for name in names},
        )
        if schedule is not None:
            manifest['schedule'] = schedule.to_dict()
        if extra:
            manifest.update(extra)
        dump_json(manifest, normalize(outdir, MANIFEST))
    return outdir


def load_checkpoint(path):
    '''Load a checkpoint folder.

    Returns:
        (ToyDenoiser, NoiseSchedule, manifest)
    '''

    manifest_path = normalize(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise ConfigError('no checkpoint manifest in {}'.format(path))
    manifest = load_json(manifest_path)
    model_config = ModelConfig.from_dict(manifest['model'])
    model = ToyDenoiser(model_config, dtype=np.dtype(manifest['dtype']).type)

    params = {}
    for name, shape in manifest['params'].items():
        param_path = normalize(path, name + '.camt')
        if not os.path.isfile(param_path):
            raise ConfigError('checkpoint is missing {}'.format(name))
        value = load_tensor(param_path)
        if list(value.shape) != list(shape):
            raise ConfigError('{} has shape {}, manifest says {}'.format(
                name, value.shape, shape))
        params[name] = value
    model.params = params

    if 'schedule' in manifest:
        schedule = NoiseSchedule.from_dict(manifest['schedule'])
    else:
        schedule = NoiseSchedule.linear(model_config.T)
    return model, schedule, manifest


def save_correspondence(corrs, outdir):
    '''Write P/M TensorFiles per ordered pair and an index.json.

    P is the uint8 one-hot map and M the uint8 visibility mask.
    '''

    with output_dir(outdir):
        index = dict(pairs=[])
        for corr in corrs:
            src, dst = corr.pair
            save_tensor(pair_path(outdir, 'P', src, dst), corr.onehot)
            save_tensor(pair_path(outdir, 'M', src, dst), corr.mask)
            index['pairs'].append(dict(
                src=src, dst=dst, tau=corr.tau, h=corr.h, w=corr.w,
                coverage=corr.coverage,
            ))
        coverage = [c.coverage for c in corrs]
        index['mask_coverage'] = float(np.mean(coverage)) if coverage else 0.0
        dump_json(index, normalize(outdir, CORR_INDEX))
    return outdir


def load_correspondence(root):
    '''Load correspondences written by save_correspondence.

    Returns:
        list of TokenCorrespondence in index order
    '''

    index = load_json(normalize(root, CORR_INDEX))
    files = get_pairs(root)
    corrs = []
    for entry in index['pairs']:
        key = (entry['src'], entry['dst'])
        if key not in files or not {'P', 'M'} <= set(files[key]):
            raise ConfigError('missing P/M files for pair {}'.format(key))
        onehot = load_tensor(files[key]['P'])
        mask = load_tensor(files[key]['M'])
        corrs.append(TokenCorrespondence(
            pair=key, match=np.argmax(onehot, axis=1).astype(np.int64),
            mask=mask.astype(np.uint8), tau=entry['tau'],
            h=entry['h'], w=entry['w'],
        ))
    return corrs


def get_presets_root():
    '''Get the folder holding the preset YAML files.'''

    return config.presets_root


def set_presets_root(path):
    config.presets_root = path


def get_presets():
    '''Get the names of the available presets.'''

    root = get_presets_root()
    if not os.path.isdir(root):
        return []
    return sorted(
        os.path.splitext(item)[0] for item in os.listdir(root)
        if item.endswith('.yml') and not item.startswith('.')
    )


def load_config_file(path):
    '''Read a YAML config file into a dict.'''

    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f.read())
    except (IOError, OSError, yaml.YAMLError) as e:
        raise ConfigError('Failed to read {}: {}'.format(path, e))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError('{} must hold a mapping'.format(path))
    return data


def load_preset(name):
    '''Read a preset by name, see get_presets.'''

    path = normalize(get_presets_root(), name + '.yml')
    if not os.path.isfile(path):
        raise ConfigError('Unknown preset {!r}, choose from {}'.format(
            name, ', '.join(get_presets())))
    return load_config_file(path)
