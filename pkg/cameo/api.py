# -*- coding: utf-8 -*-

# Local imports
from .correspondence import build_correspondence, correspondence_set, token_grid
from .dataset import build_dataset
from .models import SceneRecord, load_scene, save_scene
from .pipeline import cmd_pipeline
from .probe import attention_precision, evaluate_pairs, layer_sweep
from .reports import cmd_report
from .scene import SceneSetSpec, generate_scene_set
from .tensors import load_tensor, make_rng, save_tensor
from .training import TrainConfig, sample, train

__all__ = [
    'attention_precision',
    'build_correspondence',
    'build_dataset',
    'clear_registry',
    'cmd_pipeline',
    'cmd_report',
    'correspondence_set',
    'evaluate_pairs',
    'generate_scene_set',
    'layer_sweep',
    'load_scene',
    'load_tensor',
    'make_rng',
    'register_part',
    'sample',
    'save_scene',
    'save_tensor',
    'SceneSetSpec',
    'token_grid',
    'train',
    'TrainConfig',
    'unregister_part',
]


def register_part(part):
    '''Register a ScenePart written and read with every scene.'''

    if part not in SceneRecord.registry:
        SceneRecord.registry.append(part)


def unregister_part(part):
    '''Unregister a ScenePart'''

    if part in SceneRecord.registry:
        SceneRecord.registry.remove(part)


def clear_registry():
    '''Unregister all ScenePart'''

    del SceneRecord.registry[:]
