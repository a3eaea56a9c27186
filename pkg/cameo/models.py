# -*- coding: utf-8 -*-

# Standard library imports
import logging
import os
from dataclasses import asdict, dataclass, field

# Third party imports
import numpy as np

# Local imports
from . import lib
from .dataset import assemble_scene_data
from .scene import (
    Pointmap,
    Scene,
    plucker_embedding,
    render_latent,
    render_pointmap,
)
from .tensors import load_tensor, save_tensor
from .utils import dump_json, load_json, output_dir

log = logging.getLogger(__name__)

SCENE_FILE = 'scene.json'
CONFIG_FILE = 'config.json'


class SceneRecord(dict):
    '''A dictionary holding a scene manifest and its rendered views.

    Per-view arrays are produced, written and read by the registered
    `ScenePart` objects.

    Arguments:
        path (str): Path to the scene folder.
    '''

    registry = []

    def __init__(self, path=None, *args, **kwargs):
        self.path = path
        self.name = None
        if self.path:
            self.name = os.path.basename(os.path.normpath(self.path))
        super(SceneRecord, self).__init__(*args, **kwargs)

    @classmethod
    def gather(cls, scene, res=None, channels=4):
        '''Render a Scene with all registered parts.

        Arguments:
            scene (Scene): scene to render
            res (tuple): pixel resolution, defaults to the cameras' own
            channels (int): latent channels

        Returns:
            SceneRecord holding the manifest and per-view arrays.
        '''

        res = tuple(res or (scene.cameras[0].height, scene.cameras[0].width))
        record = cls()
        record.name = scene.name
        record['scene'] = scene.to_dict()
        record['res'] = list(res)
        record['channels'] = channels
        for part in cls.registry:
            record.update(part.gather(scene, res, channels))
        return record

    @classmethod
    def load(cls, path):
        '''Load a scene folder written by export.'''

        manifest = load_json(os.path.join(path, SCENE_FILE))
        record = cls(path, manifest)
        views = lib.get_views(path)
        for part in cls.registry:
            part.load(record, views)
        return record

    @property
    def scene(self):
        return Scene.from_dict(self['scene'])

    @property
    def views(self):
        return len(self['scene']['cameras'])

    def pointmaps(self):
        return [Pointmap(values) for values in self['pointmap']]

    def to_scene_data(self, h, w, tau=None, method=None):
        '''Token-level SceneData of this record.'''

        scene = self.scene
        return assemble_scene_data(
            scene.name, scene.cameras, self.pointmaps(), self['latent'],
            h, w, tau, method,
        )

    def export(self, outdir):
        '''Export this `SceneRecord` to a folder.

        Arguments:
            outdir (str): Output folder, removed again if the export fails
        '''

        with output_dir(outdir):
            for part in self.registry:
                part.export(self, outdir)
            manifest = {
                key: value for key, value in self.items()
                if not any(key == part.kind for part in self.registry)
            }
            dump_json(manifest, os.path.join(outdir, SCENE_FILE))
        self.path = outdir
        return outdir


class ScenePart(object):
    '''Base class for the per-view arrays of a scene.'''

    kind = None
    dtype = np.float64

    def render(self, scene, index, res, channels):
        raise NotImplementedError()

    def gather(self, scene, res, channels):
        return {
            self.kind: [
                np.asarray(self.render(scene, index, res, channels),
                           dtype=self.dtype)
                for index in range(len(scene.cameras))
            ]
        }

    def export(self, record, outdir):
        for view, values in enumerate(record[self.kind]):
            save_tensor(lib.view_path(outdir, view, self.kind), values)

    def load(self, record, views):
        values = []
        for view in range(record.views):
            path = views.get(view, {}).get(self.kind)
            if path is None:
                raise IOError('{} is missing the {} of view {}'.format(
                    record.path, self.kind, view))
            values.append(load_tensor(path))
        record[self.kind] = values


class PointmapPart(ScenePart):
    '''World coordinates per pixel, NaN on background.'''

    kind = 'pointmap'

    def render(self, scene, index, res, channels):
        return render_pointmap(scene, index, res).values


class PluckerPart(ScenePart):
    '''Plücker rays per pixel.'''

    kind = 'plucker'

    def render(self, scene, index, res, channels):
        return plucker_embedding(scene.cameras[index], res).values


class LatentPart(ScenePart):
    '''Clean latent image per view.'''

    kind = 'latent'

    def render(self, scene, index, res, channels):
        return render_latent(scene, index, res, channels)


SceneRecord.registry.extend([PointmapPart(), PluckerPart(), LatentPart()])


def save_scene(scene, outdir, res=None, channels=4):
    '''Render and export a Scene, see SceneRecord.export.'''

    return SceneRecord.gather(scene, res, channels).export(outdir)


def load_scene(path):
    '''Load a scene folder, see SceneRecord.load.'''

    return SceneRecord.load(path)


@dataclass
class RunConfig:
    '''Everything a command needs to re-derive its outputs.

    Attributes:
        command: CLI command name
        seed: run seed
        out: output folder
        precision: float width in bits, 32 or 64
        threads: worker thread cap
        params: command specific parameters
    '''

    command: str
    seed: int = 0
    out: str = ''
    precision: int = 64
    threads: int = 1
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def save(self, outdir):
        path = os.path.join(outdir, CONFIG_FILE)
        dump_json(self.to_dict(), path)
        return path

    @classmethod
    def load(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, CONFIG_FILE)
        return cls.from_dict(load_json(path))
