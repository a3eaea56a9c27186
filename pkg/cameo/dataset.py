# -*- coding: utf-8 -*-
'''
Per-scene training and evaluation arrays at token resolution.
'''

# Standard library imports
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

# Third party imports
import numpy as np

# Local imports
from .correspondence import TokenCorrespondence, correspondence_set, token_grid
from .scene import (
    Camera,
    Pointmap,
    plucker_embedding,
    relative_rotation_deg,
    render_latent,
    render_pointmap,
)
from .tensors import resize_bilinear
from .utils import parallel_map, progress

log = logging.getLogger(__name__)


@dataclass
class SceneData:
    '''Everything the denoiser and the probe need from one scene.

    Attributes:
        latents: F x (h*w) x c clean token latents
        plucker: F x (h*w) x 6 Plücker rays at token centres
        grids: token grids of every view
        corrs: correspondences of every ordered pair
        thetas: relative rotation in degrees per ordered pair
    '''

    name: str
    cameras: List[Camera]
    latents: np.ndarray
    plucker: np.ndarray
    grids: list
    corrs: List[TokenCorrespondence]
    thetas: Dict[Tuple[int, int], float] = field(default_factory=dict)

    @property
    def views(self):
        return self.latents.shape[0]

    @property
    def token_shape(self):
        return self.grids[0].h, self.grids[0].w

    def pairs(self):
        return [c.pair for c in self.corrs]


def conditioning(plucker, reference, drop=False):
    '''Per-token conditioning: Plücker rays followed by the reference flag.

    Arguments:
        plucker (ndarray): F x n x 6 rays
        reference (ndarray): F booleans, True for reference views
        drop (bool): zero the camera rays, keeping the reference flag

    Returns:
        F x n x 7 array
    '''

    plucker = np.asarray(plucker)
    F, n, _ = plucker.shape
    flag = np.broadcast_to(
        np.asarray(reference, dtype=plucker.dtype)[:, None, None], (F, n, 1))
    rays = np.zeros_like(plucker) if drop else plucker
    return np.concatenate([rays, flag], axis=-1)


def assemble_scene_data(name, cameras, pointmaps, latents, h, w, tau=None,
                        method=None, threads=1):
    '''Token-level SceneData from pixel-resolution pointmaps and latents.

    Arguments:
        cameras (list): one Camera per view
        pointmaps (list): one Pointmap per view
        latents (list): one H x W x c array per view
        h, w (int): token grid
    '''

    grids = [token_grid(pm, h, w) for pm in pointmaps]
    tokens = np.stack([
        resize_bilinear(np.asarray(lat, dtype=np.float64), h, w).reshape(h * w, -1)
        for lat in latents
    ])
    rays = np.stack([
        plucker_embedding(cam, (h, w)).values.reshape(h * w, 6)
        for cam in cameras
    ])
    corrs = correspondence_set(grids, tau, method, threads)
    thetas = {
        c.pair: relative_rotation_deg(cameras[c.pair[0]], cameras[c.pair[1]])
        for c in corrs
    }
    return SceneData(name, list(cameras), tokens, rays, grids, corrs, thetas)


def build_scene_data(scene, h, w, channels=4, res=None, tau=None, method=None):
    '''Render a Scene and assemble its SceneData.

    Arguments:
        scene (Scene): scene to render
        h, w (int): token grid
        channels (int): latent channels
        res (tuple): pixel resolution, defaults to the cameras' own
    '''

    res = res or (scene.cameras[0].height, scene.cameras[0].width)
    views = range(len(scene.cameras))
    pointmaps = [render_pointmap(scene, v, res) for v in views]
    latents = [render_latent(scene, v, res, channels) for v in views]
    return assemble_scene_data(scene.name, scene.cameras, pointmaps, latents,
                               h, w, tau, method)


def build_dataset(scenes, h, w, channels=4, res=None, tau=None, method=None,
                  threads=None):
    '''SceneData for every scene, rendered concurrently.'''

    if not scenes:
        raise ValueError('dataset is empty')

    def build(scene):
        return build_scene_data(scene, h, w, channels, res, tau, method)

    data = parallel_map(build, progress(scenes, desc='scenes'), threads)
    log.info('Prepared %d scenes at %dx%d tokens', len(data), h, w)
    return data


def pointmap_of(grid):
    '''Pointmap view of a TokenGrid.'''

    return Pointmap(grid.points.reshape(grid.h, grid.w, 3))
